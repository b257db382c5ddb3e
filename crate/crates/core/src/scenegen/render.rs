//! Rasterization of parametric objects.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Circle,
    Square,
    Triangle,
    Cross,
    Bar,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Circle => "circle",
            Family::Square => "square",
            Family::Triangle => "triangle",
            Family::Cross => "cross",
            Family::Bar => "bar",
        }
    }

    /// Families whose rotations by multiples of 45° look different.
    pub fn is_oriented(self) -> bool {
        matches!(self, Family::Triangle | Family::Bar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outline {
    Plain,
    LightRim,
    DarkRim,
}

impl Outline {
    pub fn name(self) -> &'static str {
        match self {
            Outline::Plain => "plain",
            Outline::LightRim => "light-rim",
            Outline::DarkRim => "dark-rim",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fill {
    Solid,
    Striped,
    Checkered,
}

impl Fill {
    pub fn name(self) -> &'static str {
        match self {
            Fill::Solid => "solid",
            Fill::Striped => "striped",
            Fill::Checkered => "checkered",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Flat,
    Grainy,
    Shaded,
    Glossy,
}

impl Texture {
    pub fn name(self) -> &'static str {
        match self {
            Texture::Flat => "flat",
            Texture::Grainy => "grainy",
            Texture::Shaded => "shaded",
            Texture::Glossy => "glossy",
        }
    }
}

/// Fully specified appearance of one object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectStyle {
    pub family: Family,
    pub outline: Outline,
    pub fill: Fill,
    pub color: [u8; 3],
    /// Characteristic extent in pixels (diameter, side or length).
    pub size: f32,
    pub texture: Texture,
    /// Counter-clockwise rotation in degrees.
    pub angle: f32,
}

/// Rendering constants shared by every object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Look {
    pub rim_width: f32,
    pub light_rim: [u8; 3],
    pub dark_rim: [u8; 3],
    pub period: f32,
}

/// Object-local rasterization: offsets from the integer anchor pixel plus
/// the color of each covered pixel.
#[derive(Debug, Clone)]
pub struct Sprite {
    pub pixels: Vec<(i32, i32, [u8; 3])>,
    pub min: (i32, i32),
    pub max: (i32, i32),
}

/// Signed distance-like depth of a point inside a convex polygon (positive
/// inside) for the vertex order used by the triangle below.
fn polygon_depth(pts: &[(f32, f32)], x: f32, y: f32) -> f32 {
    let mut depth = f32::INFINITY;
    for i in 0..pts.len() {
        let (x0, y0) = pts[i];
        let (x1, y1) = pts[(i + 1) % pts.len()];
        let (ex, ey) = (x1 - x0, y1 - y0);
        let len = (ex * ex + ey * ey).sqrt();
        depth = depth.min(((x - x0) * ey - (y - y0) * ex) / len);
    }
    depth
}

fn rect_depth(hw: f32, hh: f32, x: f32, y: f32) -> f32 {
    (hw - x.abs()).min(hh - y.abs())
}

/// Depth of an object-frame point inside the unrotated shape (positive
/// inside, roughly the distance to the boundary).
fn shape_depth(family: Family, s: f32, x: f32, y: f32) -> f32 {
    match family {
        Family::Circle => 0.5 * s - (x * x + y * y).sqrt(),
        Family::Square => rect_depth(0.5 * s, 0.5 * s, x, y),
        Family::Bar => rect_depth(0.25 * s, 0.5 * s, x, y),
        Family::Cross => {
            let (l, w) = (0.5 * s, 0.2 * s);
            rect_depth(l, w, x, y).max(rect_depth(w, l, x, y))
        }
        Family::Triangle => {
            // Isosceles, apex up.
            let (h, b) = (0.5 * s, 0.35 * s);
            polygon_depth(&[(0.0, -h), (-b, h), (b, h)], x, y)
        }
    }
}

fn scale(c: [u8; 3], f: f32) -> [f32; 3] {
    c.map(|v| v as f32 * f)
}

fn to_u8(c: [f32; 3]) -> [u8; 3] {
    c.map(|v| v.round().clamp(0.0, 255.0) as u8)
}

/// Rasterizes `style` centered at `(fx, fy)` relative to the anchor pixel's
/// top-left corner. Draws per-pixel noise from `rng` for grainy textures.
pub fn rasterize<R: Rng + ?Sized>(style: &ObjectStyle, look: &Look, fx: f32, fy: f32, rng: &mut R) -> Sprite {
    let s = style.size;
    let reach = (0.75 * s).ceil() as i32 + 1;
    let (sin, cos) = style.angle.to_radians().sin_cos();
    let mut pixels = Vec::new();
    let (mut min, mut max) = ((i32::MAX, i32::MAX), (i32::MIN, i32::MIN));
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let px = dx as f32 + 0.5 - fx;
            let py = dy as f32 + 0.5 - fy;
            // Rotate the image offset into the object frame (y down, so a
            // counter-clockwise visual rotation uses the transposed matrix).
            let u = cos * px - sin * py;
            let v = sin * px + cos * py;
            let depth = shape_depth(style.family, s, u, v);
            if depth < 0.0 {
                continue;
            }
            let rgb = if style.outline != Outline::Plain && depth < look.rim_width {
                match style.outline {
                    Outline::LightRim => look.light_rim,
                    _ => look.dark_rim,
                }
            } else {
                let k = look.period;
                let dark = match style.fill {
                    Fill::Solid => false,
                    Fill::Striped => ((u + 64.0 * k) / k).floor() as i64 % 2 == 1,
                    Fill::Checkered => (((u + 64.0 * k) / k).floor() + ((v + 64.0 * k) / k).floor()) as i64 % 2 == 1,
                };
                let mut c = scale(style.color, if dark { 0.5 } else { 1.0 });
                match style.texture {
                    Texture::Flat => {}
                    Texture::Grainy => {
                        let f = if rng.random_bool(0.25) {
                            0.35
                        } else {
                            1.0 + rng.random_range(-0.15f32..0.15)
                        };
                        c = c.map(|x| x * f);
                    }
                    Texture::Shaded => {
                        let t = (py / s + 0.5).clamp(0.0, 1.0);
                        let f = 1.25 - 0.8 * t;
                        c = c.map(|x| x * f);
                    }
                    Texture::Glossy => {
                        let (hx, hy) = (px + 0.18 * s, py + 0.18 * s);
                        let r = (hx * hx + hy * hy).sqrt() / (0.22 * s);
                        let a = (1.0 - r).clamp(0.0, 1.0) * 0.85;
                        c = c.map(|x| x * (1.0 - a) + 255.0 * a);
                    }
                }
                to_u8(c)
            };
            pixels.push((dx, dy, rgb));
            min = (min.0.min(dx), min.1.min(dy));
            max = (max.0.max(dx), max.1.max(dy));
        }
    }
    Sprite { pixels, min, max }
}

/// Fills `img` with `bg` plus uniform per-pixel noise of amplitude `noise`.
pub fn background<R: Rng + ?Sized>(width: u32, height: u32, bg: [u8; 3], noise: u8, rng: &mut R) -> Image {
    let mut img = Image::filled(width, height, bg);
    if noise > 0 {
        let n = noise as i16;
        for px in img.data.iter_mut() {
            *px = (*px as i16 + rng.random_range(-n..=n)).clamp(0, 255) as u8;
        }
    }
    img
}

/// HSV → RGB with h in degrees and s, v in [0, 1].
pub fn hsv(h: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    to_u8([r + m, g + m, b + m].map(|t| t * 255.0))
}
