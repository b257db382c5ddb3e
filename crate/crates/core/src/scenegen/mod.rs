//! Procedural scenes of parametric objects whose appearance encodes a
//! three-level category path and property–value attributes.
//!
//! A family (circle, square, ...) is the first category level, its outline
//! style the second and its fill pattern the third. Color, size class,
//! texture and (for oriented families) orientation are attributes. Nuisance
//! variation is limited to position, sub-pixel offset, a small scale jitter,
//! color jitter and background noise.

mod image;
mod render;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hiercodec::{CodecError, HierarchySpec, HierarchyTree, Label, NamedLabel};
use crate::vision::BBox;

pub use image::Image;
pub use render::{hsv, Family, Fill, ObjectStyle, Outline, Texture};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("scene {index}: could not place {objects} objects after {attempts} attempts")]
    Unplaceable {
        index: u64,
        objects: usize,
        attempts: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: record `{image}` invalid: {reason}")]
    Validation {
        path: PathBuf,
        line: usize,
        image: String,
        reason: String,
    },
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Hierarchy(#[from] CodecError),
}

impl SceneError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        SceneError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SceneError>;

pub const PROP_COLOR: &str = "color";
pub const PROP_ORIENTATION: &str = "orientation";
pub const PROP_SIZE: &str = "size";
pub const PROP_TEXTURE: &str = "texture";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedScalar {
    pub name: String,
    pub value: f32,
}

/// Visual vocabulary of the generator; the category tree and attribute
/// inventory are derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderParams {
    pub families: Vec<Family>,
    pub outlines: Vec<Outline>,
    pub fills: Vec<Fill>,
    pub colors: Vec<NamedColor>,
    /// Size classes in pixels.
    pub sizes: Vec<NamedScalar>,
    pub textures: Vec<Texture>,
    /// Orientation classes in degrees, used by oriented families only.
    pub orientations: Vec<NamedScalar>,
    pub background: [u8; 3],
    pub background_noise: u8,
    /// Maximum per-channel color offset.
    pub color_jitter: u8,
    /// Maximum relative size deviation.
    pub scale_jitter: f32,
    /// Gap between the rendered mask and the annotated box, in pixels.
    pub box_margin: u32,
    pub rim_width: f32,
    /// Stripe and checker period in pixels.
    pub pattern_period: f32,
}

impl Default for RenderParams {
    fn default() -> Self {
        const HUES: [&str; 12] = [
            "red", "orange", "yellow", "lime", "green", "teal", "cyan", "azure", "blue", "violet", "magenta", "pink",
        ];
        let colors = HUES
            .iter()
            .enumerate()
            .map(|(i, n)| NamedColor {
                name: n.to_string(),
                rgb: hsv(30.0 * i as f32, 0.85, 0.9),
            })
            .collect();
        let scalars = |pairs: &[(&str, f32)]| {
            pairs
                .iter()
                .map(|(n, v)| NamedScalar {
                    name: n.to_string(),
                    value: *v,
                })
                .collect()
        };
        Self {
            families: vec![
                Family::Circle,
                Family::Square,
                Family::Triangle,
                Family::Cross,
                Family::Bar,
            ],
            outlines: vec![Outline::Plain, Outline::LightRim, Outline::DarkRim],
            fills: vec![Fill::Solid, Fill::Striped, Fill::Checkered],
            colors,
            sizes: scalars(&[("small", 18.0), ("medium", 24.0), ("large", 30.0), ("huge", 36.0)]),
            textures: vec![Texture::Flat, Texture::Grainy, Texture::Shaded, Texture::Glossy],
            orientations: scalars(&[("deg0", 0.0), ("deg45", 45.0), ("deg90", 90.0), ("deg135", 135.0)]),
            background: [100, 100, 100],
            background_noise: 6,
            color_jitter: 10,
            scale_jitter: 0.04,
            box_margin: 4,
            rim_width: 1.5,
            pattern_period: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub scenes: u64,
    pub width: u32,
    pub height: u32,
    /// Inclusive range of objects per scene.
    pub objects: [u32; 2],
    /// Fraction of scenes assigned to the training split.
    pub train_fraction: f64,
    pub render: RenderParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 6000,
            width: 96,
            height: 96,
            objects: [1, 3],
            train_fraction: 5.0 / 6.0,
            render: RenderParams::default(),
        }
    }
}

/// Placement attempts per object before the scene is redrawn.
const PLACE_ATTEMPTS: usize = 200;
/// Redraws per scene before giving up.
const SCENE_ATTEMPTS: usize = 50;

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SceneError::Config(m.to_string()));
        let r = &self.render;
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if self.objects[0] == 0 || self.objects[0] > self.objects[1] {
            return bad("objects range must be non-empty and start at 1 or more");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train fraction must lie in (0, 1)");
        }
        if r.families.is_empty() || r.outlines.is_empty() || r.fills.is_empty() {
            return bad("families, outlines and fills must be non-empty");
        }
        if r.colors.is_empty() || r.sizes.is_empty() || r.textures.is_empty() {
            return bad("colors, sizes and textures must be non-empty");
        }
        if r.families.iter().any(|f| f.is_oriented()) && r.orientations.is_empty() {
            return bad("oriented families need at least one orientation");
        }
        if r.sizes.iter().any(|s| !(s.value > 2.0 * r.rim_width)) {
            return bad("sizes must exceed twice the rim width");
        }
        if !(0.0..0.5).contains(&r.scale_jitter) || r.pattern_period <= 0.0 {
            return bad("scale jitter must lie in [0, 0.5) and the pattern period be positive");
        }
        Ok(())
    }

    pub fn train_count(&self) -> u64 {
        (self.scenes as f64 * self.train_fraction).round() as u64
    }

    /// Category tree and attribute inventory implied by the render params.
    pub fn hierarchy(&self) -> Result<HierarchySpec> {
        let r = &self.render;
        let mut categories = Vec::new();
        let mut allow: BTreeMap<String, BTreeMap<String, Vec<String>>> = BTreeMap::new();
        let names = |v: &[NamedScalar]| v.iter().map(|s| s.name.clone()).collect::<Vec<_>>();
        let mut common = BTreeMap::new();
        common.insert(
            PROP_COLOR.to_string(),
            r.colors.iter().map(|c| c.name.clone()).collect(),
        );
        common.insert(PROP_SIZE.to_string(), names(&r.sizes));
        common.insert(
            PROP_TEXTURE.to_string(),
            r.textures.iter().map(|t| t.name().to_string()).collect(),
        );
        allow.insert(crate::hiercodec::ALL_LEAVES.to_string(), common);
        for f in &r.families {
            let mut bs = Vec::new();
            for o in &r.outlines {
                let b = format!("{}/{}", f.name(), o.name());
                let cs: Vec<String> = r.fills.iter().map(|k| format!("{b}/{}", k.name())).collect();
                if f.is_oriented() {
                    for c in &cs {
                        allow.insert(
                            c.clone(),
                            BTreeMap::from([(PROP_ORIENTATION.to_string(), names(&r.orientations))]),
                        );
                    }
                }
                bs.push((b, cs));
            }
            categories.push((f.name().to_string(), bs));
        }
        let mut props = vec![PROP_COLOR, PROP_SIZE, PROP_TEXTURE];
        if r.families.iter().any(|f| f.is_oriented()) {
            props.push(PROP_ORIENTATION);
        }
        let props: Vec<String> = props.into_iter().map(str::to_string).collect();
        let mut values: Vec<String> = r.colors.iter().map(|c| c.name.clone()).collect();
        values.extend(names(&r.sizes));
        values.extend(r.textures.iter().map(|t| t.name().to_string()));
        if r.families.iter().any(|f| f.is_oriented()) {
            values.extend(names(&r.orientations));
        }
        Ok(HierarchySpec::from_unique_names(
            ["family", "outline", "fill"],
            &categories,
            &props,
            &values,
            &allow,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attribute {
    pub property: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BBox,
    pub category: [String; 3],
    pub attributes: Vec<Attribute>,
}

impl SceneObject {
    /// Named triplets sharing this object's category path.
    pub fn named_labels(&self) -> Vec<NamedLabel> {
        self.attributes
            .iter()
            .map(|a| NamedLabel {
                category: self.category.clone(),
                property: a.property.clone(),
                value: a.value.clone(),
            })
            .collect()
    }

    pub fn labels(&self, tree: &HierarchyTree) -> std::result::Result<Vec<Label>, CodecError> {
        self.named_labels().iter().map(|n| tree.resolve(n)).collect()
    }

    pub fn path(&self, tree: &HierarchyTree) -> std::result::Result<[u32; 3], CodecError> {
        tree.resolve_path(&self.category)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    /// Image path relative to the manifest's directory.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<SceneObject>,
}

impl SceneRecord {
    /// Checks the record invariants against `tree`.
    pub fn validate(&self, tree: &HierarchyTree) -> std::result::Result<(), String> {
        if self.objects.is_empty() {
            return Err("scene has no objects".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !o.bbox.inside_image(self.width, self.height) {
                return Err(format!(
                    "object {i}: box {:?} is not inside the image",
                    <[f32; 4]>::from(o.bbox)
                ));
            }
            if o.attributes.is_empty() {
                return Err(format!("object {i}: no attributes"));
            }
            o.labels(tree).map_err(|e| format!("object {i}: {e}"))?;
        }
        Ok(())
    }
}

/// A generated scene with the renderer's per-object masks.
#[derive(Debug, Clone)]
pub struct Scene {
    pub record: SceneRecord,
    pub image: Image,
    /// Pixel coordinates covered by each object.
    pub masks: Vec<Vec<(u32, u32)>>,
}

fn pick<'a, T, R: Rng + ?Sized>(rng: &mut R, v: &'a [T]) -> &'a T {
    &v[rng.random_range(0..v.len())]
}

struct Drawn {
    object: SceneObject,
    style: ObjectStyle,
}

fn draw_object<R: Rng + ?Sized>(rng: &mut R, r: &RenderParams) -> Drawn {
    let family = *pick(rng, &r.families);
    let outline = *pick(rng, &r.outlines);
    let fill = *pick(rng, &r.fills);
    let color = pick(rng, &r.colors);
    let size = pick(rng, &r.sizes);
    let texture = *pick(rng, &r.textures);
    let orientation = family.is_oriented().then(|| pick(rng, &r.orientations));
    let j = r.color_jitter as i16;
    let rgb = color
        .rgb
        .map(|c| (c as i16 + if j > 0 { rng.random_range(-j..=j) } else { 0 }).clamp(0, 255) as u8);
    let scale = 1.0
        + if r.scale_jitter > 0.0 {
            rng.random_range(-r.scale_jitter..r.scale_jitter)
        } else {
            0.0
        };
    let b = format!("{}/{}", family.name(), outline.name());
    let mut attributes = vec![
        Attribute {
            property: PROP_COLOR.into(),
            value: color.name.clone(),
        },
        Attribute {
            property: PROP_SIZE.into(),
            value: size.name.clone(),
        },
        Attribute {
            property: PROP_TEXTURE.into(),
            value: texture.name().into(),
        },
    ];
    if let Some(o) = orientation {
        attributes.push(Attribute {
            property: PROP_ORIENTATION.into(),
            value: o.name.clone(),
        });
    }
    Drawn {
        object: SceneObject {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            category: [family.name().to_string(), b.clone(), format!("{b}/{}", fill.name())],
            attributes,
        },
        style: ObjectStyle {
            family,
            outline,
            fill,
            color: rgb,
            size: size.value * scale,
            texture,
            angle: orientation.map_or(0.0, |o| o.value),
        },
    }
}

fn image_name(index: u64) -> String {
    format!("images/{index:06}.ppm")
}

/// Renders scene `index`; a pure function of `(config, index)`.
pub fn generate_scene(config: &DatasetConfig, index: u64) -> Result<Scene> {
    config.validate()?;
    if index >= config.scenes {
        return Err(SceneError::Config(format!(
            "scene index {index} >= scene count {}",
            config.scenes
        )));
    }
    let r = &config.render;
    let look = render::Look {
        rim_width: r.rim_width,
        light_rim: [235, 235, 235],
        dark_rim: [8, 8, 8],
        period: r.pattern_period,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let (w, h) = (config.width as i32, config.height as i32);
    let m = r.box_margin as i32;
    let n = rng.random_range(config.objects[0]..=config.objects[1]) as usize;
    for _ in 0..SCENE_ATTEMPTS {
        let mut placed: Vec<(Drawn, render::Sprite, (i32, i32))> = Vec::new();
        for _ in 0..n {
            let drawn = draw_object(&mut rng, r);
            let (fx, fy) = (rng.random::<f32>(), rng.random::<f32>());
            let sprite = render::rasterize(&drawn.style, &look, fx, fy, &mut rng);
            // Anchor range keeping [min - m, max + 1 + m) inside the image.
            let (lo_x, hi_x) = (m - sprite.min.0, w - m - 1 - sprite.max.0);
            let (lo_y, hi_y) = (m - sprite.min.1, h - m - 1 - sprite.max.1);
            if lo_x > hi_x || lo_y > hi_y {
                break;
            }
            let rect = |s: &render::Sprite, (ax, ay): (i32, i32)| {
                (
                    ax + s.min.0 - m,
                    ay + s.min.1 - m,
                    ax + s.max.0 + 1 + m,
                    ay + s.max.1 + 1 + m,
                )
            };
            let spot = (0..PLACE_ATTEMPTS).find_map(|_| {
                let a = (rng.random_range(lo_x..=hi_x), rng.random_range(lo_y..=hi_y));
                let (x0, y0, x1, y1) = rect(&sprite, a);
                let free = placed.iter().all(|(_, s, b)| {
                    let (u0, v0, u1, v1) = rect(s, *b);
                    x1 <= u0 || u1 <= x0 || y1 <= v0 || v1 <= y0
                });
                free.then_some(a)
            });
            match spot {
                Some(a) => placed.push((drawn, sprite, a)),
                None => break,
            }
        }
        if placed.len() < n {
            continue;
        }
        let mut image = render::background(config.width, config.height, r.background, r.background_noise, &mut rng);
        let mut objects = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for (mut drawn, sprite, (ax, ay)) in placed {
            let mut mask = Vec::with_capacity(sprite.pixels.len());
            for &(dx, dy, rgb) in &sprite.pixels {
                let (x, y) = ((ax + dx) as u32, (ay + dy) as u32);
                image.set_pixel(x, y, rgb);
                mask.push((x, y));
            }
            drawn.object.bbox = BBox::from_corners(
                (ax + sprite.min.0 - m) as f32,
                (ay + sprite.min.1 - m) as f32,
                (ax + sprite.max.0 + 1 + m) as f32,
                (ay + sprite.max.1 + 1 + m) as f32,
            );
            objects.push(drawn.object);
            masks.push(mask);
        }
        return Ok(Scene {
            record: SceneRecord {
                image: image_name(index),
                width: config.width,
                height: config.height,
                objects,
            },
            image,
            masks,
        });
    }
    Err(SceneError::Unplaceable {
        index,
        objects: n,
        attempts: SCENE_ATTEMPTS,
    })
}

/// Paths written by [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub root: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub hierarchy: PathBuf,
    pub config: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            train: root.join("train.jsonl"),
            test: root.join("test.jsonl"),
            hierarchy: root.join("hierarchy.json"),
            config: root.join("dataset.json"),
        }
    }
}

fn write_manifest(path: &Path, records: &[SceneRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| SceneError::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("scene records serialize");
        writeln!(out, "{line}").map_err(|e| SceneError::io(path, e))?;
    }
    out.flush().map_err(|e| SceneError::io(path, e))
}

/// Renders every scene, writes images, both manifests, the hierarchy and
/// the config. Scenes `0..train_count` form the training split.
pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetPaths> {
    config.validate()?;
    let spec = config.hierarchy()?;
    spec.build()?;
    let paths = DatasetPaths::new(out_dir);
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| SceneError::io(&images, e))?;
    let records = (0..config.scenes)
        .into_par_iter()
        .map(|i| {
            let scene = generate_scene(config, i)?;
            scene.image.write_ppm(&out_dir.join(&scene.record.image))?;
            Ok(scene.record)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = config.train_count() as usize;
    write_manifest(&paths.train, &records[..k])?;
    write_manifest(&paths.test, &records[k..])?;
    let write = |p: &Path, text: String| std::fs::write(p, text).map_err(|e| SceneError::io(p, e));
    write(&paths.hierarchy, spec.to_json())?;
    write(
        &paths.config,
        serde_json::to_string_pretty(config).expect("config serializes"),
    )?;
    Ok(paths)
}

/// Parses and validates a JSON Lines manifest. Blank lines are skipped.
pub fn load_manifest(path: &Path, tree: &HierarchyTree) -> Result<Vec<SceneRecord>> {
    let file = std::fs::File::open(path).map_err(|e| SceneError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SceneError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| SceneError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.validate(tree).map_err(|reason| SceneError::Validation {
            path: path.to_path_buf(),
            line: i + 1,
            image: rec.image.clone(),
            reason,
        })?;
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hierarchy_has_expected_codebooks() {
        let tree = DatasetConfig::default().hierarchy().unwrap().build().unwrap();
        let v = tree.vocab();
        use crate::hiercodec::Level;
        let sizes: Vec<u32> = Level::ALL.iter().map(|&l| v.codebook_size(l)).collect();
        assert_eq!(sizes, vec![5, 15, 45, 4, 24]);
        // 27 non-oriented leaves x 20 pairs + 18 oriented leaves x 24 pairs.
        assert_eq!(tree.num_labels(), 27 * 20 + 18 * 24);
    }

    #[test]
    fn config_validation() {
        let mut c = DatasetConfig::default();
        c.train_fraction = 1.0;
        assert!(c.validate().is_err());
        let mut c = DatasetConfig::default();
        c.objects = [2, 1];
        assert!(c.validate().is_err());
        assert!(generate_scene(&DatasetConfig::default(), 6000).is_err());
    }
}
