use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Result, SceneError};

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take((width * height * 3) as usize)
            .collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary P6 encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| SceneError::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| SceneError::io(path, e))
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| SceneError::Image(why.to_string());
        let mut r = BufReader::new(bytes);
        let mut fields = Vec::new();
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            if r.read_line(&mut line).map_err(|e| bad(&e.to_string()))? == 0 {
                return Err(bad("truncated header"));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_string));
        }
        if fields[0] != "P6" || fields.len() != 4 {
            return Err(bad("expected a binary P6 header on separate lines"));
        }
        let num = |s: &str| s.parse::<u32>().map_err(|_| bad("non-numeric header field"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit images are supported"));
        }
        let mut data = Vec::new();
        r.read_to_end(&mut data).map_err(|e| bad(&e.to_string()))?;
        if data.len() != (width * height * 3) as usize {
            return Err(bad("pixel payload size does not match header"));
        }
        Ok(Self { width, height, data })
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SceneError::io(path, e))?;
        Self::from_ppm(&bytes)
    }
}
