//! In-memory images and masks with 8-bit file IO (PNG or binary PPM/PGM).

use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        RgbImage {
            width,
            height,
            data: vec![[0.0; 3]; width as usize * height as usize],
        }
    }

    pub fn get(&self, col: u32, row: u32) -> [f32; 3] {
        self.data[row as usize * self.width as usize + col as usize]
    }

    /// Rounds every channel onto the 8-bit grid used by image files.
    pub fn quantize(&mut self) {
        for px in &mut self.data {
            *px = px.map(|c| to_u8(c) as f32 / 255.0);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|p| p.map(to_u8)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let img = image::RgbImage::from_raw(self.width, self.height, self.to_bytes())
            .expect("buffer size matches dimensions");
        save_with_format(path, |fmt| img.save_with_format(path, fmt))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_rgb8();
        let (width, height) = img.dimensions();
        let data = img
            .pixels()
            .map(|Rgb(p)| p.map(|c| c as f32 / 255.0))
            .collect();
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }
}

fn to_u8(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_with_format(
    path: &Path,
    save: impl FnOnce(ImageFormat) -> image::ImageResult<()>,
) -> Result<()> {
    let fmt = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") | Some("pgm") | Some("pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    save(fmt).map_err(|e| Error::format(path, e.to_string()))
}

/// Row-major boolean mask; `true` marks object pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![true; width as usize * height as usize],
        }
    }

    pub fn get(&self, col: u32, row: u32) -> bool {
        self.data[row as usize * self.width as usize + col as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|m| **m).count()
    }

    /// Row-major indices of in-mask pixels.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.then_some(i))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.data.iter().map(|m| if *m { 255 } else { 0 }).collect();
        let img = GrayImage::from_raw(self.width, self.height, bytes)
            .expect("buffer size matches dimensions");
        save_with_format(path, |fmt| img.save_with_format(path, fmt))
    }

    /// Loads a single-channel image; nonzero pixels are in the mask.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_luma8();
        let (width, height) = img.dimensions();
        let data = img.pixels().map(|Luma([v])| *v != 0).collect();
        Ok(Mask {
            width,
            height,
            data,
        })
    }
}
