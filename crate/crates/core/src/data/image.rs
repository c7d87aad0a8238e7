use std::path::Path;

use candle::{Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Spatial size of every image in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

impl ImageSize {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for ImageSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// Checks that `size` can be produced by `blocks` doubling stages.
pub fn check_generator_divisibility(size: ImageSize, blocks: usize) -> Result<()> {
    let factor = 1usize
        .checked_shl(blocks as u32)
        .filter(|f| *f > 0)
        .ok_or_else(|| Error::config(format!("{blocks} generator blocks is too deep")))?;
    if size.height % factor != 0 || size.width % factor != 0 || size.height < factor {
        return Err(Error::config(format!(
            "image size {size} is not divisible by 2^{blocks} = {factor}; \
             pick height and width that are multiples of {factor} or change the generator depth"
        )));
    }
    Ok(())
}

/// Per-channel standardization applied after scaling bytes to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("normalization std must be positive and finite"));
        }
        Ok(())
    }
}

/// `[3, H, W]` f32 tensor from an RGB image.
pub fn normalize(img: &RgbImage, norm: &Normalization) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = px.0[c] as f32 / 255.0;
            data[c * h * w + y as usize * w + x as usize] = (v - norm.mean[c]) / norm.std[c];
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// Inverse of [`normalize`], rounding to the nearest byte and clamping.
pub fn denormalize(pixels: &Tensor, norm: &Normalization) -> Result<RgbImage> {
    let (c, h, w) = pixels.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let data = pixels
        .to_dtype(candle::DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = data[ch * h * w + y as usize * w + x as usize];
            let byte = ((v * norm.std[ch] + norm.mean[ch]) * 255.0).round();
            px.0[ch] = byte.clamp(0.0, 255.0) as u8;
        }
    }
    Ok(img)
}

/// Decodes, bilinearly resizes to `size` and normalizes one image file.
pub fn load_image(path: &Path, size: ImageSize, norm: &Normalization) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.dimensions() == (size.width as u32, size.height as u32) {
        img
    } else {
        image::imageops::resize(&img, size.width as u32, size.height as u32, FilterType::Triangle)
    };
    normalize(&img, norm)
}
