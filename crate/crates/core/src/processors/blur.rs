//! Box blur on 8-bit grayscale images.

use serde::{Deserialize, Serialize};

use super::ItemError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ItemError> {
        if width == 0 || height == 0 {
            return Err(ItemError::new("image dimensions must be positive"));
        }
        if width.checked_mul(height) != Some(pixels.len()) {
            return Err(ItemError::new(format!(
                "expected {}x{} = {} pixels, got {}",
                width,
                height,
                width.saturating_mul(height),
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Mean over the `(2r+1)^2` neighbourhood with clamp-to-edge sampling,
/// rounded half up.
///
/// The sum is separable: rows are summed horizontally first, then those sums
/// are summed vertically, both with clamped indices.
pub fn box_blur(img: &GrayImage, radius: usize) -> GrayImage {
    if radius == 0 {
        return img.clone();
    }
    let (w, h) = (img.width, img.height);
    let r = radius as isize;
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;

    let mut rows = vec![0u64; w * h];
    for y in 0..h {
        let line = &img.pixels[y * w..(y + 1) * w];
        for x in 0..w {
            rows[y * w + x] = (-r..=r).map(|dx| u64::from(line[clamp(x as isize + dx, w)])).sum();
        }
    }

    let count = ((2 * radius + 1) * (2 * radius + 1)) as u64;
    let mut pixels = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let sum: u64 = (-r..=r).map(|dy| rows[clamp(y as isize + dy, h) * w + x]).sum();
            pixels[y * w + x] = ((2 * sum + count) / (2 * count)) as u8;
        }
    }
    GrayImage {
        width: w,
        height: h,
        pixels,
    }
}
