//! Float images, binary masks and PNG codecs.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("png codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("expected {expected} channels, image has {found}")]
    Channels { expected: usize, found: usize },
}

/// Row-major interleaved float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        assert!(self.same_shape(other), "image shape mismatch");
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sub(&self, other: &Image) -> Image {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scaled(&self, k: f64) -> Image {
        self.map(|v| v * k)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn to_u8(v: f64) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    pub fn to_rgb8(&self) -> Result<RgbImage, ImageError> {
        if self.channels != 3 {
            return Err(ImageError::Channels {
                expected: 3,
                found: self.channels,
            });
        }
        let raw = self.data.iter().map(|&v| Self::to_u8(v)).collect();
        Ok(RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size"))
    }

    pub fn to_gray8(&self) -> Result<GrayImage, ImageError> {
        if self.channels != 1 {
            return Err(ImageError::Channels {
                expected: 1,
                found: self.channels,
            });
        }
        let raw = self.data.iter().map(|&v| Self::to_u8(v)).collect();
        Ok(GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size"))
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            channels: 3,
            data: img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    /// PNG bytes: RGB8 for 3-channel images, gray8 for 1-channel images.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Cursor::new(Vec::new());
        match self.channels {
            3 => self.to_rgb8()?.write_to(&mut out, ImageFormat::Png)?,
            1 => self.to_gray8()?.write_to(&mut out, ImageFormat::Png)?,
            c => {
                return Err(ImageError::Channels {
                    expected: 3,
                    found: c,
                })
            }
        }
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        std::fs::write(path, self.encode_png()?).map_err(|e| ImageError::Codec(e.into()))
    }
}

/// Binary H×W mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_threshold(img: &Image, threshold: f64) -> Mask {
        assert_eq!(img.channels, 1);
        Mask {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| v >= threshold).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count();
        let union = self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a || **b)
            .count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Gray8 PNG with values 0 or 255.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        self.to_image().encode_png()
    }
}

/// Decodes PNG bytes into a gray8 buffer, returning `(width, height, pixels)`.
/// Fails if the PNG is not single-channel 8-bit.
pub fn decode_gray8(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), ImageError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            Ok((g.width() as usize, g.height() as usize, g.into_raw()))
        }
        other => Err(ImageError::Channels {
            expected: 1,
            found: other.color().channel_count() as usize,
        }),
    }
}

/// Decodes an RGB8 PNG.
pub fn decode_rgb8(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    match img {
        image::DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        other => Err(ImageError::Channels {
            expected: 3,
            found: other.color().channel_count() as usize,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_rgb_and_gray() {
        let mut img = Image::zeros(3, 2, 3);
        img.pixel_mut(1, 1).copy_from_slice(&[1.0, 0.5, 0.0]);
        let back = Image::from_rgb8(&decode_rgb8(&img.encode_png().unwrap()).unwrap());
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);

        let mut m = Mask::new(4, 3, false);
        m.data[5] = true;
        let (w, h, px) = decode_gray8(&m.encode_png().unwrap()).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(px[5], 255);
        assert_eq!(px.iter().filter(|&&v| v == 0).count(), 11);
    }

    #[test]
    fn gray_decoder_rejects_rgb() {
        let png = Image::zeros(2, 2, 3).encode_png().unwrap();
        assert!(matches!(
            decode_gray8(&png),
            Err(ImageError::Channels { expected: 1, found: 3 })
        ));
    }

    #[test]
    fn iou_of_disjoint_masks_is_zero() {
        let mut a = Mask::new(2, 1, false);
        let mut b = Mask::new(2, 1, false);
        a.data[0] = true;
        b.data[1] = true;
        assert_eq!(a.iou(&b), 0.0);
        assert_eq!(a.iou(&a), 1.0);
    }
}
