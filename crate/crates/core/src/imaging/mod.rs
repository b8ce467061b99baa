//! Image decoding, resizing, histogram equalization, rescaling and
//! augmentation for RGB fundus images.

mod augment;
mod equalize;
mod resize;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use augment::{augment, AugmentDraw, AugmentSpec};
pub use equalize::{equalize_channel, hist_equalize};
pub use resize::resize;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image has a zero dimension ({width}x{height})")]
    ZeroDimension { width: usize, height: usize },
    #[error("pixel buffer of {actual} bytes does not match {width}x{height}x3")]
    BufferLength {
        width: usize,
        height: usize,
        actual: usize,
    },
    #[error("{path}: unsupported image format (PNG and JPEG only)")]
    UnsupportedFormat { path: String },
    #[error("{path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid preprocessing config: {0}")]
    Config(String),
}

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroDimension { width, height });
        }
        if pixels.len() != width * height * 3 {
            return Err(ImageError::BufferLength {
                width,
                height,
                actual: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn channel(&self, c: usize) -> Vec<u8> {
        self.pixels.iter().skip(c).step_by(3).copied().collect()
    }

    pub(crate) fn with_channels(width: usize, height: usize, channels: [Vec<u8>; 3]) -> Self {
        let mut pixels = vec![0u8; width * height * 3];
        for (c, plane) in channels.iter().enumerate() {
            for (p, v) in plane.iter().enumerate() {
                pixels[p * 3 + c] = *v;
            }
        }
        Self { width, height, pixels }
    }

    /// Decodes a PNG or JPEG file into RGB.
    pub fn open(path: &Path) -> Result<Self, ImageError> {
        let display = path.display().to_string();
        let reader = image::ImageReader::open(path)
            .map_err(|source| ImageError::Io {
                path: display.clone(),
                source,
            })?
            .with_guessed_format()
            .map_err(|source| ImageError::Io {
                path: display.clone(),
                source,
            })?;
        match reader.format() {
            Some(image::ImageFormat::Png) | Some(image::ImageFormat::Jpeg) => {}
            _ => return Err(ImageError::UnsupportedFormat { path: display }),
        }
        let decoded = reader.decode().map_err(|source| ImageError::Decode {
            path: display.clone(),
            source,
        })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Self::new(w, h, rgb.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| ImageError::Decode {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocConfig {
    pub target_size: usize,
    pub apply_he: bool,
    #[serde(default = "default_true")]
    pub rescale_01: bool,
}

fn default_true() -> bool {
    true
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            target_size: 64,
            apply_he: true,
            rescale_01: true,
        }
    }
}

impl PreprocConfig {
    pub fn validate(&self) -> Result<(), ImageError> {
        if self.target_size < 8 {
            return Err(ImageError::Config(format!(
                "target_size must be at least 8, got {}",
                self.target_size
            )));
        }
        Ok(())
    }

    /// Resize, then optionally equalize. Augmentation runs after this step.
    pub fn prepare(&self, img: &RawImage) -> RawImage {
        let resized = resize(img, self.target_size);
        if self.apply_he {
            hist_equalize(&resized)
        } else {
            resized
        }
    }

    pub fn to_tensor(&self, img: &RawImage) -> Tensor {
        if self.rescale_01 {
            rescale(img)
        } else {
            channel_major(img, 1.0)
        }
    }
}

fn channel_major(img: &RawImage, factor: f64) -> Tensor {
    let (w, h) = (img.width, img.height);
    let mut data = vec![0.0; 3 * w * h];
    for (p, px) in img.pixels.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + p] = px[c] as f64 * factor;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("non-empty image")
}

/// Channel-major tensor with every value divided by 255.
pub fn rescale(img: &RawImage) -> Tensor {
    let (w, h) = (img.width, img.height);
    let mut data = vec![0.0; 3 * w * h];
    for (p, px) in img.pixels.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + p] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("non-empty image")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_values() {
        let img = RawImage::new(3, 1, vec![255, 255, 255, 0, 0, 0, 51, 51, 51]).unwrap();
        let t = rescale(&img);
        assert_eq!(t.shape(), &[3, 1, 3]);
        for c in 0..3 {
            assert_eq!(t.data()[c * 3], 1.0);
            assert_eq!(t.data()[c * 3 + 1], 0.0);
            assert!((t.data()[c * 3 + 2] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn rescale_is_channel_major() {
        let img = RawImage::new(2, 1, vec![10, 20, 30, 40, 50, 60]).unwrap();
        let t = channel_major(&img, 1.0);
        assert_eq!(t.data(), &[10., 40., 20., 50., 30., 60.]);
    }

    #[test]
    fn buffer_checks() {
        assert!(matches!(RawImage::new(0, 2, vec![]), Err(ImageError::ZeroDimension { .. })));
        assert!(matches!(RawImage::new(2, 2, vec![0; 11]), Err(ImageError::BufferLength { .. })));
    }

    #[test]
    fn preproc_target_floor() {
        let cfg = PreprocConfig {
            target_size: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(PreprocConfig::default().validate().is_ok());
    }

    #[test]
    fn png_round_trip_and_format_check() {
        let dir = tempfile::tempdir().unwrap();
        let img = RawImage::from_fn(5, 4, |x, y| [(x * 40) as u8, (y * 60) as u8, 7]).unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        assert_eq!(RawImage::open(&path).unwrap(), img);

        let bogus = dir.path().join("b.bmp");
        std::fs::write(&bogus, b"BM not really a bitmap").unwrap();
        assert!(matches!(RawImage::open(&bogus), Err(ImageError::UnsupportedFormat { .. })));
        assert!(matches!(
            RawImage::open(&dir.path().join("missing.png")),
            Err(ImageError::Io { .. })
        ));
    }
}
