//! RGB images with values in `[-1, 1]`, stored channels-first.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::resample::resample_chw;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Tensor,
}

impl Image {
    /// Wraps a `(3, H, W)` tensor.
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 || data.shape()[0] != 3 {
            return Err(Error::Shape(format!(
                "image must be (3, H, W), got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Tensor::full(&[3, height, width], value),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Bicubic resize; returns `self` unchanged when the size already matches.
    pub fn resized(&self, height: usize, width: usize) -> Image {
        if (self.height(), self.width()) == (height, width) {
            return self.clone();
        }
        Image {
            data: resample_chw(&self.data, height, width).map(|v| v.clamp(-1.0, 1.0)),
        }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        Self {
            data: Tensor::from_parts(vec![3, h, w], data),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        let d = self.data.data();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                let v = d[(c * h + y as usize) * w + x as usize];
                ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// SHA-256 over the shape and the exact f64 bit patterns.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.data.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.data.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_of_quantized_values() {
        let mut rgb = image::RgbImage::new(3, 2);
        for (i, px) in rgb.pixels_mut().enumerate() {
            *px = image::Rgb([i as u8 * 40, 255 - i as u8, 7]);
        }
        let img = Image::from_rgb8(&rgb);
        let bytes = img.encode_png().unwrap();
        let back = Image::decode_png(&bytes).unwrap();
        assert_eq!(back.to_rgb8(), rgb);
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_non_rgb_tensor() {
        assert!(Image::from_tensor(Tensor::zeros(&[1, 2, 2])).is_err());
    }
}
