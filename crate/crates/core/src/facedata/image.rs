use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// RGB image, channel-major (`[3, H, W]`), values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::invalid(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            data: data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c.clamp(-1.0, 1.0), height * width));
        }
        ImageTensor { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(-1.0, 1.0);
    }

    /// `x / 127.5 - 1` per channel.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::invalid("rgb buffer length does not match dimensions"));
        }
        let mut data = vec![0.0; rgb.len()];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * height * width + i] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        Ok(ImageTensor { height, width, data })
    }

    /// Interleaved 8-bit RGB, rounding `(v + 1) * 127.5`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = vec![0u8; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                out[3 * i + c] = to_u8(self.data[c * plane + i]);
            }
        }
        out
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        Self::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )?;
        Ok(out.into_inner())
    }

    /// Channel 0 as an 8-bit grayscale PNG.
    pub fn encode_gray_png(&self) -> Result<Vec<u8>> {
        let plane = self.height * self.width;
        let luma: Vec<u8> = self.data[..plane].iter().map(|&v| to_u8(v)).collect();
        let mut out = std::io::Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &luma,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )?;
        Ok(out.into_inner())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|_| Error::MissingImage(path.to_path_buf()))?;
        Self::decode_png(&bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    /// Single-channel map in `[0, 1]` as a gray image (0 is black).
    pub fn from_gray_unit(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::invalid("mask length does not match dimensions"));
        }
        let plane: Vec<f32> = values.iter().map(|v| v.clamp(0.0, 1.0) * 2.0 - 1.0).collect();
        let mut data = Vec::with_capacity(3 * plane.len());
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
        Ok(ImageTensor { height, width, data })
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
        .expect("image dimensions are consistent")
    }

    /// Sample `index` of a `[N, 3, H, W]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 || index >= s[0] {
            return Err(Error::invalid(format!("tensor {s:?} is not an image batch")));
        }
        let n = 3 * s[2] * s[3];
        let data = t.data()[index * n..(index + 1) * n]
            .iter()
            .map(|v| v.to_f32().unwrap_or(0.0))
            .collect();
        Self::new(s[2], s[3], data)
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64
    }
}

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Stacks images into `[N, 3, H, W]`.
pub fn batch_tensor<T: Real>(images: &[&ImageTensor]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::shape("batch_tensor", &[h, w], &[img.height, img.width]));
        }
        data.extend(img.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_round_trip_is_exact() {
        let rgb: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
        let img = ImageTensor::from_rgb8(4, 4, &rgb).unwrap();
        assert_eq!(img.to_rgb8(), rgb);
        let png = img.encode_png().unwrap();
        assert_eq!(ImageTensor::decode_png(&png).unwrap(), img);
    }

    #[test]
    fn normalization_endpoints() {
        let img = ImageTensor::from_rgb8(1, 1, &[0, 255, 128]).unwrap();
        assert_eq!(img.get(0, 0, 0), -1.0);
        assert_eq!(img.get(1, 0, 0), 1.0);
        assert!((img.get(2, 0, 0) - (128.0 / 127.5 - 1.0)).abs() < 1e-7);
    }
}
