//! The RGB image type shared by every stage of the pipeline.

use std::path::Path;

use mdfr_autograd::{Scalar, Tensor};

use crate::error::{invalid, shape_err, Result};

/// An RGB image with values in `[0, 1]`, stored channel-planar (`3 × H × W`).
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl FaceImage {
    pub const CHANNELS: usize = 3;

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, pixels: vec![value.clamp(0.0, 1.0); 3 * height * width] }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0)
    }

    /// Builds an image from planar data, rejecting values outside `[0, 1]`.
    pub fn from_planar(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != 3 * height * width {
            return Err(shape_err(format!("{} values for a {height}x{width} RGB image", pixels.len())));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    /// Builds an image from planar data, clipping into `[0, 1]` (NaN becomes 0).
    pub fn from_planar_clipped(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != 3 * height * width {
            return Err(shape_err(format!("{} values for a {height}x{width} RGB image", pixels.len())));
        }
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { height, width, pixels })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    pixels.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    /// Per-pixel mean over channels, `H × W`.
    pub fn luma_mean(&self) -> Vec<f64> {
        let n = self.height * self.width;
        (0..n).map(|i| (0..3).map(|c| self.pixels[c * n + i] as f64).sum::<f64>() / 3.0).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn check_shape(&self, height: usize, width: usize) -> Result<()> {
        if self.dims() != (height, width) {
            return Err(shape_err(format!(
                "expected a {height}x{width} image, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Snaps every value to the nearest multiple of 1/255, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        self.map(|v| (v * 255.0).round() / 255.0)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = self.dims();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.get(y as usize, x as usize, c) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(h, w, |y, x, c| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// `[3, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(&[3, self.height, self.width], self.pixels.iter().map(|&v| T::from_f64(v as f64)).collect())
    }

    /// `[N, 3, H, W]` batch of equally sized images.
    pub fn batch<T: Scalar>(images: &[&FaceImage]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| invalid("empty image batch"))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            img.check_shape(h, w)?;
            data.extend(img.pixels.iter().map(|&v| T::from_f64(v as f64)));
        }
        Ok(Tensor::new(&[images.len(), 3, h, w], data))
    }

    /// Splits an `[N, 3, H, W]` tensor into clipped images.
    pub fn unbatch<T: Scalar>(t: &Tensor<T>) -> Result<Vec<FaceImage>> {
        let (n, c, h, w) = t.dims4();
        if c != 3 {
            return Err(shape_err(format!("image tensor has {c} channels")));
        }
        let per = 3 * h * w;
        (0..n)
            .map(|i| {
                let px = t.data()[i * per..(i + 1) * per].iter().map(|v| v.as_f64() as f32).collect();
                Self::from_planar_clipped(h, w, px)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = FaceImage::from_fn(5, 7, |y, x, c| ((y * 7 + x) * 3 + c) as f32 / 120.0).quantized();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        assert_eq!(FaceImage::load_png(&path).unwrap(), img);
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(FaceImage::from_planar(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(FaceImage::from_planar(1, 2, vec![0.0; 3]).is_err());
        let c = FaceImage::from_planar_clipped(1, 1, vec![-1.0, f32::NAN, 2.0]).unwrap();
        assert_eq!(c.pixels(), &[0.0, 0.0, 1.0]);
    }
}
