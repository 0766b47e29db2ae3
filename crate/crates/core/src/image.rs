//! 8-bit RGB raster, PNG codec and color-space helpers.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 8-bit RGB image. `data[(y * width + x) * 3 ..][..3]` is the
/// pixel at column `x`, row `y`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be at least 1x1"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "pixel buffer holds {} bytes, expected {} for {}x{} RGB",
                data.len(),
                width * height * 3,
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Solid-color image.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luma grayscale in `[0, 255]` (Rec. 601 weights), one value per pixel.
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::new(w, h, img.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length checked at construction");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// sRGB byte triple to CIELAB (D65 white point).
pub fn rgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    fn inv_gamma(c: f64) -> f64 {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    let r = inv_gamma(rgb[0] as f64 / 255.0);
    let g = inv_gamma(rgb[1] as f64 / 255.0);
    let b = inv_gamma(rgb[2] as f64 / 255.0);

    // sRGB -> XYZ, normalized by the D65 reference white.
    let x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;

    fn f(t: f64) -> f64 {
        const DELTA3: f64 = 216.0 / 24389.0;
        if t > DELTA3 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    }
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_validates_buffer_length() {
        assert!(RgbImage::new(2, 2, vec![0; 12]).is_ok());
        assert!(RgbImage::new(2, 2, vec![0; 11]).is_err());
        assert!(RgbImage::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn pixel_accessors_round_trip() {
        let mut img = RgbImage::filled(3, 2, [10, 20, 30]).unwrap();
        img.set(2, 1, [1, 2, 3]);
        assert_eq!(img.get(2, 1), [1, 2, 3]);
        assert_eq!(img.get(0, 0), [10, 20, 30]);
    }

    #[test]
    fn lab_white_and_black() {
        let white = rgb_to_lab([255, 255, 255]);
        assert!((white[0] - 100.0).abs() < 1e-3);
        assert!(white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
        let black = rgb_to_lab([0, 0, 0]);
        assert!(black[0].abs() < 1e-6);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = RgbImage::filled(5, 4, [200, 100, 50]).unwrap();
        img.set(3, 2, [1, 2, 3]);
        img.save_png(&path).unwrap();
        let back = RgbImage::load_png(&path).unwrap();
        assert_eq!(img, back);
    }
}
