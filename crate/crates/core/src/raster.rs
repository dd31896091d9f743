//! Multi-channel float images and PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{AuvError, Result};

/// Row-major `height x width x channels` raster of linear values.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

pub fn srgb_to_linear(c: f32) -> f32 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(c: f32) -> f32 {
    let c = c.clamp(0.0, 1.0);
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, &vec![0.0; channels])
    }

    pub fn filled(width: usize, height: usize, value: &[f32]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Self {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(AuvError::Data(format!(
                "raster {width}x{height}x{channels} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Bilinear lookup at continuous pixel coordinates (pixel centres sit at
    /// integer + 0.5). Coordinates outside the raster clamp to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f32]) {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = (fx - x0 as f64) as f32;
        let ty = (fy - y0 as f64) as f32;
        for c in 0..self.channels {
            let a = self.pixel(x0, y0)[c] * (1.0 - tx) + self.pixel(x1, y0)[c] * tx;
            let b = self.pixel(x0, y1)[c] * (1.0 - tx) + self.pixel(x1, y1)[c] * tx;
            out[c] = a * (1.0 - ty) + b * ty;
        }
    }

    /// Texture lookup with OBJ conventions: `v = 0` is the bottom row.
    pub fn sample_uv(&self, u: f64, v: f64, out: &mut [f32]) {
        self.sample_bilinear(u * self.width as f64, (1.0 - v) * self.height as f64, out);
    }

    pub fn mse(&self, other: &Raster) -> Result<f64> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(AuvError::Data("raster sizes differ".into()));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        Ok(s / self.data.len().max(1) as f64)
    }

    /// Loads an 8-bit PNG, decoding sRGB to linear RGB.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| AuvError::Data(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .flat_map(|p| p.0.map(|c| srgb_to_linear(c as f32 / 255.0)))
            .collect();
        Self::from_data(w as usize, h as usize, 3, data)
    }

    /// Encodes the first three channels as 8-bit sRGB.
    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            let q = |i: usize| {
                let v = p.get(i).copied().unwrap_or(p[0]);
                (linear_to_srgb(v) * 255.0).round() as u8
            };
            Rgb([q(0), q(1), q(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |file| {
            self.to_rgb8()
                .write_to(file, image::ImageFormat::Png)
                .map_err(|e| AuvError::Data(e.to_string()))
        })
    }

    /// Quantizes through the same 8-bit sRGB path as [`Raster::save_png`].
    pub fn quantized(&self) -> Self {
        let img = self.to_rgb8();
        let data = img
            .pixels()
            .flat_map(|p| p.0.map(|c| srgb_to_linear(c as f32 / 255.0)))
            .collect();
        Self::from_data(self.width, self.height, 3, data).expect("same size")
    }
}
