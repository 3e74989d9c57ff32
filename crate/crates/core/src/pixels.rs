//! Interleaved `H × W × C` floating-point images.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Image<F> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<F>,
}

impl<F: Scalar> Image<F> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![F::zero(); height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> F {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: F) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    /// Converts 8-bit RGB to `[0, 1]`.
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| F::of(f64::from(b) / 255.0)).collect();
        Self { height: h as usize, width: w as usize, channels: 3, data }
    }

    /// Quantizes `[0, 1]` values to 8-bit RGB, clamping outside the range.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::Shape(format!("rgb export needs 3 channels, got {}", self.channels)));
        }
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [0, 1, 2].map(|c| quantize(self.get(y, x, c)));
                out.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        Ok(out)
    }

    /// Format is sniffed from the content, not the extension.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// Decodes an encoded image (PNG or JPEG) held in memory.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// Sub-image with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y}, {x}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut out = Self::zeros(h, w, self.channels);
        let c = self.channels;
        for r in 0..h {
            let src = ((y + r) * self.width + x) * c;
            out.data[r * w * c..(r + 1) * w * c].copy_from_slice(&self.data[src..src + w * c]);
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, h: usize, w: usize) -> Self {
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        let mut out = Self::zeros(h, w, self.channels);
        let sy = self.height as f64 / h as f64;
        let sx = self.width as f64 / w as f64;
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                for c in 0..self.channels {
                    let top = self.get(y0, x0, c).to_f64_lossy() * (1.0 - tx) + self.get(y0, x1, c).to_f64_lossy() * tx;
                    let bot = self.get(y1, x0, c).to_f64_lossy() * (1.0 - tx) + self.get(y1, x1, c).to_f64_lossy() * tx;
                    out.set(y, x, c, F::of(top * (1.0 - ty) + bot * ty));
                }
            }
        }
        out
    }

    pub fn cast<G: Scalar>(&self) -> Image<G> {
        Image { height: self.height, width: self.width, channels: self.channels, data: self.data.iter().map(|v| G::of(v.to_f64_lossy())).collect() }
    }

    /// Writes a PNG (lossless for 8-bit content).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.to_rgb8()?
            .write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)?;
        crate::util::write_atomic(path, &buf)
    }
}

fn quantize<F: Scalar>(v: F) -> u8 {
    (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8
}
