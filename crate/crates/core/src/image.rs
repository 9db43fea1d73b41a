//! RGB float images and lossless PNG persistence.

use std::path::Path;

use image::{imageops, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Interleaved (HWC) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels: 3,
            data: vec![value; height * width * 3],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values do not fit a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// Quantizes to 8-bit RGB.
    pub fn to_rgb8(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut px = [0u8; 3];
                for (c, p) in px.iter_mut().enumerate() {
                    let v = self.get(y, x, c.min(self.channels - 1));
                    *p = quantize(v);
                }
                out.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        out
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            channels: 3,
            data,
        }
    }

    /// Round-trips the values through 8-bit storage, as a PNG save/load would.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        out.data
            .iter_mut()
            .for_each(|v| *v = quantize(*v) as f32 / 255.0);
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Bilinear resize.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer matches dimensions");
        let out = imageops::resize(
            &buf,
            width as u32,
            height as u32,
            imageops::FilterType::Triangle,
        );
        Self {
            height,
            width,
            channels: 3,
            data: out.into_raw(),
        }
    }

    /// Crops the window with top-left `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Self {
        let mut out = Self::new(height, width, self.channels);
        for yy in 0..height {
            let src = self.index(y + yy, x, 0);
            let dst = out.index(yy, 0, 0);
            out.data[dst..dst + width * self.channels]
                .copy_from_slice(&self.data[src..src + width * self.channels]);
        }
        out
    }

    /// Crops the centered `height x width` window.
    pub fn center_crop(&self, height: usize, width: usize) -> Self {
        let y = (self.height - height) / 2;
        let x = (self.width - width) / 2;
        self.crop(y, x, height, width)
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
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(5, 7, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f32 / 255.0;
        }
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn crop_flip_resize_shapes() {
        let img = Image::filled(10, 12, 0.5);
        assert_eq!(img.crop(1, 2, 4, 5).data.len(), 4 * 5 * 3);
        assert_eq!(img.center_crop(8, 8).height, 8);
        assert_eq!(img.flip_horizontal(), img);
        let r = img.resize(6, 6);
        assert!(r.data.iter().all(|v| (v - 0.5).abs() < 1e-6));
    }
}
