//! Dense floating point images, row-major with interleaved channels.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values for {width}x{height}x{channels} image",
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

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Loads an 8-bit PNG or portable pixmap as linear RGB in `[0, 1]`.
    pub fn load_rgb(path: &Path) -> Result<Self> {
        let img = ::image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Image::from_vec(w as usize, h as usize, 3, data)
    }

    /// Writes an 8-bit PNG; values are clamped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => ::image::GrayImage::from_raw(w, h, self.data.iter().map(|&v| quant(v)).collect())
                .expect("buffer size")
                .save(path),
            3 => ::image::RgbImage::from_raw(w, h, self.data.iter().map(|&v| quant(v)).collect())
                .expect("buffer size")
                .save(path),
            c => {
                return Err(Error::Shape(format!("cannot write {c}-channel image as PNG")));
            }
        };
        res.map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Raw dump: ASCII header line `H W C` followed by little-endian f32 values.
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut buf = format!("{} {} {}\n", self.height, self.width, self.channels).into_bytes();
        buf.reserve(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("raw dump without header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Format("raw dump header is not ASCII".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format(format!("bad raw header `{header}`"))))
            .collect::<Result<_>>()?;
        let [h, w, c] = dims[..] else {
            return Err(Error::Format(format!("bad raw header `{header}`")));
        };
        let body = &bytes[nl + 1..];
        if body.len() != h * w * c * 4 {
            return Err(Error::Format(format!(
                "raw dump body has {} bytes, expected {}",
                body.len(),
                h * w * c * 4
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]) as f64)
            .collect();
        Image::from_vec(w, h, c, data)
    }
}
