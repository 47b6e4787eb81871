//! Float RGB images with binary PPM (8-bit, viewing) and PFM (32-bit float,
//! metrics) readers/writers.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad image format: {0}")]
    Format(String),
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
}

/// Row-major RGB image, pixel values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f32; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        Image {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        self.pixels[y * self.width + x] = c;
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        assert_eq!(self.pixels.len(), other.pixels.len());
        self.pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
            .fold(0.0, f32::max)
    }

    /// Binary PPM, 8-bit per channel, values clamped to [0,1].
    pub fn write_ppm(&self, path: &Path) -> Result<(), ImageError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.pixels.len() * 3);
        for p in &self.pixels {
            for c in p {
                buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// PFM, 32-bit float little-endian. Rows are written bottom-to-top,
    /// following the format convention.
    pub fn write_pfm(&self, path: &Path) -> Result<(), ImageError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write!(w, "PF\n{} {}\n-1.0\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.pixels.len() * 12);
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for c in self.get(x, y) {
                    buf.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_pfm(path: &Path) -> Result<Image, ImageError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let magic = read_token(&mut r)?;
        if magic != "PF" {
            return Err(ImageError::Format(format!("expected PF, got {magic}")));
        }
        let width: usize = read_token(&mut r)?
            .parse()
            .map_err(|_| ImageError::Format("bad width".into()))?;
        let height: usize = read_token(&mut r)?
            .parse()
            .map_err(|_| ImageError::Format("bad height".into()))?;
        let scale: f32 = read_token(&mut r)?
            .parse()
            .map_err(|_| ImageError::Format("bad scale".into()))?;
        let little_endian = scale < 0.0;
        let mut data = vec![0u8; width * height * 12];
        r.read_exact(&mut data)?;
        let mut img = Image::new(width, height);
        let mut off = 0;
        for y in (0..height).rev() {
            for x in 0..width {
                let mut px = [0.0f32; 3];
                for c in &mut px {
                    let bytes: [u8; 4] = data[off..off + 4].try_into().unwrap();
                    *c = if little_endian {
                        f32::from_le_bytes(bytes)
                    } else {
                        f32::from_be_bytes(bytes)
                    };
                    off += 4;
                }
                img.set(x, y, px);
            }
        }
        Ok(img)
    }
}

/// Reads one whitespace-delimited token (PFM headers allow any whitespace).
fn read_token<R: BufRead>(r: &mut R) -> Result<String, ImageError> {
    let mut tok = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        match r.read_exact(&mut byte) {
            Ok(()) => {
                if byte[0].is_ascii_whitespace() {
                    if !tok.is_empty() {
                        break;
                    }
                } else {
                    tok.push(byte[0]);
                }
            }
            Err(e) => {
                if tok.is_empty() {
                    return Err(ImageError::Io(e));
                }
                break;
            }
        }
    }
    String::from_utf8(tok).map_err(|_| ImageError::Format("non-utf8 header".into()))
}
