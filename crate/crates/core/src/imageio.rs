//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB bytes, row-major.
    pub pixels: Vec<u8>,
}

fn file_error(path: &Path, message: impl Into<String>) -> Error {
    Error::File {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn token(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Option<usize> {
        std::str::from_utf8(self.token()?).ok()?.parse().ok()
    }
}

fn decode(bytes: &[u8], magic: &[u8], channels: usize, path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut h = Header { bytes, pos: 0 };
    let found = h.token().unwrap_or_default();
    if found != magic {
        return Err(file_error(
            path,
            format!(
                "expected magic {}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(found)
            ),
        ));
    }
    let (width, height, maxval) = match (h.number(), h.number(), h.number()) {
        (Some(w), Some(hh), Some(m)) => (w, hh, m),
        _ => return Err(file_error(path, "malformed header")),
    };
    if width == 0 || height == 0 {
        return Err(file_error(path, "zero image extent"));
    }
    if maxval != 255 {
        return Err(file_error(path, format!("unsupported maxval {maxval} (only 255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = h.pos + 1;
    let len = width * height * channels;
    if bytes.len() < start + len {
        return Err(file_error(path, "truncated raster"));
    }
    Ok((width, height, bytes[start..start + len].to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| file_error(path, e.to_string()))?;
    let (width, height, pixels) = decode(&bytes, b"P6", 3, path)?;
    Ok(RgbImage { width, height, pixels })
}

/// Returns `(width, height, gray bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| file_error(path, e.to_string()))?;
    decode(&bytes, b"P5", 1, path)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    assert_eq!(img.pixels.len(), img.width * img.height * 3, "RGB buffer size");
    fs::write(path, encode_ppm(img)).map_err(|e| file_error(path, e.to_string()))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), width * height, "gray buffer size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    fs::write(path, out).map_err(|e| file_error(path, e.to_string()))
}
