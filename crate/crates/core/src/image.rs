//! Single-channel images and 8-bit PGM (P5) I/O.

use std::path::Path;

use crate::error::{Error, Location, Result};

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T = f32> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: T) {
        self.data[row * self.width + col] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_size<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl Image<f32> {
    /// Encode as binary PGM, maxval 255. Values are clamped to [0, 1].
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        if magic != b"P5" {
            return Err(Error::parse(Location::Offset(0), "not a binary PGM (P5)"));
        }
        let width = parse_uint(bytes, &mut pos)?;
        let height = parse_uint(bytes, &mut pos)?;
        let maxval = parse_uint(bytes, &mut pos)?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::parse(
                Location::Offset(pos),
                format!("unsupported maxval {maxval}"),
            ));
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let n = width * height;
        let raster = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::parse(Location::Offset(pos), "truncated raster"))?;
        let scale = maxval as f32;
        Ok(Image {
            width,
            height,
            data: raster.iter().map(|&b| f32::from(b) / scale).collect(),
        })
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pgm(&std::fs::read(path)?)
    }
}

/// The 8-bit level a [0, 1] value is stored at.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snap a [0, 1] value onto the 8-bit grid so PGM round-trips are exact.
pub fn snap_to_u8_grid(v: f32) -> f32 {
    f32::from(quantize(v)) / 255.0
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::parse(Location::Offset(start), "unexpected end of PGM header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_uint(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let start = *pos;
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(Location::Offset(start), "expected an unsigned integer"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_on_grid() {
        let img = Image::from_fn(5, 3, |c, r| snap_to_u8_grid((c * 3 + r) as f32 / 14.0));
        let back = Image::from_pgm(&img.to_pgm()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = Image::from_pgm(&bytes).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
    }

    #[test]
    fn pgm_errors() {
        assert!(Image::from_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(Image::from_pgm(b"P5\n4 4\n255\n\x00\x01").is_err());
        assert!(Image::from_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
