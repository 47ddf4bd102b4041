use std::path::Path;

use crate::error::{Error, Location, Result};
use crate::image::Image;

/// Scalar grid in [0, 1], stored z-major: value `(x, y, z)` lives at
/// `(z · ny + y) · nx + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    /// World position of sample (0, 0, 0).
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub values: Vec<f32>,
}

const SIDECAR_TAG: &str = "S2SVOL v1";

impl VolumeGrid {
    pub fn new(dims: [usize; 3], origin: [f64; 3], spacing: [f64; 3], values: Vec<f32>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(Error::dim(format!("volume {dims:?} needs {n} values, got {}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("volume value {v} outside [0, 1]")));
        }
        Ok(VolumeGrid {
            dims,
            origin,
            spacing,
            values,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    pub fn position(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        [
            self.origin[0] + x * self.spacing[0],
            self.origin[1] + y * self.spacing[1],
            self.origin[2] + z * self.spacing[2],
        ]
    }

    pub fn plane_count(&self) -> usize {
        self.dims[2]
    }

    /// Plane `k` along the slicing axis as an `nx × ny` image.
    pub fn plane(&self, k: usize) -> Result<Image> {
        if k >= self.dims[2] {
            return Err(Error::contract(format!(
                "plane {k} out of range, volume has {}",
                self.dims[2]
            )));
        }
        let n = self.dims[0] * self.dims[1];
        Image::from_vec(self.dims[0], self.dims[1], self.values[k * n..(k + 1) * n].to_vec())
    }

    /// Surround with `width` samples of 0 on every side, keeping world
    /// positions of existing samples fixed.
    pub fn padded(&self, width: usize) -> VolumeGrid {
        let [nx, ny, nz] = self.dims;
        let d = [nx + 2 * width, ny + 2 * width, nz + 2 * width];
        let mut values = vec![0.0; d[0] * d[1] * d[2]];
        for z in 0..nz {
            for y in 0..ny {
                let src = self.index(0, y, z);
                let dst = ((z + width) * d[1] + y + width) * d[0] + width;
                values[dst..dst + nx].copy_from_slice(&self.values[src..src + nx]);
            }
        }
        let w = width as f64;
        VolumeGrid {
            dims: d,
            origin: [
                self.origin[0] - w * self.spacing[0],
                self.origin[1] - w * self.spacing[1],
                self.origin[2] - w * self.spacing[2],
            ],
            spacing: self.spacing,
            values,
        }
    }

    pub fn count_above(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&v| f64::from(v) > threshold).count()
    }

    /// Sidecar encoding: one ASCII header line, then little-endian f32s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let [nx, ny, nz] = self.dims;
        let [ox, oy, oz] = self.origin;
        let [sx, sy, sz] = self.spacing;
        let mut out =
            format!("{SIDECAR_TAG} {nx} {ny} {nz} {ox:?} {oy:?} {oz:?} {sx:?} {sy:?} {sz:?}\n").into_bytes();
        out.reserve(4 * self.values.len());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(Location::Line(1), "missing volume header line"))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::parse(Location::Line(1), "header is not text"))?;
        let rest = header
            .strip_prefix(SIDECAR_TAG)
            .ok_or_else(|| Error::Format(format!("volume header must start with `{SIDECAR_TAG}`")))?;
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(Error::parse(Location::Line(1), format!("expected 9 header fields, got {}", fields.len())));
        }
        let bad = |f: &str| Error::parse(Location::Line(1), format!("bad header field {f:?}"));
        let mut dims = [0usize; 3];
        for (d, f) in dims.iter_mut().zip(&fields[..3]) {
            *d = f.parse().map_err(|_| bad(f))?;
        }
        let mut reals = [0f64; 6];
        for (r, f) in reals.iter_mut().zip(&fields[3..]) {
            *r = f.parse().map_err(|_| bad(f))?;
        }
        let payload = &bytes[nl + 1..];
        let n = dims[0] * dims[1] * dims[2];
        if payload.len() != 4 * n {
            return Err(Error::Format(format!(
                "volume payload is {} bytes, header declares {}",
                payload.len(),
                4 * n
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        VolumeGrid::new(dims, [reals[0], reals[1], reals[2]], [reals[3], reals[4], reals[5]], values)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Where slices sit in model space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceFrame {
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
}

/// Stack equally sized slices into a volume; slice `k` becomes plane `k`.
pub fn assemble_volume(slices: &[Image], frame: SliceFrame) -> Result<VolumeGrid> {
    let first = slices
        .first()
        .ok_or_else(|| Error::contract("cannot assemble a volume from zero slices"))?;
    let (w, h) = (first.width, first.height);
    let mut values = Vec::with_capacity(w * h * slices.len());
    for (k, s) in slices.iter().enumerate() {
        if s.width != w || s.height != h {
            return Err(Error::dim(format!(
                "slice {k} is {}x{}, expected {w}x{h}",
                s.width, s.height
            )));
        }
        values.extend_from_slice(&s.data);
    }
    VolumeGrid::new([w, h, slices.len()], frame.origin, frame.spacing, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame() -> SliceFrame {
        SliceFrame {
            origin: [0.0; 3],
            spacing: [1.0; 3],
        }
    }

    fn slices() -> Vec<Image> {
        (0..5)
            .map(|k| Image::from_fn(64, 64, |c, r| ((c + r + k) % 7) as f32 / 7.0))
            .collect()
    }

    #[test]
    fn assemble_and_retrieve() {
        let s = slices();
        let v = assemble_volume(&s, frame()).unwrap();
        assert_eq!(v.dims, [64, 64, 5]);
        let p = v.plane(3).unwrap();
        let bits = |i: &Image| i.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&s[3]));
        assert!(v.plane(5).is_err());
    }

    #[test]
    fn mixed_sizes_name_the_slice() {
        let mut s = slices();
        s[2] = Image::filled(32, 32, 0.0);
        let err = assemble_volume(&s, frame()).unwrap_err();
        assert!(matches!(&err, Error::Dimension(m) if m.contains("slice 2")), "{err}");
    }

    #[test]
    fn sidecar_roundtrip() {
        let v = VolumeGrid::new([2, 3, 2], [0.5, -1.0, 2.0], [0.1, 0.2, 0.3], (0..12).map(|i| i as f32 / 11.0).collect())
            .unwrap();
        let bytes = v.to_bytes();
        assert!(bytes.starts_with(b"S2SVOL v1 2 3 2 0.5 -1.0 2.0 0.1 0.2 0.3\n"));
        assert_eq!(VolumeGrid::from_bytes(&bytes).unwrap(), v);
        assert!(VolumeGrid::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn padding_keeps_world_positions() {
        let v = VolumeGrid::new([2, 2, 2], [1.0, 1.0, 1.0], [0.5; 3], vec![1.0; 8]).unwrap();
        let p = v.padded(1);
        assert_eq!(p.dims, [4, 4, 4]);
        assert_eq!(p.get(1, 1, 1), 1.0);
        assert_eq!(p.get(0, 1, 1), 0.0);
        assert_eq!(p.position(1.0, 1.0, 1.0), v.position(0.0, 0.0, 0.0));
    }
}
