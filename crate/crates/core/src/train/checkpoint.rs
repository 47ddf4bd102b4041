//! Binary checkpoint format.
//!
//! ```text
//! "S2S1" | u32 version | u32 count | count × tensor
//! tensor = u32 name_len | name (utf-8) | u8 rank | rank × u32 dim | f32 payload
//! ```
//!
//! All integers and floats little-endian. A file is decoded completely
//! before any tensor is handed out, so a bad file never half-loads.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{DiscriminatorNet, DiscriminatorSpec, GeneratorNet, Module, StateDict};
use crate::tensor::TensorData;

pub const MAGIC: &[u8; 4] = b"S2S1";
pub const VERSION: u32 = 1;

pub fn encode(state: &StateDict<f32>) -> Vec<u8> {
    let payload: usize = state.iter().map(|(n, t)| 9 + n.len() + 4 * (t.shape.len() + t.data.len())).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, t) in state {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<StateDict<f32>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = cur.u32("tensor count")? as usize;
    let mut state = Vec::new();
    for i in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not utf-8")))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| cur.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
            Error::Format(format!("tensor '{name}': shape {shape:?} overflows"))
        })?;
        let raw = cur.take(n.checked_mul(4).unwrap_or(usize::MAX), &format!("payload of '{name}'"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        state.push((name, TensorData { shape, data }));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} bytes after the declared payload",
            bytes.len() - cur.pos
        )));
    }
    Ok(state)
}

/// Write via a temporary sibling and rename, so readers never see a
/// partially written file.
pub fn save_state(state: &StateDict<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(state))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_state(path: impl AsRef<Path>) -> Result<StateDict<f32>> {
    decode(&fs::read(path)?)
}

pub fn save_generator(g: &GeneratorNet, path: impl AsRef<Path>) -> Result<()> {
    save_state(&g.state_dict(), path)
}

pub fn load_generator(path: impl AsRef<Path>) -> Result<GeneratorNet> {
    GeneratorNet::from_state_dict(&load_state(path)?)
}

/// All discriminators in one file, tensor names prefixed `d{i}.`.
pub fn save_discriminators(ds: &[DiscriminatorNet], path: impl AsRef<Path>) -> Result<()> {
    let mut state = Vec::new();
    for (i, d) in ds.iter().enumerate() {
        state.extend(d.state_dict().into_iter().map(|(n, t)| (format!("d{i}.{n}"), t)));
    }
    save_state(&state, path)
}

pub fn load_discriminators(
    specs: &[DiscriminatorSpec],
    path: impl AsRef<Path>,
) -> Result<Vec<DiscriminatorNet>> {
    let state = load_state(path)?;
    let nets = specs
        .iter()
        .enumerate()
        .map(|(i, s)| DiscriminatorNet::from_state_dict(*s, &state, &format!("d{i}.")))
        .collect::<Result<Vec<_>>>()?;
    let expected: usize = nets.iter().map(|d| d.state_dict().len()).sum();
    if expected != state.len() {
        return Err(Error::Format(format!(
            "discriminator file holds {} tensors, {} specs account for {expected}",
            state.len(),
            specs.len()
        )));
    }
    Ok(nets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_generator, GeneratorConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_state() -> StateDict<f32> {
        vec![
            ("a.weight".into(), TensorData { shape: vec![2, 3], data: vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0] }),
            ("b".into(), TensorData { shape: vec![1], data: vec![7.0] }),
        ]
    }

    #[test]
    fn layout_is_exact() {
        let bytes = encode(&sample_state());
        assert_eq!(&bytes[..4], b"S2S1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &8u32.to_le_bytes());
        assert_eq!(&bytes[16..24], b"a.weight");
        assert_eq!(bytes[24], 2);
        // header 12, tensor a: 4+8+1+8+24, tensor b: 4+1+1+4+4
        assert_eq!(bytes.len(), 12 + 45 + 14);
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let s = sample_state();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back.len(), 2);
        for ((na, a), (nb, b)) in s.iter().zip(&back) {
            assert_eq!(na, nb);
            assert_eq!(a.shape, b.shape);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let good = encode(&sample_state());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Format(m)) if m.contains("magic")));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode(&bad_version), Err(Error::Format(m)) if m.contains("version")));

        for cut in [3, 11, 20, good.len() - 1] {
            assert!(matches!(decode(&good[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format(_))));
    }

    #[test]
    fn generator_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = build_generator::<f32>(GeneratorConfig::new(32), &mut rng).unwrap();
        let path = dir.path().join("g.s2s1");
        save_generator(&g, &path).unwrap();
        let back = load_generator(&path).unwrap();
        assert_eq!(back.config(), g.config());
        assert_eq!(back.state_dict(), g.state_dict());

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        assert!(load_generator(&path).is_err());
    }
}
