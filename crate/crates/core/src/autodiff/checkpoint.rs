//! Parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   b"DMRP"
//! offset 4   u32 format version (1)
//! offset 8   u32 manifest length M in bytes
//! offset 12  M bytes of JSON: {"arrays":[{"name":..,"shape":[..],"offset":..}, ..]}
//! 12 + M     payload: every array as float32 LE, row-major, in manifest order
//! ```
//!
//! `offset` is the byte offset of an array inside the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::Params;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DMRP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    arrays: Vec<ArrayEntry>,
}

pub fn encode_params(params: &Params) -> Vec<u8> {
    let mut arrays = Vec::with_capacity(params.len());
    let mut payload = Vec::new();
    for (name, value) in params.iter() {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest { arrays }).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, Array)>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a parameter file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != VERSION {
        return Err(bad(format!("unsupported version {}", word(4))));
    }
    let mlen = word(8) as usize;
    let start = 12 + mlen;
    if bytes.len() < start {
        return Err(Error::Truncated {
            expected: start,
            actual: bytes.len(),
        });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..start])?;
    let payload = &bytes[start..];
    let mut out = Vec::with_capacity(manifest.arrays.len());
    for e in manifest.arrays {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > payload.len() {
            return Err(Error::Truncated {
                expected: start + end,
                actual: bytes.len(),
            });
        }
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((e.name, Array::new(&e.shape, data)?));
    }
    Ok(out)
}

pub fn save_params(params: &Params, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn load_arrays(path: impl AsRef<Path>) -> Result<Vec<(String, Array)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}

impl Params {
    /// Overwrites every parameter from `arrays`, which must carry exactly the
    /// same names and shapes. Optimizer state is reset.
    pub fn assign(&mut self, arrays: &[(String, Array)]) -> Result<()> {
        if arrays.len() != self.len() {
            return Err(bad(format!(
                "file has {} arrays, model has {}",
                arrays.len(),
                self.len()
            )));
        }
        for (name, value) in arrays {
            let id = self
                .id(name)
                .ok_or_else(|| bad(format!("unknown parameter {name:?}")))?;
            if self.value(id).shape() != value.shape() {
                return Err(bad(format!(
                    "parameter {name:?}: shape {:?} in file, {:?} in model",
                    value.shape(),
                    self.value(id).shape()
                )));
            }
        }
        for (name, value) in arrays {
            let id = self.id(name).expect("checked");
            *self.value_mut(id) = value.clone();
        }
        self.clear_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::new();
        p.add_truncated_normal("conv.w", &[4, 2, 3, 3], 0.02, &mut rng).unwrap();
        p.add("conv.b", Array::new(&[4], vec![0.5, -1.0, 3.25, 0.0]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn layout_is_documented() {
        let bytes = encode_params(&store());
        assert_eq!(&bytes[..4], b"DMRP");
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[12..12 + mlen]).unwrap();
        assert_eq!(manifest["arrays"][1]["offset"], 4 * 72);
        assert_eq!(bytes.len(), 12 + mlen + 4 * (72 + 4));
        let b0 = &bytes[12 + mlen + 4 * 72..][..4];
        assert_eq!(f32::from_le_bytes(b0.try_into().unwrap()), 0.5);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let p = store();
        save_params(&p, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let mut q = store();
        q.value_mut(q.id("conv.b").unwrap()).data_mut()[0] = 9.0;
        q.assign(&load_arrays(&path).unwrap()).unwrap();
        assert_eq!(encode_params(&q), first);
    }

    #[test]
    fn mismatches_rejected() {
        let arrays = decode_params(&encode_params(&store())).unwrap();
        let mut other = Params::new();
        other.add("conv.w", Array::zeros(&[4, 2, 3, 3])).unwrap();
        other.add("conv.b", Array::zeros(&[5])).unwrap();
        assert!(matches!(other.assign(&arrays), Err(Error::Checkpoint(_))));
        let bytes = encode_params(&store());
        assert!(matches!(
            decode_params(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(decode_params(b"nope").is_err());
    }
}
