//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `BSDG` |
//! | 4     | format version, `u32` = 1 |
//! | 4     | header length in bytes, `u32` |
//! | n     | UTF-8 JSON header `{configs, meta, params: [{name, shape}]}` |
//! | …     | raw `f64` arrays of every parameter, concatenated in header order |

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tensor;
use crate::error::CheckpointError;

pub const MAGIC: [u8; 4] = *b"BSDG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Configs and metadata travel as JSON; parameters as raw floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub configs: Value,
    pub meta: Value,
    pub params: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    configs: Value,
    meta: Value,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }
}

pub fn save_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let header = Header {
        configs: ck.configs.clone(),
        meta: ck.meta.clone(),
        params: ck
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let floats: usize = ck.params.iter().map(|p| p.tensor.len()).sum();
    let mut out = Vec::with_capacity(12 + header.len() + 8 * floats);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in &ck.params {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
    if bytes.len() < n {
        return Err(CheckpointError::Truncated {
            what,
            needed: n,
            available: bytes.len(),
        });
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8], what: &'static str) -> Result<u32, CheckpointError> {
    let b = take(bytes, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut rest = bytes;
    let magic: [u8; 4] = take(&mut rest, 4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(&mut rest, "format version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = read_u32(&mut rest, "header length")? as usize;
    let header_bytes = take(&mut rest, header_len, "header")?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut total = 0usize;
    for p in &header.params {
        if p.shape.is_empty() || p.shape.contains(&0) {
            return Err(CheckpointError::Inconsistent(format!(
                "parameter {} has invalid shape {:?}",
                p.name, p.shape
            )));
        }
        total = p
            .shape
            .iter()
            .try_fold(1usize, |n, &d| n.checked_mul(d))
            .and_then(|n| total.checked_add(n))
            .ok_or_else(|| CheckpointError::Inconsistent(format!("parameter {} is too large", p.name)))?;
    }
    let needed = total
        .checked_mul(8)
        .ok_or_else(|| CheckpointError::Inconsistent("parameter payload too large".into()))?;
    if rest.len() < needed {
        return Err(CheckpointError::Truncated {
            what: "parameter payload",
            needed,
            available: rest.len(),
        });
    }
    if rest.len() > needed {
        return Err(CheckpointError::Inconsistent(format!(
            "{} trailing bytes after parameter payload",
            rest.len() - needed
        )));
    }

    let mut params = Vec::with_capacity(header.params.len());
    for p in header.params {
        let n: usize = p.shape.iter().product();
        let raw = take(&mut rest, 8 * n, "parameter payload")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(p.shape, data)
            .map_err(|e| CheckpointError::Inconsistent(format!("parameter {}: {e}", p.name)))?;
        params.push(NamedTensor { name: p.name, tensor });
    }
    Ok(Checkpoint {
        configs: header.configs,
        meta: header.meta,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        Checkpoint {
            configs: json!({"d_x": 2}),
            meta: json!({"iterations": 0}),
            params: vec![
                NamedTensor {
                    name: "a".into(),
                    tensor: Tensor::matrix(2, 3, vec![1.0, -2.5, 3.25, 1e-300, -0.0, 7.0]).unwrap(),
                },
                NamedTensor {
                    name: "b".into(),
                    tensor: Tensor::vector(vec![0.1; 4]).unwrap(),
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = save_checkpoint(&ck);
        let back = load_checkpoint(&bytes).unwrap();
        assert_eq!(back.configs, ck.configs);
        for (a, b) in ck.params.iter().zip(&back.params) {
            assert_eq!(a.name, b.name);
            let ba: Vec<u64> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = save_checkpoint(&sample());
        bytes[0] = b'X';
        assert!(matches!(load_checkpoint(&bytes), Err(CheckpointError::BadMagic(_))));
        assert!(load_checkpoint(&bytes).unwrap_err().to_string().contains("bad magic"));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = save_checkpoint(&sample());
        bytes[4] = 2;
        assert_eq!(
            load_checkpoint(&bytes),
            Err(CheckpointError::VersionMismatch { found: 2, expected: 1 })
        );
    }

    #[test]
    fn truncated_payload() {
        let ck = Checkpoint {
            configs: json!({}),
            meta: json!({}),
            params: vec![NamedTensor {
                name: "w".into(),
                tensor: Tensor::vector(vec![1.0; 10]).unwrap(),
            }],
        };
        let bytes = save_checkpoint(&ck);
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(
            load_checkpoint(cut),
            Err(CheckpointError::Truncated { what: "parameter payload", needed: 80, available: 72 })
        ));
        assert!(matches!(load_checkpoint(&bytes[..6]), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn header_inconsistencies() {
        let mut bytes = save_checkpoint(&sample());
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(matches!(load_checkpoint(&bytes), Err(CheckpointError::Inconsistent(_))));

        let mut bytes = save_checkpoint(&sample());
        bytes[12] = b'#';
        assert!(matches!(load_checkpoint(&bytes), Err(CheckpointError::Header(_))));
    }
}
