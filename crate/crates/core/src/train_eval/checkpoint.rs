//! `TEDBCKPT` parameter snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 0..8    magic "TEDBCKPT"
//! u32     version
//! u32     record_count
//! repeated record_count times:
//!   u32   name_len, name bytes (UTF-8)
//!   u32   ndim, u32 × ndim dims
//!   f32 × product(dims)
//! u32     meta_len, meta bytes (JSON: model spec, train config, epoch, history)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::train::{EpochRecord, ModelSpec, TrainConfig};

pub const MAGIC: &[u8; 8] = b"TEDBCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// 1-based epoch after which the snapshot was taken; 0 before training.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// `auto(ε)` or `fixed(max_epochs)`.
    pub stopping: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor<f32>)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.params.len());
        for (name, t) in &self.params {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            put_f32s(&mut out, t.data());
        }
        put_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Reader::new(bytes);
        if cur.take(8, "header")? != MAGIC {
            return Err(Error::format(0, "bad magic"));
        }
        let version = cur.u32("header")?;
        if version != VERSION {
            return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
        }
        let count = cur.u32("header")? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 12));
        for _ in 0..count {
            let at = cur.pos() as u64;
            let name_len = cur.u32("record name")? as usize;
            let name = std::str::from_utf8(cur.take(name_len, "record name")?)
                .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?
                .to_string();
            let ndim = cur.u32("record shape")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(cur.u32("record shape")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(at, format!("`{name}` size overflows")))?;
            let data = cur.f32s(numel, "record payload")?;
            params.push((name, Tensor::new(&shape, data)?));
        }
        let meta_at = cur.pos() as u64;
        let meta_len = cur.u32("metadata")? as usize;
        let meta = serde_json::from_slice(cur.take(meta_len, "metadata")?)
            .map_err(|e| Error::format(meta_at, format!("bad metadata: {e}")))?;
        cur.finish("metadata")?;
        Ok(Checkpoint { params, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::path(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::path(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{FrontendSpec, ToyConfig};
    use crate::kimcnn::KimCnnConfig;

    fn sample() -> Checkpoint {
        Checkpoint {
            params: vec![
                ("a.weight".into(), Tensor::new(&[2, 3], vec![0.5, -1.0, f32::MIN_POSITIVE, 7.0, -0.0, 1e-30]).unwrap()),
                ("a.bias".into(), Tensor::from_vec(vec![0.25])),
            ],
            meta: CheckpointMeta {
                model: ModelSpec {
                    frontends: vec![FrontendSpec::Toy(ToyConfig::default())],
                    kimcnn: KimCnnConfig::with_input_dim(48),
                    vocab: vec!["a".into(), "<".into()],
                    seed: 3,
                },
                train: TrainConfig::default(),
                epoch: 2,
                history: vec![],
                stopping: "auto(0.0001)".into(),
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back, c);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert_eq!(err, "bad magic at byte offset 0");
    }

    #[test]
    fn every_prefix_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for n in 0..bytes.len() {
            assert!(Checkpoint::from_bytes(&bytes[..n]).is_err(), "prefix {n}");
        }
    }

    #[test]
    fn unknown_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&9u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}
