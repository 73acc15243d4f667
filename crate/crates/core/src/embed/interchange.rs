//! `TEDBEMB1` contextual-embedding interchange files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 0..8    magic "TEDBEMB1"
//! u32     example_count
//! u32     layer_count
//! u32     hidden_dim
//! repeated example_count times:
//!   u32   example_id
//!   u32   label
//!   u32   token_count
//!   f32 × token_count·layer_count·hidden_dim   (token-major, then layer, then feature)
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::binio::{put_f32s, put_u32, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TEDBEMB1";

/// Per-token, per-layer vectors of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreRecord {
    pub example_id: u32,
    pub label: u32,
    pub token_count: usize,
    /// `token_count × layer_count × hidden_dim`, token-major.
    pub data: Vec<f32>,
}

impl StoreRecord {
    /// Vectors of `token` across all layers, embedding layer first.
    pub fn token(&self, token: usize, per_token: usize) -> &[f32] {
        &self.data[token * per_token..(token + 1) * per_token]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedStore {
    layer_count: usize,
    hidden_dim: usize,
    records: Vec<StoreRecord>,
    index: HashMap<u32, usize>,
}

impl PrecomputedStore {
    pub fn new(layer_count: usize, hidden_dim: usize) -> Self {
        PrecomputedStore {
            layer_count,
            hidden_dim,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, record: StoreRecord) -> Result<()> {
        let want = record.token_count * self.per_token();
        if record.data.len() != want {
            return Err(Error::InvalidArgument(format!(
                "example {} carries {} floats, expected {want}",
                record.example_id,
                record.data.len()
            )));
        }
        if self.index.contains_key(&record.example_id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate example id {}",
                record.example_id
            )));
        }
        self.index.insert(record.example_id, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Width of the concatenated all-layer word vector.
    pub fn per_token(&self) -> usize {
        self.layer_count * self.hidden_dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[StoreRecord] {
        &self.records
    }

    pub fn get(&self, example_id: u32) -> Option<&StoreRecord> {
        self.index.get(&example_id).map(|&i| &self.records[i])
    }

    pub fn require(&self, example_id: u32) -> Result<&StoreRecord> {
        self.get(example_id)
            .ok_or_else(|| Error::Data(format!("example {example_id} missing from embedding store")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let floats: usize = self.records.iter().map(|r| r.data.len()).sum();
        let mut out = Vec::with_capacity(20 + self.records.len() * 12 + floats * 4);
        out.extend_from_slice(MAGIC);
        for v in [self.records.len(), self.layer_count, self.hidden_dim] {
            put_u32(&mut out, v);
        }
        for r in &self.records {
            out.extend_from_slice(&r.example_id.to_le_bytes());
            out.extend_from_slice(&r.label.to_le_bytes());
            put_u32(&mut out, r.token_count);
            put_f32s(&mut out, &r.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Reader::new(bytes);
        let magic = cur.take(8, "header")?;
        if magic != MAGIC {
            return Err(Error::format(0, "bad magic"));
        }
        let count = cur.u32("header")? as usize;
        let layer_count = cur.u32("header")? as usize;
        let hidden_dim = cur.u32("header")? as usize;
        let mut store = PrecomputedStore::new(layer_count, hidden_dim);
        for i in 0..count {
            let record_start = cur.pos() as u64;
            let example_id = cur.u32("record header")?;
            let label = cur.u32("record header")?;
            let token_count = cur.u32("record header")? as usize;
            let n = token_count
                .checked_mul(store.per_token())
                .ok_or_else(|| Error::format(record_start, "record size overflows"))?;
            let data = cur.f32s(n, "record payload")?;
            store
                .push(StoreRecord {
                    example_id,
                    label,
                    token_count,
                    data,
                })
                .map_err(|e| Error::format(record_start, format!("record {i}: {e}")))?;
        }
        cur.finish(&format!("{count} declared examples"))?;
        Ok(store)
    }
}

pub fn read_interchange(path: impl AsRef<Path>) -> Result<PrecomputedStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::path(path, e))?;
    PrecomputedStore::from_bytes(&bytes)
}

pub fn write_interchange(path: impl AsRef<Path>, store: &PrecomputedStore) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::path(path, e))?;
    f.write_all(&store.to_bytes())?;
    Ok(())
}
