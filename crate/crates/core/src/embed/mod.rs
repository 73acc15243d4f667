//! Word-vector frontends and batch assembly.
//!
//! Three frontends produce a `[B,S,D]` channel for a batch: a static
//! vocabulary table, the toy transformer encoder (all hidden states
//! concatenated along the feature axis), and a precomputed store read from a
//! `TEDBEMB1` file. One or two frontends make a single- or multichannel
//! [`EmbeddedBatch`].

pub mod interchange;
pub mod static_table;
pub mod toy;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{encode, tokenize, Example, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

pub use interchange::{read_interchange, write_interchange, PrecomputedStore, StoreRecord};
pub use static_table::{StaticTable, WordVectors};
pub use toy::{ToyConfig, ToyEncoder};

/// How to build one frontend; the JSON form is externally tagged, e.g.
/// `{"toy": {"embed_dim": 16, "layers": 2, "heads": 2}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FrontendSpec {
    Static {
        path: PathBuf,
        #[serde(default = "yes")]
        trainable: bool,
        #[serde(default)]
        oov_seed: u64,
    },
    Toy(ToyConfig),
    Store {
        path: PathBuf,
    },
}

fn yes() -> bool {
    true
}

/// Token ids and labels of a mini-batch, padded to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub example_ids: Vec<u32>,
    pub labels: Vec<usize>,
    /// `batch × seq` vocabulary ids.
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn encode(examples: &[&Example], vocab: &Vocabulary, max_len: usize, lowercase: bool) -> Result<Self> {
        let mut ids = Vec::with_capacity(examples.len() * max_len);
        let mut lengths = Vec::with_capacity(examples.len());
        for ex in examples {
            let seq = encode(&tokenize(&ex.text, lowercase), vocab, max_len)?;
            ids.extend_from_slice(&seq.ids);
            lengths.push(seq.length);
        }
        Ok(Batch {
            example_ids: examples.iter().map(|e| e.id).collect(),
            labels: examples.iter().map(|e| e.label as usize).collect(),
            ids,
            lengths,
            batch: examples.len(),
            seq: max_len,
        })
    }

    /// Concatenate batches of equal `seq` row-wise.
    pub fn stack(parts: &[&Batch]) -> Result<Batch> {
        let seq = parts.first().map_or(0, |p| p.seq);
        if let Some(p) = parts.iter().find(|p| p.seq != seq) {
            return Err(Error::shape("batch_stack", format!("seq {} vs {seq}", p.seq)));
        }
        Ok(Batch {
            example_ids: parts.iter().flat_map(|p| p.example_ids.iter().copied()).collect(),
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
            ids: parts.iter().flat_map(|p| p.ids.iter().copied()).collect(),
            lengths: parts.iter().flat_map(|p| p.lengths.iter().copied()).collect(),
            batch: parts.iter().map(|p| p.batch).sum(),
            seq,
        })
    }

    /// Keep the first `seq` columns; refuses to drop a real token.
    pub fn truncated(&self, seq: usize) -> Result<Batch> {
        if seq > self.seq {
            return Err(Error::InvalidArgument(format!("cannot widen batch from {} to {seq}", self.seq)));
        }
        if let Some(&len) = self.lengths.iter().find(|&&l| l > seq) {
            return Err(Error::InvalidArgument(format!("truncating to {seq} would cut a {len}-token row")));
        }
        let ids = self.ids.chunks(self.seq.max(1)).flat_map(|row| row[..seq].iter().copied()).collect();
        Ok(Batch {
            ids,
            seq,
            ..self.clone()
        })
    }

    /// `batch × seq` flags, true on real tokens.
    pub fn mask(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&len| (0..self.seq).map(move |p| p < len))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum Frontend {
    Static(StaticTable),
    Toy(ToyEncoder),
    Store(Arc<PrecomputedStore>),
}

impl Frontend {
    pub fn output_dim(&self) -> usize {
        match self {
            Frontend::Static(t) => t.dim,
            Frontend::Toy(e) => e.config.output_dim(),
            Frontend::Store(s) => s.per_token(),
        }
    }

    pub fn trainable(&self) -> bool {
        match self {
            Frontend::Static(t) => t.trainable,
            Frontend::Toy(_) => true,
            Frontend::Store(_) => false,
        }
    }

    /// One `[B,S,D]` channel plus the real-token mask it was built under.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, params: &ParamStore<T>, batch: &Batch) -> Result<(Var, Vec<bool>)> {
        let (b, s) = (batch.batch, batch.seq);
        match self {
            Frontend::Static(t) => {
                let table = g.param(params, t.param);
                let v = g.embedding(table, &batch.ids, &[b, s])?;
                Ok((v, batch.mask()))
            }
            Frontend::Toy(enc) => {
                let mask = batch.mask();
                let states = enc.encode_all_layers(g, params, &batch.ids, &mask, b, s)?;
                let v = concat_layers(g, &states)?;
                Ok((v, mask))
            }
            Frontend::Store(store) => {
                let d = store.per_token();
                let mut data = vec![T::zero(); b * s * d];
                let mut mask = vec![false; b * s];
                for (bi, &id) in batch.example_ids.iter().enumerate() {
                    let rec = store.require(id)?;
                    let n = rec.token_count.min(s);
                    for (dst, &src) in data[bi * s * d..(bi * s + n) * d].iter_mut().zip(&rec.data) {
                        *dst = T::of(src as f64);
                    }
                    mask[bi * s..bi * s + n].iter_mut().for_each(|m| *m = true);
                }
                let v = g.constant(Tensor::new(&[b, s, d], data)?);
                Ok((v, mask))
            }
        }
    }
}

/// Channels of equal geometry and the shared real-token mask.
#[derive(Debug, Clone)]
pub struct EmbeddedBatch {
    pub channels: Vec<Var>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
    pub dim: usize,
}

/// Concatenate hidden states along the feature axis, first state first.
pub fn concat_layers<T: Real>(g: &mut Graph<T>, states: &[Var]) -> Result<Var> {
    let Some(&first) = states.first() else {
        return Err(Error::shape("concat_layers", "no states"));
    };
    let shape = g.shape(first).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("concat_layers", format!("state {shape:?} is not [B,S,E]")));
    }
    for &s in states {
        if g.shape(s) != shape.as_slice() {
            return Err(Error::shape(
                "concat_layers",
                format!("{:?} vs {shape:?}", g.shape(s)),
            ));
        }
    }
    if states.len() == 1 {
        return Ok(first);
    }
    g.concat(states, 2)
}

/// Embed `batch` through one or two frontends.
pub fn assemble_batch<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    frontends: &[Frontend],
    batch: &Batch,
) -> Result<EmbeddedBatch> {
    if frontends.is_empty() || frontends.len() > 2 {
        return Err(Error::InvalidArgument(format!(
            "expected 1 or 2 frontends, got {}",
            frontends.len()
        )));
    }
    let dim = frontends[0].output_dim();
    if let Some(other) = frontends.iter().find(|f| f.output_dim() != dim) {
        return Err(Error::InvalidArgument(format!(
            "unequal channel dims: {dim} vs {}",
            other.output_dim()
        )));
    }
    let mut channels = Vec::with_capacity(frontends.len());
    let mut mask: Option<Vec<bool>> = None;
    for f in frontends {
        let (v, m) = f.embed(g, params, batch)?;
        match &mask {
            Some(prev) if *prev != m => {
                return Err(Error::Data(
                    "channel token masks disagree; both frontends must see the same token grid".into(),
                ))
            }
            Some(_) => {}
            None => mask = Some(m),
        }
        channels.push(v);
    }
    Ok(EmbeddedBatch {
        channels,
        mask: mask.unwrap_or_default(),
        batch: batch.batch,
        seq: batch.seq,
        dim,
    })
}
