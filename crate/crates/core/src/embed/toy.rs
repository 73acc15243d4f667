//! Small pre-norm transformer encoder that exposes every hidden state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::init::xavier_uniform;
use crate::tensor::{Graph, ParamEntry, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
}

fn default_max_positions() -> usize {
    crate::corpus::DEFAULT_MAX_LEN
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            embed_dim: 16,
            layers: 2,
            heads: 2,
            max_positions: default_max_positions(),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::InvalidArgument("max_positions must be positive".into()));
        }
        Ok(())
    }

    /// Width of the all-layer concatenated word vector.
    pub fn output_dim(&self) -> usize {
        (self.layers + 1) * self.embed_dim
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub config: ToyConfig,
    pub vocab_size: usize,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
}

const FF_MULT: usize = 4;

impl ToyEncoder {
    pub fn init<T: Real>(
        config: ToyConfig,
        vocab_size: usize,
        seed: u64,
        prefix: &str,
        params: &mut ParamStore<T>,
    ) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tok_table = xavier_uniform::<T, _>(&mut rng, &[vocab_size, e], vocab_size, e);
        tok_table.data_mut()[PAD * e..(PAD + 1) * e]
            .iter_mut()
            .for_each(|x| *x = T::zero());
        let tok = params.insert(ParamEntry {
            name: format!("{prefix}.tok_embed"),
            value: tok_table,
            trainable: true,
            decay: false,
            pinned_row: Some(PAD),
        })?;
        let pos = params.insert(ParamEntry {
            name: format!("{prefix}.pos_embed"),
            value: xavier_uniform(&mut rng, &[config.max_positions, e], config.max_positions, e),
            trainable: true,
            decay: false,
            pinned_row: None,
        })?;

        let norm = |params: &mut ParamStore<T>, name: String| -> Result<(ParamId, ParamId)> {
            let g = params.insert(ParamEntry {
                name: format!("{name}.gamma"),
                value: Tensor::full(&[e], T::one()),
                trainable: true,
                decay: false,
                pinned_row: None,
            })?;
            let b = params.insert(ParamEntry {
                name: format!("{name}.beta"),
                value: Tensor::zeros(&[e]),
                trainable: true,
                decay: false,
                pinned_row: None,
            })?;
            Ok((g, b))
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let base = format!("{prefix}.layer{l}");
            let mut affine = |params: &mut ParamStore<T>, name: &str, i: usize, o: usize| -> Result<(ParamId, ParamId)> {
                let w = params.add(format!("{base}.{name}.weight"), xavier_uniform(&mut rng, &[i, o], i, o))?;
                let b = params.insert(ParamEntry {
                    name: format!("{base}.{name}.bias"),
                    value: Tensor::zeros(&[o]),
                    trainable: true,
                    decay: false,
                    pinned_row: None,
                })?;
                Ok((w, b))
            };
            let q = affine(params, "q", e, e)?;
            let k = affine(params, "k", e, e)?;
            let v = affine(params, "v", e, e)?;
            let o = affine(params, "o", e, e)?;
            let ff1 = affine(params, "ff1", e, FF_MULT * e)?;
            let ff2 = affine(params, "ff2", FF_MULT * e, e)?;
            let ln1 = norm(params, format!("{base}.ln1"))?;
            let ln2 = norm(params, format!("{base}.ln2"))?;
            blocks.push(Block {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                ff1,
                ff2,
            });
        }
        Ok(ToyEncoder {
            config,
            vocab_size,
            tok,
            pos,
            blocks,
        })
    }

    /// Run the encoder over `ids[B,S]` and return all `L+1` hidden states
    /// `[B,S,E]`, the embedding output first. PAD positions (`mask == false`)
    /// are zeroed in every state and excluded from attention.
    pub fn encode_all_layers<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        ids: &[usize],
        mask: &[bool],
        batch: usize,
        seq: usize,
    ) -> Result<Vec<Var>> {
        if seq > self.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence length {seq} exceeds the encoder's {} positions",
                self.config.max_positions
            )));
        }
        if ids.len() != batch * seq || mask.len() != batch * seq {
            return Err(Error::shape(
                "encode_all_layers",
                format!("{} ids / {} mask entries for batch {batch} × seq {seq}", ids.len(), mask.len()),
            ));
        }
        let e = self.config.embed_dim;
        let mask_grid: Vec<T> = mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { T::one() } else { T::zero() }, e))
            .collect();
        let mask_var = g.constant(Tensor::new(&[batch, seq, e], mask_grid)?);

        let tok = g.param(params, self.tok);
        let pos = g.param(params, self.pos);
        let tok_vecs = g.embedding(tok, ids, &[batch, seq])?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos_vecs = g.embedding(pos, &positions, &[batch, seq])?;
        let h0 = g.add(tok_vecs, pos_vecs)?;
        let mut h = g.mul(h0, mask_var)?;
        let mut states = vec![h];

        for blk in &self.blocks {
            let ln = |g: &mut Graph<T>, x: Var, (gm, bt): (ParamId, ParamId)| -> Result<Var> {
                let gm = g.param(params, gm);
                let bt = g.param(params, bt);
                g.layer_norm(x, gm, bt)
            };
            let lin = |g: &mut Graph<T>, x: Var, (w, b): (ParamId, ParamId)| -> Result<Var> {
                let w = g.param(params, w);
                let b = g.param(params, b);
                g.linear(x, w, Some(b))
            };
            let a = ln(g, h, blk.ln1)?;
            let q = lin(g, a, blk.q)?;
            let k = lin(g, a, blk.k)?;
            let v = lin(g, a, blk.v)?;
            let att = g.attention(q, k, v, self.config.heads, mask)?;
            let proj = lin(g, att, blk.o)?;
            let h1 = g.add(h, proj)?;
            let b = ln(g, h1, blk.ln2)?;
            let f1 = lin(g, b, blk.ff1)?;
            let f1 = g.relu(f1);
            let f2 = lin(g, f1, blk.ff2)?;
            let h2 = g.add(h1, f2)?;
            h = g.mul(h2, mask_var)?;
            states.push(h);
        }
        Ok(states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_params;

    fn encoder(layers: usize) -> (ToyEncoder, ParamStore<f64>) {
        let mut params = ParamStore::new();
        let cfg = ToyConfig {
            layers,
            max_positions: 12,
            ..ToyConfig::default()
        };
        let enc = ToyEncoder::init(cfg, 10, 3, "toy", &mut params).unwrap();
        (enc, params)
    }

    #[test]
    fn emits_one_state_per_layer_plus_embeddings() {
        let (enc, params) = encoder(2);
        let mut g = Graph::new();
        let ids = vec![2, 3, 4, 5, 6, 7, 8, 9, 0, 0];
        let mask: Vec<bool> = ids.iter().map(|&i| i != 0).collect();
        let states = enc.encode_all_layers(&mut g, &params, &ids, &mask, 2, 5).unwrap();
        assert_eq!(states.len(), 3);
        for s in states {
            assert_eq!(g.shape(s), &[2, 5, 16]);
        }
    }

    #[test]
    fn zero_layers_is_token_plus_position() {
        let (enc, params) = encoder(0);
        let mut g = Graph::new();
        let states = enc.encode_all_layers(&mut g, &params, &[3, 4], &[true, true], 1, 2).unwrap();
        assert_eq!(states.len(), 1);
        let tok = params.value(params.find("toy.tok_embed").unwrap()).data();
        let pos = params.value(params.find("toy.pos_embed").unwrap()).data();
        let got = g.value(states[0]).data();
        for j in 0..16 {
            assert_eq!(got[j], tok[3 * 16 + j] + pos[j]);
            assert_eq!(got[16 + j], tok[4 * 16 + j] + pos[16 + j]);
        }
    }

    #[test]
    fn rejects_sequences_beyond_positions() {
        let (enc, params) = encoder(1);
        let mut g = Graph::new();
        let ids = vec![2; 13];
        assert!(enc.encode_all_layers(&mut g, &params, &ids, &[true; 13], 1, 13).is_err());
    }

    #[test]
    fn appended_padding_leaves_real_tokens_unchanged() {
        let (enc, params) = encoder(2);
        let real = [2usize, 5, 7, 3];
        let run = |seq: usize| {
            let mut ids = real.to_vec();
            ids.resize(seq, PAD);
            let mask: Vec<bool> = (0..seq).map(|i| i < real.len()).collect();
            let mut g = Graph::new();
            let states = enc.encode_all_layers(&mut g, &params, &ids, &mask, 1, seq).unwrap();
            g.value(*states.last().unwrap()).data()[..real.len() * 16].to_vec()
        };
        let short = run(4);
        let long = run(11);
        for (a, b) in short.iter().zip(&long) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn pad_column_carries_no_gradient_to_real_tokens() {
        // Finite-difference probe: nudging the PAD position's embedding
        // must not move any real-token output.
        let (enc, mut params) = encoder(2);
        let ids = vec![2usize, 5, 7, PAD];
        let mask = vec![true, true, true, false];
        let real_sum = |params: &ParamStore<f64>| {
            let mut g = Graph::new();
            let states = enc.encode_all_layers(&mut g, params, &ids, &mask, 1, 4).unwrap();
            g.value(*states.last().unwrap()).data()[..3 * 16].iter().sum::<f64>()
        };
        let base = real_sum(&params);
        let pos = params.find("toy.pos_embed").unwrap();
        for j in 0..16 {
            params.get_mut(pos).value.data_mut()[3 * 16 + j] += 1e-3;
        }
        assert_eq!(real_sum(&params), base);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (enc, params) = encoder(1);
        let ids = vec![2usize, 5, 7, 0, 4, 3, 0, 0];
        let mask: Vec<bool> = ids.iter().map(|&i| i != 0).collect();
        let report = grad_check_params(
            &params,
            |g, p| {
                let states = enc.encode_all_layers(g, p, &ids, &mask, 2, 4)?;
                let last = *states.last().unwrap();
                let sq = g.mul(last, last)?;
                Ok(g.sum(sq))
            },
            1e-5,
            1e-4,
            Some(40),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
