//! KimCNN classifier head.
//!
//! For each filter width `w` a bank of `maps` filters is convolved over every
//! channel; the per-channel responses are summed, biased and rectified, then
//! max-pooled over the windows that lie entirely on real tokens. Pooled
//! features from all widths are concatenated, passed through dropout, and
//! mapped affinely to class logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddedBatch;
use crate::error::{Error, Result};
use crate::init::xavier_uniform;
use crate::tensor::{Graph, ParamEntry, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KimCnnConfig {
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_maps")]
    pub maps_per_width: usize,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

fn default_widths() -> Vec<usize> {
    vec![3, 4, 5]
}
fn default_maps() -> usize {
    100
}
fn default_dropout() -> f64 {
    0.5
}
fn default_classes() -> usize {
    2
}

impl KimCnnConfig {
    pub fn with_input_dim(input_dim: usize) -> Self {
        KimCnnConfig {
            widths: default_widths(),
            maps_per_width: default_maps(),
            dropout_p: default_dropout(),
            input_dim,
            num_classes: default_classes(),
        }
    }

    /// Every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.widths.is_empty() || self.widths.contains(&0) {
            bad.push(format!("widths {:?} must be non-empty and positive", self.widths));
        }
        if self.maps_per_width == 0 {
            bad.push("maps_per_width must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            bad.push(format!("dropout_p {} outside [0,1)", self.dropout_p));
        }
        if self.input_dim == 0 {
            bad.push("input_dim must be positive".to_string());
        }
        if self.num_classes < 2 {
            bad.push("num_classes must be at least 2".to_string());
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.violations();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(bad.join("; ")))
        }
    }

    pub fn pooled_dim(&self) -> usize {
        self.widths.len() * self.maps_per_width
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(0)
    }
}

impl Default for KimCnnConfig {
    fn default() -> Self {
        Self::with_input_dim(0)
    }
}

#[derive(Debug, Clone)]
struct FilterBank {
    width: usize,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct KimCnn {
    pub config: KimCnnConfig,
    banks: Vec<FilterBank>,
    fc_weight: ParamId,
    fc_bias: ParamId,
}

/// Intermediate values of one forward pass, exposed for inspection.
#[derive(Debug, Clone)]
pub struct KimCnnOutput {
    pub pooled: Var,
    pub logits: Var,
}

impl KimCnn {
    /// Xavier-uniform filters and classifier weights, zero biases.
    pub fn init<T: Real>(config: KimCnnConfig, seed: u64, params: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m) = (config.input_dim, config.maps_per_width);
        let mut banks = Vec::with_capacity(config.widths.len());
        for &w in &config.widths {
            let weight = params.add(
                format!("kimcnn.conv{w}.weight"),
                xavier_uniform(&mut rng, &[m, w, d], w * d, m * w),
            )?;
            let bias = params.insert(ParamEntry {
                name: format!("kimcnn.conv{w}.bias"),
                value: Tensor::zeros(&[m]),
                trainable: true,
                decay: false,
                pinned_row: None,
            })?;
            banks.push(FilterBank {
                width: w,
                weight,
                bias,
            });
        }
        let f = config.pooled_dim();
        let c = config.num_classes;
        let fc_weight = params.add("kimcnn.fc.weight", xavier_uniform(&mut rng, &[f, c], f, c))?;
        let fc_bias = params.insert(ParamEntry {
            name: "kimcnn.fc.bias".into(),
            value: Tensor::zeros(&[c]),
            trainable: true,
            decay: false,
            pinned_row: None,
        })?;
        Ok(KimCnn {
            config,
            banks,
            fc_weight,
            fc_bias,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        batch: &EmbeddedBatch,
        train: bool,
        dropout_seed: u64,
    ) -> Result<KimCnnOutput> {
        if batch.dim != self.config.input_dim {
            return Err(Error::shape(
                "kimcnn",
                format!("channel dim {} but model expects {}", batch.dim, self.config.input_dim),
            ));
        }
        if batch.channels.is_empty() {
            return Err(Error::shape("kimcnn", "no input channels"));
        }
        let (b, s) = (batch.batch, batch.seq);
        let mut pooled = Vec::with_capacity(self.banks.len());
        for bank in &self.banks {
            let w = bank.width;
            if s < w {
                return Err(Error::shape(
                    "kimcnn",
                    format!("sequence shorter than filter: {s} < {w}"),
                ));
            }
            let weight = g.param(params, bank.weight);
            let mut summed: Option<Var> = None;
            for &ch in &batch.channels {
                let resp = g.conv1d_valid(ch, weight)?;
                summed = Some(match summed {
                    Some(acc) => g.add(acc, resp)?,
                    None => resp,
                });
            }
            let bias = g.param(params, bank.bias);
            let z = g.add_bias(summed.expect("at least one channel"), bias)?;
            let r = g.relu(z);
            let positions = s + 1 - w;
            let valid = window_mask(&batch.mask, b, s, w);
            debug_assert_eq!(valid.len(), b * positions);
            pooled.push(g.max_over_time(r, &valid)?);
        }
        let features = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat(&pooled, 1)?
        };
        let dropped = g.dropout(features, self.config.dropout_p, train, dropout_seed)?;
        let fw = g.param(params, self.fc_weight);
        let fb = g.param(params, self.fc_bias);
        let logits = g.linear(dropped, fw, Some(fb))?;
        Ok(KimCnnOutput {
            pooled: features,
            logits,
        })
    }

    /// Mean softmax cross-entropy of `logits` against `labels`.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
        g.softmax_cross_entropy(logits, labels)
    }
}

/// `valid[b*P + p]` is true when window `p..p+width` covers only real tokens.
pub fn window_mask(mask: &[bool], batch: usize, seq: usize, width: usize) -> Vec<bool> {
    let positions = seq + 1 - width;
    let mut out = Vec::with_capacity(batch * positions);
    for b in 0..batch {
        let m = &mask[b * seq..(b + 1) * seq];
        for p in 0..positions {
            out.push(m[p..p + width].iter().all(|&x| x));
        }
    }
    out
}

/// Argmax per row of `[B,C]` logits; ties go to the lower class.
pub fn predict<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
