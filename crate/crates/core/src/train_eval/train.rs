use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, Example, Vocabulary};
use crate::embed::{
    assemble_batch, read_interchange, Batch, Frontend, FrontendSpec, StaticTable, ToyEncoder, WordVectors,
};
use crate::error::{Error, Result};
use crate::kimcnn::{predict, KimCnn, KimCnnConfig, KimCnnOutput};
use crate::optim::{AdamW, AdamWConfig, EarlyStop, Schedule, ScheduleKind, StopDecision, StopMetric};
use crate::tensor::{Graph, ParamStore, Real, Tensor};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::metrics::Metrics;

/// Rows per forward pass when scoring rather than training.
pub const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stopping {
    /// Zero-patience early stopping, capped at `max_epochs`.
    Auto,
    /// Exactly `max_epochs` epochs.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub schedule: ScheduleKind,
    pub cycles: usize,
    pub max_epochs: usize,
    pub stopping: Stopping,
    pub min_delta: f64,
    pub stop_metric: StopMetric,
    pub seed: u64,
    pub dropout_p: f64,
    pub weight_decay: f64,
    pub max_len: usize,
    pub lowercase: bool,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 2e-5,
            lr_min: 0.0,
            schedule: ScheduleKind::CosineRestarts,
            cycles: 5,
            max_epochs: 200,
            stopping: Stopping::Auto,
            min_delta: 1e-4,
            stop_metric: StopMetric::TrainLoss,
            seed: 0,
            dropout_p: 0.5,
            weight_decay: 0.01,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            lowercase: true,
            min_count: 1,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, or `Ok`.
    pub fn violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            bad.push(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(self.lr_min.is_finite() && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            bad.push(format!("lr_min {} must lie in [0, lr]", self.lr_min));
        }
        if self.cycles == 0 {
            bad.push("cycles must be at least 1".into());
        }
        if self.max_epochs == 0 {
            bad.push("max_epochs must be at least 1".into());
        }
        if !(self.min_delta.is_finite() && self.min_delta >= 0.0) {
            bad.push(format!("min_delta {} must be finite and non-negative", self.min_delta));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            bad.push(format!("dropout_p {} outside [0,1)", self.dropout_p));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bad.push(format!("weight_decay {} must be finite and non-negative", self.weight_decay));
        }
        if self.max_len < crate::corpus::MIN_MAX_LEN {
            bad.push(format!("max_len {} below {}", self.max_len, crate::corpus::MIN_MAX_LEN));
        }
        if self.min_count == 0 {
            bad.push("min_count must be at least 1".into());
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.violations();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// `auto(ε)` or `fixed(max_epochs)`, as printed in reports.
    pub fn stopping_label(&self) -> String {
        match self.stopping {
            Stopping::Auto => format!("auto({})", self.min_delta),
            Stopping::Fixed => format!("fixed({})", self.max_epochs),
        }
    }
}

/// Everything needed to rebuild a classifier's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub frontends: Vec<FrontendSpec>,
    /// Resolved head config (`input_dim` filled in).
    pub kimcnn: KimCnnConfig,
    /// Regular vocabulary tokens in index order, after PAD and UNK.
    pub vocab: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the training set, inference mode.
    pub train_loss: f64,
    /// Mean of the minibatch losses seen during the epoch (dropout on).
    pub running_loss: f64,
    pub train: Metrics,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Epoch at which early stopping fired, if it did.
    pub stopped_epoch: Option<usize>,
}

const STREAM_HEAD: u64 = 1;
const STREAM_FRONTEND: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

/// Independent sub-seed for `(stream, index)` under `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Frontends plus KimCNN head, with parameters in 32-bit.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub spec: ModelSpec,
    pub vocab: Vocabulary,
    pub params: ParamStore<f32>,
    pub frontends: Vec<Frontend>,
    pub head: KimCnn,
    pub max_len: usize,
    pub lowercase: bool,
}

impl Classifier {
    /// Fresh model: vocabulary from `examples`, seeded initialization.
    pub fn build(
        frontends: Vec<FrontendSpec>,
        kimcnn: KimCnnConfig,
        train: &TrainConfig,
        examples: &[Example],
    ) -> Result<Self> {
        let vocab = build_vocab(examples, train.min_count, train.lowercase);
        let spec = ModelSpec {
            frontends,
            kimcnn: KimCnnConfig {
                dropout_p: train.dropout_p,
                ..kimcnn
            },
            vocab: vocab.regular_tokens().to_vec(),
            seed: train.seed,
        };
        Self::assemble(spec, train, None)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::assemble(ckpt.meta.model.clone(), &ckpt.meta.train, Some(&ckpt.params))?;
        model.params.load_values(&ckpt.params)?;
        Ok(model)
    }

    fn assemble(mut spec: ModelSpec, train: &TrainConfig, saved: Option<&[(String, Tensor<f32>)]>) -> Result<Self> {
        if spec.frontends.is_empty() || spec.frontends.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "expected 1 or 2 frontends, got {}",
                spec.frontends.len()
            )));
        }
        let vocab = Vocabulary::from_tokens(spec.vocab.clone());
        let mut params = ParamStore::new();
        let mut frontends = Vec::with_capacity(spec.frontends.len());
        for (i, fs) in spec.frontends.iter().enumerate() {
            let name = format!("embed{i}");
            let f = match fs {
                FrontendSpec::Static {
                    path,
                    trainable,
                    oov_seed,
                } => {
                    let table = format!("{name}.table");
                    match saved {
                        Some(saved) => {
                            let dim = saved
                                .iter()
                                .find(|(n, _)| *n == table)
                                .and_then(|(_, t)| t.shape().get(1).copied())
                                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter `{table}`")))?;
                            Frontend::Static(StaticTable::placeholder(vocab.len(), dim, *trainable, &table, &mut params)?)
                        }
                        None => {
                            let vectors = WordVectors::load(path)?;
                            Frontend::Static(StaticTable::build(&vectors, &vocab, *trainable, *oov_seed, &table, &mut params)?)
                        }
                    }
                }
                FrontendSpec::Toy(cfg) => Frontend::Toy(ToyEncoder::init(
                    *cfg,
                    vocab.len(),
                    derive_seed(spec.seed, STREAM_FRONTEND, i as u64),
                    &name,
                    &mut params,
                )?),
                FrontendSpec::Store { path } => Frontend::Store(Arc::new(read_interchange(path)?)),
            };
            frontends.push(f);
        }
        let dim = frontends[0].output_dim();
        if spec.kimcnn.input_dim == 0 {
            spec.kimcnn.input_dim = dim;
        } else if spec.kimcnn.input_dim != dim {
            return Err(Error::Data(format!(
                "model expects word vectors of dim {}, frontend yields {dim}",
                spec.kimcnn.input_dim
            )));
        }
        let head = KimCnn::init(spec.kimcnn.clone(), derive_seed(spec.seed, STREAM_HEAD, 0), &mut params)?;
        Ok(Classifier {
            spec,
            vocab,
            params,
            frontends,
            head,
            max_len: train.max_len,
            lowercase: train.lowercase,
        })
    }

    /// Swap the embedding file behind every store frontend, in order (e.g. to
    /// score a test split exported separately).
    pub fn replace_stores(&mut self, paths: &[std::path::PathBuf]) -> Result<()> {
        let mut it = paths.iter();
        for (f, spec) in self.frontends.iter_mut().zip(self.spec.frontends.iter_mut()) {
            if let (Frontend::Store(old), FrontendSpec::Store { path }) = (f, spec) {
                let Some(p) = it.next() else { break };
                let store = read_interchange(p)?;
                if store.per_token() != old.per_token() {
                    return Err(Error::Data(format!(
                        "{}: word vectors of dim {}, model expects {}",
                        p.display(),
                        store.per_token(),
                        old.per_token()
                    )));
                }
                *old = Arc::new(store);
                *path = p.clone();
            }
        }
        Ok(())
    }

    /// Columns the batch needs: the longest tokenized row or stored record.
    fn extent(&self, batch: &Batch) -> Result<usize> {
        let mut n = batch.lengths.iter().copied().max().unwrap_or(0);
        for f in &self.frontends {
            if let Frontend::Store(s) = f {
                for &id in &batch.example_ids {
                    n = n.max(s.require(id)?.token_count.min(self.max_len));
                }
            }
        }
        Ok(n)
    }

    /// Encode examples as one batch, trimmed to the longest row.
    pub fn encode(&self, examples: &[&Example]) -> Result<Batch> {
        let full = Batch::encode(examples, &self.vocab, self.max_len, self.lowercase)?;
        let seq = self.extent(&full)?.max(self.head.config.max_width()).min(self.max_len);
        full.truncated(seq)
    }

    fn stack(&self, parts: &[&Batch]) -> Result<Batch> {
        let seq = parts.iter().map(|p| p.seq).max().unwrap_or(0);
        let widened: Vec<Batch> = parts
            .iter()
            .map(|p| {
                if p.seq == seq {
                    (*p).clone()
                } else {
                    widen(p, seq)
                }
            })
            .collect();
        Batch::stack(&widened.iter().collect::<Vec<_>>())
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        batch: &Batch,
        train: bool,
        dropout_seed: u64,
    ) -> Result<KimCnnOutput> {
        let eb = assemble_batch(g, params, &self.frontends, batch)?;
        self.head.forward(g, params, &eb, train, dropout_seed)
    }

    /// Inference-mode logits `[B, classes]`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, &self.params, batch, false, 0)?;
        Ok(g.value(out.logits).clone())
    }

    /// Mean loss and confusion metrics over `examples`, inference mode.
    pub fn score(&self, examples: &[Example]) -> Result<(f64, Metrics, Vec<usize>)> {
        if examples.is_empty() {
            return Err(Error::Data("no examples".into()));
        }
        let mut total = 0.0f64;
        let mut predicted = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(EVAL_BATCH) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let batch = self.encode(&refs)?;
            let mut g = Graph::new();
            let out = self.forward(&mut g, &self.params, &batch, false, 0)?;
            let loss = g.softmax_cross_entropy(out.logits, &batch.labels)?;
            total += g.value(loss).data()[0] as f64 * chunk.len() as f64;
            predicted.extend(predict(g.value(out.logits)));
        }
        let gold: Vec<usize> = examples.iter().map(|e| e.label as usize).collect();
        let metrics = Metrics::from_predictions(&predicted, &gold)?;
        Ok((total / examples.len() as f64, metrics, predicted))
    }

    pub fn checkpoint(&self, train: &TrainConfig, epoch: usize, history: Vec<EpochRecord>) -> Checkpoint {
        Checkpoint {
            params: self
                .params
                .iter()
                .map(|(_, e)| (e.name.clone(), e.value.clone()))
                .collect(),
            meta: CheckpointMeta {
                model: self.spec.clone(),
                train: train.clone(),
                epoch,
                history,
                stopping: train.stopping_label(),
            },
        }
    }
}

fn widen(b: &Batch, seq: usize) -> Batch {
    let mut ids = Vec::with_capacity(b.batch * seq);
    for row in b.ids.chunks(b.seq.max(1)) {
        ids.extend_from_slice(row);
        ids.extend(std::iter::repeat_n(crate::corpus::PAD, seq - b.seq));
    }
    Batch { ids, seq, ..b.clone() }
}

/// Positive-class metrics of `model` on `examples`.
pub fn evaluate(model: &Classifier, examples: &[Example]) -> Result<Metrics> {
    Ok(model.score(examples)?.1)
}

/// Train end-to-end with per-step scheduling and epoch-end scoring on the
/// training set; returns the final-epoch checkpoint.
pub fn train(model: &mut Classifier, examples: &[Example], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, examples, config, &mut |_, _| Ok(()))
}

/// [`train`], calling `on_epoch` after each epoch is scored.
pub fn train_with(
    model: &mut Classifier,
    examples: &[Example],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Classifier) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("no examples".into()));
    }
    let singles: Vec<Batch> = examples.iter().map(|e| model.encode(&[e])).collect::<Result<_>>()?;
    let steps_per_epoch = examples.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.max_epochs;
    // a run shorter than the cycle count gets one cycle per step
    let cycles = config.cycles.min(total_steps);
    let schedule = Schedule::new(config.schedule, config.lr, config.lr_min, total_steps, cycles)?;
    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut stop = EarlyStop::new(config.stop_metric, config.min_delta);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch = 0;

    while epoch < config.max_epochs {
        epoch += 1;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SHUFFLE, epoch as u64)));
        let mut running = 0.0f64;
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let parts: Vec<&Batch> = chunk.iter().map(|&i| &singles[i]).collect();
            let batch = model.stack(&parts)?;
            // update n (1-based) runs at lr_at(n - 1): cycles open on their restart
            let step = opt.steps() as usize;
            lr = schedule.lr_at(step)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, &model.params, &batch, true, derive_seed(config.seed, STREAM_DROPOUT, step as u64))?;
            let loss = model.head.loss(&mut g, out.logits, &batch.labels)?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { step: step + 1, lr, loss: lv });
            }
            running += lv * chunk.len() as f64;
            g.backward(loss)?;
            let grads = g.param_grads();
            opt.step(&mut model.params, &grads, lr)?;
        }
        let (train_loss, metrics, _) = model.score(examples)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            running_loss: running / examples.len() as f64,
            train: metrics,
            lr,
            steps: opt.steps(),
        };
        on_epoch(&record, model)?;
        history.push(record);
        if config.stopping == Stopping::Auto {
            let watched = match config.stop_metric {
                StopMetric::TrainLoss => train_loss,
                StopMetric::TrainF1 => metrics.f1,
            };
            if stop.update(watched) == StopDecision::Stop {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: model.checkpoint(config, epoch, history.clone()),
        history,
        stopped_epoch: stop.stopped_epoch(),
    })
}
