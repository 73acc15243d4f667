//! Classical classifiers over frozen, pooled encoder features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::embed::PrecomputedStore;
use crate::error::{Error, Result};
use crate::init::xavier_uniform;
use crate::optim::{AdamW, AdamWConfig, EarlyStop, StopDecision, StopMetric};
use crate::par::{map_range, Exec};
use crate::tensor::{Graph, ParamEntry, ParamId, ParamStore, Tensor, Var};

use super::metrics::Metrics;
use super::train::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Logreg,
    PassiveAggressive,
    Knn3,
    Mlp,
    LinearSvm,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 5] = [
        ProbeKind::Logreg,
        ProbeKind::PassiveAggressive,
        ProbeKind::Knn3,
        ProbeKind::Mlp,
        ProbeKind::LinearSvm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Logreg => "logreg",
            ProbeKind::PassiveAggressive => "passive_aggressive",
            ProbeKind::Knn3 => "knn3",
            ProbeKind::Mlp => "mlp",
            ProbeKind::LinearSvm => "linear_svm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean of the deepest layer over real tokens.
    MeanTokens,
    /// Deepest layer at position 0.
    FirstToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub min_delta: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    /// PA-I aggressiveness.
    pub c: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 2.5e-4,
            batch_size: 16,
            max_epochs: 200,
            min_delta: 1e-4,
            weight_decay: 0.01,
            hidden: 128,
            c: 1.0,
            seed: 0,
        }
    }
}

/// Row-major feature matrix with labels and example ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub ids: Vec<u32>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(ids: Vec<u32>, labels: Vec<usize>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if ids.len() != labels.len() || data.len() != ids.len() * dim {
            return Err(Error::shape(
                "features",
                format!("{} ids, {} labels, {} values at dim {dim}", ids.len(), labels.len(), data.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(format!("label {l} is not binary")));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Features { ids, labels, dim, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn tensor(&self, rows: &[usize]) -> Tensor<f64> {
        let data = rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Tensor::new(&[rows.len(), self.dim], data).expect("row gather")
    }
}

fn pool_record(store: &PrecomputedStore, id: u32, pooling: Pooling) -> Result<Vec<f64>> {
    let rec = store.require(id)?;
    let (h, per) = (store.hidden_dim(), store.per_token());
    let deepest = (store.layer_count().max(1) - 1) * h;
    if rec.token_count == 0 {
        return Err(Error::Data(format!("example {id} has no tokens in the store")));
    }
    let layer = |t: usize| &rec.token(t, per)[deepest..deepest + h];
    Ok(match pooling {
        Pooling::FirstToken => layer(0).iter().map(|&x| x as f64).collect(),
        Pooling::MeanTokens => {
            let mut acc = vec![0.0f64; h];
            for t in 0..rec.token_count {
                for (a, &x) in acc.iter_mut().zip(layer(t)) {
                    *a += x as f64;
                }
            }
            acc.iter().map(|a| a / rec.token_count as f64).collect()
        }
    })
}

/// Pooled deepest-layer features for `examples`, labels from the dataset.
pub fn pool_features(store: &PrecomputedStore, examples: &[Example], pooling: Pooling) -> Result<Features> {
    let mut data = Vec::with_capacity(examples.len() * store.hidden_dim());
    for ex in examples {
        data.extend(pool_record(store, ex.id, pooling)?);
    }
    Features::new(
        examples.iter().map(|e| e.id).collect(),
        examples.iter().map(|e| e.label as usize).collect(),
        store.hidden_dim(),
        data,
    )
}

/// Pooled features for every record of `store`, labels from the store.
pub fn pool_store(store: &PrecomputedStore, pooling: Pooling) -> Result<Features> {
    let mut data = Vec::with_capacity(store.len() * store.hidden_dim());
    for r in store.records() {
        data.extend(pool_record(store, r.example_id, pooling)?);
    }
    Features::new(
        store.records().iter().map(|r| r.example_id).collect(),
        store.records().iter().map(|r| r.label as usize).collect(),
        store.hidden_dim(),
        data,
    )
}

/// Fit `kind` on `train` and score it on `test`.
pub fn run_probe(kind: ProbeKind, config: &ProbeConfig, train: &Features, test: &Features) -> Result<Metrics> {
    if train.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    if train.dim != test.dim {
        return Err(Error::shape("run_probe", format!("train dim {} vs test dim {}", train.dim, test.dim)));
    }
    let predicted = match kind {
        ProbeKind::Knn3 => knn3_predict(train, test),
        ProbeKind::PassiveAggressive => {
            let w = passive_aggressive(train, config.c)?;
            (0..test.len()).map(|i| usize::from(dot(&w, test.row(i)) > 0.0)).collect()
        }
        ProbeKind::Logreg | ProbeKind::Mlp | ProbeKind::LinearSvm => {
            let net = Net::fit(kind, config, train)?;
            net.predict(test)?
        }
    };
    Metrics::from_predictions(&predicted, &test.labels)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn require_both_classes(train: &Features, what: &str) -> Result<()> {
    let pos = train.labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == train.len() {
        return Err(Error::Data(format!("{what} needs both classes in the training set")));
    }
    Ok(())
}

/// PA-I, single pass in dataset order, no bias: `τ = min(C, ℓ/‖x‖²)`,
/// `w ← w + τ·y·x` with `y ∈ {−1, +1}`.
pub fn passive_aggressive(train: &Features, c: f64) -> Result<Vec<f64>> {
    require_both_classes(train, "passive_aggressive")?;
    let mut w = vec![0.0; train.dim];
    for i in 0..train.len() {
        let x = train.row(i);
        let y = if train.labels[i] == 1 { 1.0 } else { -1.0 };
        let loss = (1.0 - y * dot(&w, x)).max(0.0);
        let norm2 = dot(x, x);
        if loss == 0.0 || norm2 == 0.0 {
            continue;
        }
        let tau = c.min(loss / norm2);
        for (wj, &xj) in w.iter_mut().zip(x) {
            *wj += tau * y * xj;
        }
    }
    Ok(w)
}

/// Three nearest training rows by Euclidean distance (ties to the lower
/// example id), majority vote (ties to class 0).
pub fn knn3_predict(train: &Features, queries: &Features) -> Vec<usize> {
    knn3_predict_with(Exec::default(), train, queries)
}

/// [`knn3_predict`] under an explicit execution policy.
pub fn knn3_predict_with(exec: Exec, train: &Features, queries: &Features) -> Vec<usize> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by_key(|&i| train.ids[i]);
    map_range(exec, queries.len() * train.len() * train.dim, queries.len(), |q| {
        let query = queries.row(q);
        let mut dists: Vec<(f64, u32, usize)> = order
            .iter()
            .map(|&i| {
                let d = train.row(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                (d, train.ids[i], train.labels[i])
            })
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let k = dists.len().min(3);
        let pos = dists[..k].iter().filter(|d| d.2 == 1).count();
        usize::from(2 * pos > k)
    })
}

/// Gradient-trained probe: logistic regression, one-hidden-layer MLP, or
/// a linear SVM on the mean hinge loss.
struct Net {
    kind: ProbeKind,
    params: ParamStore<f64>,
    layers: Vec<(ParamId, ParamId)>,
}

impl Net {
    fn init(kind: ProbeKind, config: &ProbeConfig, dim: usize) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 11, 0));
        let layer = |params: &mut ParamStore<f64>, name: &str, w: Tensor<f64>| -> Result<(ParamId, ParamId)> {
            let out = w.shape()[1];
            let wid = params.add(format!("{name}.weight"), w)?;
            let bid = params.insert(ParamEntry {
                name: format!("{name}.bias"),
                value: Tensor::zeros(&[out]),
                trainable: true,
                decay: false,
                pinned_row: None,
            })?;
            Ok((wid, bid))
        };
        let layers = match kind {
            ProbeKind::Logreg => vec![layer(&mut params, "logreg", Tensor::zeros(&[dim, 2]))?],
            ProbeKind::LinearSvm => vec![layer(&mut params, "svm", Tensor::zeros(&[dim, 1]))?],
            ProbeKind::Mlp => {
                let h = config.hidden;
                let w1 = xavier_uniform(&mut rng, &[dim, h], dim, h);
                let w2 = xavier_uniform(&mut rng, &[h, 2], h, 2);
                vec![layer(&mut params, "mlp.hidden", w1)?, layer(&mut params, "mlp.out", w2)?]
            }
            _ => unreachable!("not a gradient-trained probe"),
        };
        Ok(Net { kind, params, layers })
    }

    /// Scores `[B, 2]` logits, or `[B, 1]` margins for the SVM.
    fn scores(&self, g: &mut Graph<f64>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(&self.params, w), g.param(&self.params, b));
            h = g.linear(h, w, Some(b))?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    fn loss(&self, g: &mut Graph<f64>, scores: Var, labels: &[usize]) -> Result<Var> {
        if self.kind != ProbeKind::LinearSvm {
            return g.softmax_cross_entropy(scores, labels);
        }
        let n = labels.len();
        let signs: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let y = g.constant(Tensor::new(&[n, 1], signs)?);
        let margin = g.mul(scores, y)?;
        let neg = g.scale(margin, -1.0);
        let ones = g.constant(Tensor::full(&[n, 1], 1.0));
        let slack = g.add(ones, neg)?;
        let hinge = g.relu(slack);
        let total = g.sum(hinge);
        Ok(g.scale(total, 1.0 / n as f64))
    }

    fn fit(kind: ProbeKind, config: &ProbeConfig, train: &Features) -> Result<Self> {
        if kind == ProbeKind::LinearSvm {
            require_both_classes(train, "linear_svm")?;
        }
        if config.batch_size == 0 || config.max_epochs == 0 {
            return Err(Error::InvalidArgument("probe batch_size and max_epochs must be positive".into()));
        }
        let mut net = Net::init(kind, config, train.dim)?;
        let mut opt = AdamW::new(
            &net.params,
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
        );
        let mut stop = EarlyStop::new(StopMetric::TrainLoss, config.min_delta);
        let all: Vec<usize> = (0..train.len()).collect();
        let mut order = all.clone();
        for epoch in 1..=config.max_epochs {
            order.sort_unstable();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 12, epoch as u64)));
            for chunk in order.chunks(config.batch_size) {
                let mut g = Graph::new();
                let x = g.constant(train.tensor(chunk));
                let s = net.scores(&mut g, x)?;
                let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
                let loss = net.loss(&mut g, s, &labels)?;
                g.backward(loss)?;
                opt.step(&mut net.params, &g.param_grads(), config.lr)?;
            }
            let mut g = Graph::new();
            let x = g.constant(train.tensor(&all));
            let s = net.scores(&mut g, x)?;
            let loss = net.loss(&mut g, s, &train.labels)?;
            if stop.update(g.value(loss).data()[0]) == StopDecision::Stop {
                break;
            }
        }
        Ok(net)
    }

    fn predict(&self, test: &Features) -> Result<Vec<usize>> {
        if test.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let rows: Vec<usize> = (0..test.len()).collect();
        let x = g.constant(test.tensor(&rows));
        let s = self.scores(&mut g, x)?;
        let v = g.value(s);
        Ok(match self.kind {
            ProbeKind::LinearSvm => v.data().iter().map(|&m| usize::from(m > 0.0)).collect(),
            _ => crate::kimcnn::predict(v),
        })
    }
}
