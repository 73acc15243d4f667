//! Property suites run by `tedb selfcheck`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{synthetic_dataset, Example};
use crate::embed::{read_interchange, write_interchange, FrontendSpec, PrecomputedStore, StoreRecord, ToyConfig};
use crate::error::Result;
use crate::kimcnn::KimCnnConfig;
use crate::optim::{AdamW, AdamWConfig, EarlyStop, Schedule, StopDecision, StopMetric};
use crate::tensor::{grad_check, grad_check_params, Graph, ParamStore, Tensor, Var};
use crate::train_eval::{knn3_predict, passive_aggressive, Checkpoint, Classifier, Features, Metrics, TrainConfig};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_POINTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<Check>) -> Check {
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Scalar `Σ w ⊙ v` with fixed random weights, so every output coordinate
/// contributes a distinct gradient.
fn project(g: &mut Graph<f64>, v: Var, w: &Tensor<f64>) -> Result<Var> {
    let c = g.constant(w.clone());
    let p = g.mul(v, c)?;
    Ok(g.sum(p))
}

type PrimFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

struct Primitive {
    name: &'static str,
    inputs: &'static [&'static [usize]],
    out: &'static [usize],
    f: PrimFn,
}

const PRIMITIVES: &[Primitive] = &[
    Primitive { name: "add", inputs: &[&[2, 3], &[2, 3]], out: &[2, 3], f: |g, v| g.add(v[0], v[1]) },
    Primitive { name: "mul", inputs: &[&[2, 3], &[2, 3]], out: &[2, 3], f: |g, v| g.mul(v[0], v[1]) },
    Primitive { name: "scale", inputs: &[&[2, 3]], out: &[2, 3], f: |g, v| Ok(g.scale(v[0], 1.7)) },
    Primitive { name: "sum", inputs: &[&[2, 3]], out: &[], f: |g, v| Ok(g.sum(v[0])) },
    Primitive { name: "matmul", inputs: &[&[2, 3], &[3, 4]], out: &[2, 4], f: |g, v| g.matmul(v[0], v[1]) },
    Primitive {
        name: "linear",
        inputs: &[&[2, 2, 3], &[3, 4], &[4]],
        out: &[2, 2, 4],
        f: |g, v| g.linear(v[0], v[1], Some(v[2])),
    },
    Primitive {
        name: "embedding",
        inputs: &[&[5, 3]],
        out: &[2, 3, 3],
        f: |g, v| g.embedding(v[0], &[1, 4, 4, 0, 2, 3], &[2, 3]),
    },
    Primitive {
        name: "concat",
        inputs: &[&[2, 3, 2], &[2, 3, 3]],
        out: &[2, 3, 5],
        f: |g, v| g.concat(&[v[0], v[1]], 2),
    },
    Primitive {
        name: "conv1d_valid",
        inputs: &[&[2, 5, 3], &[4, 2, 3]],
        out: &[2, 4, 4],
        f: |g, v| g.conv1d_valid(v[0], v[1]),
    },
    Primitive { name: "add_bias", inputs: &[&[2, 3, 4], &[4]], out: &[2, 3, 4], f: |g, v| g.add_bias(v[0], v[1]) },
    Primitive { name: "relu", inputs: &[&[3, 4]], out: &[3, 4], f: |g, v| Ok(g.relu(v[0])) },
    Primitive {
        name: "max_over_time",
        inputs: &[&[2, 4, 3]],
        out: &[2, 3],
        f: |g, v| g.max_over_time(v[0], &[true, true, true, false, true, true, true, true]),
    },
    Primitive { name: "mean", inputs: &[&[2, 3, 4]], out: &[2, 4], f: |g, v| g.mean(v[0], 1) },
    Primitive {
        name: "softmax_cross_entropy",
        inputs: &[&[3, 2]],
        out: &[],
        f: |g, v| g.softmax_cross_entropy(v[0], &[0, 1, 1]),
    },
    Primitive { name: "dropout", inputs: &[&[3, 4]], out: &[3, 4], f: |g, v| g.dropout(v[0], 0.3, true, 7) },
    Primitive {
        name: "layer_norm",
        inputs: &[&[2, 3, 4], &[4], &[4]],
        out: &[2, 3, 4],
        f: |g, v| g.layer_norm(v[0], v[1], v[2]),
    },
    Primitive {
        name: "attention",
        inputs: &[&[2, 3, 4], &[2, 3, 4], &[2, 3, 4]],
        out: &[2, 3, 4],
        f: |g, v| g.attention(v[0], v[1], v[2], 2, &[true, true, false, true, true, true]),
    },
];

/// Central-difference check of every tensor primitive at `points` random
/// inputs each, reporting the worst relative error per primitive.
pub fn primitive_gradients(points: usize, seed: u64) -> Vec<Check> {
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            let name = format!("gradient/{}", p.name);
            let run = || -> Result<Check> {
                let mut worst = 0.0f64;
                for k in 0..points {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((pi as u64) << 32 | k as u64));
                    let inputs: Vec<Tensor<f64>> = p.inputs.iter().map(|s| rand_tensor(&mut rng, s)).collect();
                    let w = rand_tensor(&mut rng, p.out);
                    let r = grad_check(
                        &inputs,
                        |g, v| {
                            let y = (p.f)(g, v)?;
                            project(g, y, &w)
                        },
                        GRAD_EPS,
                        GRAD_TOL,
                    )?;
                    worst = worst.max(r.max_rel_error);
                }
                Ok(Check::new(&name, worst <= GRAD_TOL, format!("max rel error {worst:.3e} over {points} points")))
            };
            Check::from_result(&name, run())
        })
        .collect()
}

/// Full model check: toy encoder plus KimCNN at default head settings, on a
/// 2-example batch, probing at most `per_param` coordinates of each
/// parameter tensor.
pub fn model_gradient(per_param: Option<usize>) -> Check {
    let name = "gradient/kimcnn+toy";
    let run = || -> Result<Check> {
        let examples = vec![
            Example::new(0, "they say he <passed away> last week .", 1)?,
            Example::new(1, "the bus <broke down> .", 0)?,
        ];
        let train = TrainConfig {
            dropout_p: 0.0,
            ..TrainConfig::default()
        };
        let model = Classifier::build(
            vec![FrontendSpec::Toy(ToyConfig::default())],
            KimCnnConfig::default(),
            &train,
            &examples,
        )?;
        let refs: Vec<&Example> = examples.iter().collect();
        let batch = model.encode(&refs)?;
        let params: ParamStore<f64> = model.params.cast();
        let r = grad_check_params(
            &params,
            |g, p| {
                let out = model.forward(g, p, &batch, false, 0)?;
                model.head.loss(g, out.logits, &batch.labels)
            },
            GRAD_EPS,
            GRAD_TOL,
            per_param,
        )?;
        Ok(Check::new(
            name,
            r.passed,
            format!("max rel error {:.3e} over {} coordinates", r.max_rel_error, r.coordinates),
        ))
    };
    Check::from_result(name, run())
}

fn cosine_closed_form(t: usize, total: usize, cycles: usize, max: f64, min: f64) -> f64 {
    let len = total / cycles;
    let k = (t / len).min(cycles - 1);
    let period = if k + 1 == cycles { total - k * len } else { len };
    let c = (t - k * len) % period;
    min + 0.5 * (max - min) * (1.0 + (PI * c as f64 / period as f64).cos())
}

/// Both schedules against their closed forms at every step of a 1000-step,
/// 5-cycle run; restarts must hit `lr_max` exactly.
pub fn schedules() -> Check {
    let run = || -> Result<Check> {
        let (total, cycles, max, min) = (1000, 5, 2e-5, 1e-7);
        let lin = Schedule::linear(max, total)?;
        let cos = Schedule::cosine_restarts(max, min, total, cycles)?;
        let mut worst = 0.0f64;
        let mut restarts_exact = true;
        for t in 0..=total {
            let want_lin = max * (1.0 - t as f64 / total as f64);
            worst = worst.max((lin.lr_at(t)? - want_lin).abs());
            let got = cos.lr_at(t)?;
            worst = worst.max((got - cosine_closed_form(t, total, cycles, max, min)).abs());
            if t % (total / cycles) == 0 && got != max {
                restarts_exact = false;
            }
        }
        Ok(Check::new(
            "schedules",
            worst <= 1e-12 && restarts_exact,
            format!("max abs error {worst:.3e}, restarts exact: {restarts_exact}"),
        ))
    };
    Check::from_result("schedules", run())
}

/// One AdamW step on the scalar `w = 1, g = 0.5, lr = 0.1`, with and
/// without decay.
pub fn adamw_oracle() -> (f64, f64) {
    let step = |wd: f64| -> f64 {
        let mut params = ParamStore::new();
        let id = params.add("w", Tensor::from_vec(vec![1.0f64])).expect("fresh store");
        let mut opt = AdamW::new(
            &params,
            AdamWConfig {
                weight_decay: wd,
                ..AdamWConfig::default()
            },
        );
        opt.step(&mut params, &[(id, Tensor::from_vec(vec![0.5]))], 0.1).expect("finite step");
        params.value(id).data()[0]
    };
    (step(0.0), step(0.01))
}

pub fn adamw() -> Check {
    let (plain, decayed) = adamw_oracle();
    let ok = (plain - 0.9).abs() <= 1e-6 && (decayed - 0.899).abs() <= 1e-6;
    Check::new("adamw", ok, format!("w = {plain:.7}, with decay {decayed:.7}"))
}

pub fn metrics() -> Check {
    let f1 = Metrics::f1_from_pr(0.818, 0.814);
    let m = Metrics::from_counts(6, 2, 3, 9);
    let counts_ok = (m.precision - 0.75).abs() < 1e-15
        && (m.recall - 6.0 / 9.0).abs() < 1e-15
        && (m.f1 - 12.0 / 17.0).abs() < 1e-15
        && Metrics::from_counts(0, 0, 0, 5).f1 == 0.0;
    Check::new(
        "metrics",
        (f1 - 0.816).abs() <= 5e-4 && counts_ok,
        format!("F1(0.818, 0.814) = {f1:.6}"),
    )
}

pub fn early_stop() -> Check {
    let mut loss = EarlyStop::new(StopMetric::TrainLoss, 1e-4);
    let seq = [1.0, 0.5, 0.49995, 0.1];
    let decisions: Vec<StopDecision> = seq.iter().map(|&v| loss.update(v)).collect();
    let loss_ok = decisions[..2] == [StopDecision::Continue; 2] && decisions[2] == StopDecision::Stop && loss.stopped_epoch() == Some(3);
    let mut f1 = EarlyStop::new(StopMetric::TrainF1, 1e-4);
    let f1_ok = f1.update(0.5) == StopDecision::Continue
        && f1.update(1.0) == StopDecision::Continue
        && f1.update(1.0) == StopDecision::Stop;
    Check::new("early_stop", loss_ok && f1_ok, format!("loss watch stopped at {:?}", loss.stopped_epoch()))
}

/// A small random store for format checks.
pub fn random_store(seed: u64, examples: u32, layers: usize, hidden: usize) -> PrecomputedStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = PrecomputedStore::new(layers, hidden);
    for id in 0..examples {
        let token_count = rng.gen_range(1..6);
        let data = (0..token_count * layers * hidden).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        store
            .push(StoreRecord {
                example_id: id * 3 + 1,
                label: id % 2,
                token_count,
                data,
            })
            .expect("consistent record");
    }
    store
}

fn rejects_damage(bytes: &[u8], parse: impl Fn(&[u8]) -> bool) -> bool {
    let mut bad_magic = bytes.to_vec();
    bad_magic[0] ^= 0xff;
    !parse(&bytes[..bytes.len() - 1]) && !parse(&bad_magic)
}

pub fn formats() -> Check {
    let run = || -> Result<Check> {
        let dir = tempfile::tempdir()?;
        let store = random_store(5, 6, 3, 4);
        let path = dir.path().join("store.bin");
        write_interchange(&path, &store)?;
        let back = read_interchange(&path)?;
        let store_ok = back.to_bytes() == store.to_bytes()
            && back == store
            && rejects_damage(&store.to_bytes(), |b| PrecomputedStore::from_bytes(b).is_ok());

        let examples = synthetic_dataset(4, 1);
        let model = Classifier::build(
            vec![FrontendSpec::Toy(ToyConfig {
                embed_dim: 8,
                layers: 1,
                heads: 2,
                max_positions: 32,
            })],
            KimCnnConfig {
                maps_per_width: 4,
                ..KimCnnConfig::default()
            },
            &TrainConfig::default(),
            &examples,
        )?;
        let ckpt = model.checkpoint(&TrainConfig::default(), 0, Vec::new());
        let path = dir.path().join("model.tedb");
        ckpt.save(&path)?;
        let loaded = Checkpoint::load(&path)?;
        let bytes = ckpt.to_bytes()?;
        let ckpt_ok = loaded.to_bytes()? == bytes
            && loaded.params.iter().zip(&ckpt.params).all(|(a, b)| {
                a.0 == b.0 && a.1.data().iter().zip(b.1.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
            && rejects_damage(&bytes, |b| Checkpoint::from_bytes(b).is_ok());
        Ok(Check::new(
            "formats",
            store_ok && ckpt_ok,
            format!("interchange ok: {store_ok}, checkpoint ok: {ckpt_ok}"),
        ))
    };
    Check::from_result("formats", run())
}

/// Majority of the 3 nearest rows found by sorting every distance.
pub fn knn3_exhaustive(train: &Features, query: &[f64]) -> usize {
    let mut all: Vec<(f64, u32, usize)> = (0..train.len())
        .map(|i| {
            let d = train.row(i).iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            (d, train.ids[i], train.labels[i])
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
    let pos = all.iter().take(3).filter(|t| t.2 == 1).count();
    usize::from(pos >= 2)
}

/// Random binary features; every fifth row duplicates an earlier one so
/// distance ties occur.
pub fn random_features(seed: u64, n: usize, dim: usize) -> Features {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = Vec::with_capacity(n * dim);
    for i in 0..n {
        if i % 5 == 4 {
            let src = rng.gen_range(0..i) * dim;
            let row: Vec<f64> = data[src..src + dim].to_vec();
            data.extend(row);
        } else {
            data.extend((0..dim).map(|_| rng.gen_range(-1.0..1.0)));
        }
    }
    let mut ids: Vec<u32> = (0..n as u32).map(|i| i * 7 % 1009).collect();
    ids.reverse();
    let labels = (0..n).map(|_| rng.gen_range(0..2)).collect();
    Features::new(ids, labels, dim, data).expect("consistent features")
}

pub fn knn() -> Check {
    let train = random_features(21, 200, 4);
    let queries = random_features(22, 50, 4);
    let fast = knn3_predict(&train, &queries);
    let mut self_q = knn3_predict(&train, &train);
    self_q.extend(fast.iter().copied());
    let mut oracle: Vec<usize> = (0..train.len()).map(|i| knn3_exhaustive(&train, train.row(i))).collect();
    oracle.extend((0..queries.len()).map(|i| knn3_exhaustive(&train, queries.row(i))));
    let agree = self_q.iter().zip(&oracle).filter(|(a, b)| a == b).count();
    Check::new("knn3", agree == oracle.len(), format!("{agree}/{} agree with exhaustive sort", oracle.len()))
}

/// PA-I stepped by hand: `τ = min(C, ℓ/‖x‖²)`, `w ← w + τ·y·x`.
pub fn pa_hand_oracle(train: &Features, c: f64) -> Vec<f64> {
    let mut w = vec![0.0; train.dim];
    for i in 0..train.len() {
        let x = train.row(i);
        let y = if train.labels[i] == 1 { 1.0 } else { -1.0 };
        let margin: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
        let loss = f64::max(0.0, 1.0 - y * margin);
        let norm2: f64 = x.iter().map(|v| v * v).sum();
        if loss > 0.0 && norm2 > 0.0 {
            let tau = f64::min(c, loss / norm2);
            for (wj, xj) in w.iter_mut().zip(x) {
                *wj += tau * y * xj;
            }
        }
    }
    w
}

pub fn passive_aggressive_oracle() -> Check {
    let run = || -> Result<Check> {
        let mut worst = 0.0f64;
        for (seed, c) in [(31, 1.0), (32, 0.05)] {
            let train = random_features(seed, 20, 5);
            let got = passive_aggressive(&train, c)?;
            let want = pa_hand_oracle(&train, c);
            worst = got.iter().zip(&want).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        }
        Ok(Check::new("passive_aggressive", worst <= 1e-12, format!("max abs weight error {worst:.3e}")))
    };
    Check::from_result("passive_aggressive", run())
}

/// Every suite, in a fixed order.
pub fn run_all() -> Vec<Check> {
    let mut checks = primitive_gradients(GRAD_POINTS, 0x5eed);
    checks.push(model_gradient(Some(64)));
    checks.push(schedules());
    checks.push(adamw());
    checks.push(metrics());
    checks.push(early_stop());
    checks.push(formats());
    checks.push(knn());
    checks.push(passive_aggressive_oracle());
    checks
}
