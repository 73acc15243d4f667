//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned
//! below. Runs without the libtest harness so the lines always print.

use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tedb::cli::selfcheck::{
    self, knn3_exhaustive, model_gradient, pa_hand_oracle, primitive_gradients, random_features, random_store,
};
use tedb::corpus::{synthetic_dataset, write_dataset, Example, PAD};
use tedb::embed::{EmbeddedBatch, FrontendSpec, PrecomputedStore, ToyConfig};
use tedb::kimcnn::{KimCnn, KimCnnConfig};
use tedb::optim::{Schedule, StopMetric};
use tedb::tensor::{Graph, ParamStore, Tensor};
use tedb::train_eval::{
    knn3_predict, passive_aggressive, run_probe, train, Checkpoint, Classifier, Features, Metrics, ProbeConfig,
    ProbeKind, Stopping, TrainConfig,
};

const F1_IDENTITY_TOL: f64 = 5e-4;
const GRAD_TOL: f64 = 1e-4;
const SCHEDULE_TOL: f64 = 1e-12;
const ADAMW_TOL: f64 = 1e-6;
const SHATTER_MAX_EPOCHS: usize = 200;
const SHATTER_STOP_WITHIN: usize = 3;
const PADDING_TOL: f32 = 1e-6;
const PA_TOL: f64 = 1e-12;
/// Strided cap per parameter tensor for the full-model check; small
/// tensors are probed at every coordinate.
const MODEL_COORDS_PER_PARAM: usize = 1024;

struct Line {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn line(name: &'static str, passed: bool, detail: impl Into<String>) -> Line {
    Line {
        name,
        passed,
        detail: detail.into(),
    }
}

fn metric_identity() -> Line {
    let f1 = Metrics::f1_from_pr(0.818, 0.814);
    line(
        "metric identity",
        (f1 - 0.816).abs() <= F1_IDENTITY_TOL,
        format!("F1(P=0.818, R=0.814) = {f1:.6}, tol {F1_IDENTITY_TOL}"),
    )
}

fn gradient_suite() -> Line {
    let mut checks = primitive_gradients(selfcheck::GRAD_POINTS, 0xacce);
    checks.push(model_gradient(Some(MODEL_COORDS_PER_PARAM)));
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| format!("{} ({})", c.name, c.detail)).collect();
    let model = checks.last().map(|c| c.detail.clone()).unwrap_or_default();
    line(
        "gradient suite",
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} primitives ok; kimcnn+toy {model}; tol {GRAD_TOL}", checks.len() - 1)
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

fn scheduler_closed_forms() -> Line {
    let (total, cycles, max, min) = (1000usize, 5usize, 2e-5, 1e-6);
    let lin = Schedule::linear(max, total).unwrap();
    let cos = Schedule::cosine_restarts(max, min, total, cycles).unwrap();
    let period = total / cycles;
    let mut worst = 0.0f64;
    let mut restarts_exact = true;
    for t in 0..=total {
        let want_lin = max * (1.0 - t as f64 / total as f64);
        let c = t % period;
        let want_cos = min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * c as f64 / period as f64).cos());
        let got = cos.lr_at(t).unwrap();
        worst = worst.max((lin.lr_at(t).unwrap() - want_lin).abs()).max((got - want_cos).abs());
        if c == 0 {
            restarts_exact &= got == max;
        }
    }
    line(
        "scheduler closed forms",
        worst <= SCHEDULE_TOL && restarts_exact,
        format!("1000 steps / 5 cycles: max abs error {worst:.2e} (tol {SCHEDULE_TOL}), restarts exactly lr_max: {restarts_exact}"),
    )
}

fn adamw_oracle() -> Line {
    let (plain, decayed) = selfcheck::adamw_oracle();
    line(
        "AdamW hand oracle",
        (plain - 0.9).abs() <= ADAMW_TOL && (decayed - 0.899).abs() <= ADAMW_TOL,
        format!("w=1, g=0.5, lr=0.1: {plain:.7} (want 0.9), wd=0.01: {decayed:.7} (want 0.899), tol {ADAMW_TOL}"),
    )
}

/// Toy encoder + KimCNN on the 32-example synthetic set. Early stopping
/// watches train F1 (ε = 1e-4); dropout off, lr 1e-3, batch 8, seed 0.
fn shatter() -> Line {
    let data = synthetic_dataset(32, 0);
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        dropout_p: 0.0,
        stop_metric: StopMetric::TrainF1,
        max_epochs: SHATTER_MAX_EPOCHS,
        stopping: Stopping::Auto,
        seed: 0,
        ..TrainConfig::default()
    };
    let mut model =
        Classifier::build(vec![FrontendSpec::Toy(ToyConfig::default())], KimCnnConfig::default(), &cfg, &data).unwrap();
    let out = train(&mut model, &data, &cfg).unwrap();
    let shattered = out.history.iter().find(|r| r.train.f1 == 1.0).map(|r| r.epoch);
    let passed = match (shattered, out.stopped_epoch) {
        (Some(s), Some(e)) => s <= SHATTER_MAX_EPOCHS && e >= s && e - s <= SHATTER_STOP_WITHIN,
        _ => false,
    };
    line(
        "overfit/shatter",
        passed,
        format!(
            "train F1 = 1 at epoch {shattered:?}, auto stop at epoch {:?} (limit +{SHATTER_STOP_WITHIN}); \
             lr 1e-3, batch 8, dropout 0, stop on train F1",
            out.stopped_epoch
        ),
    )
}

fn toy_model(train: &TrainConfig, data: &[Example]) -> Classifier {
    Classifier::build(vec![FrontendSpec::Toy(ToyConfig::default())], KimCnnConfig::default(), train, data).unwrap()
}

fn architectural_invariants() -> Line {
    let mut notes = Vec::new();
    let mut ok = true;

    // padding: the same rows at their trimmed width and padded to max_len
    let data = synthetic_dataset(6, 9);
    let model = toy_model(&TrainConfig::default(), &data);
    let refs: Vec<&Example> = data.iter().collect();
    let trimmed = model.encode(&refs).unwrap();
    let full = tedb::embed::Batch::encode(&refs, &model.vocab, model.max_len, model.lowercase).unwrap();
    let a = model.logits(&trimmed).unwrap();
    let b = model.logits(&full).unwrap();
    let pad_err = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    ok &= pad_err <= PADDING_TOL;
    notes.push(format!("padding {}→{} cols: {pad_err:.1e}", trimmed.seq, full.seq));

    // second channel of zeros leaves logits bitwise unchanged
    let (bsz, seq, dim) = (3, 9, 12);
    let mut params = ParamStore::<f32>::new();
    let head = KimCnn::init(KimCnnConfig::with_input_dim(dim), 4, &mut params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x: Vec<f32> = (0..bsz * seq * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mask: Vec<bool> = (0..bsz * seq).map(|i| i % seq < 6 + i / seq).collect();
    let run = |two: bool| {
        let mut g = Graph::new();
        let mut channels = vec![g.constant(Tensor::new(&[bsz, seq, dim], x.clone()).unwrap())];
        if two {
            channels.push(g.constant(Tensor::zeros(&[bsz, seq, dim])));
        }
        let eb = EmbeddedBatch {
            channels,
            mask: mask.clone(),
            batch: bsz,
            seq,
            dim,
        };
        let out = head.forward(&mut g, &params, &eb, false, 0).unwrap();
        let pooled = g.shape(out.pooled).to_vec();
        (g.value(out.logits).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), pooled)
    };
    let (one, pooled_shape) = run(false);
    let (two, _) = run(true);
    ok &= one == two;
    notes.push(format!("zero channel bitwise: {}", one == two));

    let pooled = KimCnnConfig::default().pooled_dim();
    ok &= pooled == 300 && pooled_shape == [bsz, 300];
    notes.push(format!("pooled dim {pooled}, forward {pooled_shape:?}"));

    // PAD rows of a trainable static table and of the toy encoder
    let dir = tempfile::tempdir().unwrap();
    let vecs = dir.path().join("vectors.txt");
    let data = synthetic_dataset(32, 5);
    let mut words: Vec<String> = data.iter().flat_map(|e| tedb::corpus::tokenize(&e.text, true)).collect();
    words.sort();
    words.dedup();
    let mut text = String::new();
    for (i, w) in words.iter().enumerate().filter(|(i, _)| i % 3 != 0) {
        let v: Vec<String> = (0..48).map(|j| format!("{:.4}", ((i * 31 + j * 7) % 97) as f32 / 97.0 - 0.5)).collect();
        text.push_str(&format!("{w} {}\n", v.join(" ")));
    }
    std::fs::write(&vecs, text).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        max_epochs: 25,
        stopping: Stopping::Fixed,
        ..TrainConfig::default()
    };
    let mut model = Classifier::build(
        vec![
            FrontendSpec::Static {
                path: vecs,
                trainable: true,
                oov_seed: 3,
            },
            FrontendSpec::Toy(ToyConfig::default()),
        ],
        KimCnnConfig::default(),
        &cfg,
        &data,
    )
    .unwrap();
    let out = train(&mut model, &data, &cfg).unwrap();
    let steps = out.history.last().unwrap().steps;
    let mut pad_max = 0.0f32;
    for name in ["embed0.table", "embed1.tok_embed"] {
        let t = model.params.value(model.params.find(name).unwrap());
        let e = t.shape()[1];
        pad_max = t.data()[PAD * e..(PAD + 1) * e].iter().fold(pad_max, |m, v| m.max(v.abs()));
    }
    let moved = model.params.value(model.params.find("embed0.table").unwrap()).data()
        != Classifier::build(out.checkpoint.meta.model.frontends.clone(), KimCnnConfig::default(), &cfg, &data)
            .unwrap()
            .params
            .value(model.params.find("embed0.table").unwrap())
            .data();
    ok &= steps == 100 && pad_max == 0.0 && moved;
    notes.push(format!("PAD rows after {steps} steps: max |v| = {pad_max}, table trained: {moved}"));

    line("architectural invariants", ok, notes.join("; "))
}

fn separable(seed: u64, n: usize, dim: usize) -> Features {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let noise: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.3..0.3)).collect();
        data.extend(dir.iter().zip(&noise).map(|(d, e)| sign * d / norm + e / dim as f64));
        labels.push(label);
    }
    Features::new((0..n as u32).collect(), labels, dim, data).unwrap()
}

fn probe_oracles() -> Line {
    let train = random_features(101, 200, 5);
    let queries = random_features(102, 200, 5);
    let fast = knn3_predict(&train, &queries);
    let knn_agree = (0..queries.len()).filter(|&i| fast[i] == knn3_exhaustive(&train, queries.row(i))).count();

    let pa_train = random_features(103, 20, 6);
    let w = passive_aggressive(&pa_train, 1.0).unwrap();
    let want = pa_hand_oracle(&pa_train, 1.0);
    let pa_err = w.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let sep = separable(104, 40, 8);
    let test = separable(104, 40, 8);
    let logreg = run_probe(ProbeKind::Logreg, &ProbeConfig::default(), &sep, &test).unwrap();

    line(
        "probe oracles",
        knn_agree == 200 && pa_err <= PA_TOL && logreg.f1 == 1.0,
        format!(
            "knn3 {knn_agree}/200 agree with exhaustive sort; PA-I 20 updates max error {pa_err:.1e} (tol {PA_TOL}); \
             logreg separable F1 {}",
            logreg.f1
        ),
    )
}

fn format_round_trips() -> Line {
    let dir = tempfile::tempdir().unwrap();
    let store = random_store(77, 12, 3, 5);
    let sp = dir.path().join("e.bin");
    tedb::embed::write_interchange(&sp, &store).unwrap();
    let bytes = std::fs::read(&sp).unwrap();
    let back = tedb::embed::read_interchange(&sp).unwrap();
    let store_rt = back.to_bytes() == bytes
        && back.records().iter().zip(store.records()).all(|(a, b)| {
            a.example_id == b.example_id
                && a.label == b.label
                && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let mut magic = bytes.clone();
    magic[7] = b'2';
    let store_rejects = PrecomputedStore::from_bytes(&bytes[..bytes.len() - 1]).is_err()
        && PrecomputedStore::from_bytes(&magic).is_err();

    let data = synthetic_dataset(8, 2);
    let cfg = TrainConfig {
        max_epochs: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let mut model = toy_model(&cfg, &data);
    let out = train(&mut model, &data, &cfg).unwrap();
    let cp = dir.path().join("m.tedb");
    out.checkpoint.save(&cp).unwrap();
    let cbytes = std::fs::read(&cp).unwrap();
    let loaded = Checkpoint::load(&cp).unwrap();
    let ckpt_rt = loaded.to_bytes().unwrap() == cbytes
        && loaded.meta == out.checkpoint.meta
        && loaded.params.iter().zip(&out.checkpoint.params).all(|(a, b)| {
            a.0 == b.0 && a.1.shape() == b.1.shape() && a.1.data().iter().zip(b.1.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let mut magic = cbytes.clone();
    magic[0] = b'X';
    let ckpt_rejects = Checkpoint::from_bytes(&cbytes[..cbytes.len() - 1]).is_err() && Checkpoint::from_bytes(&magic).is_err();

    line(
        "format round trips",
        store_rt && store_rejects && ckpt_rt && ckpt_rejects,
        format!(
            "interchange bitwise {store_rt}, rejects truncation/magic {store_rejects}; \
             checkpoint bitwise {ckpt_rt}, rejects truncation/magic {ckpt_rejects}"
        ),
    )
}

fn tedb_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tedb")).args(args).output().expect("spawn tedb")
}

fn cli_train(config: &Path, out: &Path) -> bool {
    let o = tedb_cli(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    if !o.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&o.stderr));
    }
    o.status.success()
}

fn determinism() -> Line {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path().join("train.csv"), &synthetic_dataset(32, 0)).unwrap();
    write_dataset(dir.path().join("test.csv"), &synthetic_dataset(16, 1)).unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"train_data": "train.csv", "test_data": "test.csv",
            "train": {"lr": 1e-3, "batch_size": 8, "dropout_p": 0.5, "max_epochs": 6, "seed": 11}}"#,
    )
    .unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let ran = cli_train(&cfg, &a) && cli_train(&a.join("manifest.json"), &b) && cli_train(&a.join("manifest.json"), &c);
    if !ran {
        return line("determinism", false, "a CLI run failed");
    }
    let read = |d: &Path| std::fs::read(d.join("metrics.json")).unwrap();
    let same = read(&b) == read(&c);
    let same_as_first = read(&a) == read(&b);
    line(
        "determinism",
        same && same_as_first,
        format!("two runs from one manifest: metrics.json identical {same}; matches the original run {same_as_first}"),
    )
}

fn main() {
    let criteria: [fn() -> Line; 9] = [
        metric_identity,
        gradient_suite,
        scheduler_closed_forms,
        adamw_oracle,
        shatter,
        architectural_invariants,
        probe_oracles,
        format_round_trips,
        determinism,
    ];
    let mut failed = Vec::new();
    for criterion in criteria {
        let start = std::time::Instant::now();
        let l = criterion();
        let secs = start.elapsed().as_secs_f64();
        println!("{} {}: {} [{secs:.1}s]", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
        if !l.passed {
            failed.push(l.name);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
