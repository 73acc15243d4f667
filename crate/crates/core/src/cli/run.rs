use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use super::config::{resolve_paths, validate_config, RunConfig, Task};
use super::selfcheck;
use crate::corpus::{histogram_tsv, length_histogram, load_dataset, split_indices};
use crate::embed::read_interchange;
use crate::error::{Error, Result};
use crate::train_eval::{
    derive_seed, evaluate, pool_store, report, run_probe, train_with, Checkpoint, Classifier, EpochRecord, Features,
    Metrics,
};

pub const TOOL: &str = "tedb";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const STREAM_PROBE_SPLIT: u64 = 13;

#[derive(Parser, Debug)]
#[command(name = "tedb", version, about = "KimCNN euphemism detection over contextual word vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classifier and write its checkpoint, history and metrics.
    Train(Overrides),
    /// Score a checkpoint on `test_data`.
    Eval(Overrides),
    /// Fit frozen-feature probes on precomputed embeddings.
    Probe(Overrides),
    /// Token-length histogram of `train_data` as TSV.
    Stats(Overrides),
    /// Run the gradient, scheduler, optimizer, metric and format suites.
    Selfcheck(Overrides),
    /// Tabulate metrics.json files (or run directories) as markdown.
    Report(Overrides),
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON run config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Inputs for `report`.
    #[arg(long, num_args = 1..)]
    inputs: Vec<PathBuf>,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

/// Run the CLI on `argv` (program name first) and return the exit code.
pub fn main_with<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (task, over) = match cli.command {
        Command::Train(o) => (Task::Train, o),
        Command::Eval(o) => (Task::Eval, o),
        Command::Probe(o) => (Task::Probe, o),
        Command::Stats(o) => (Task::Stats, o),
        Command::Selfcheck(o) => (Task::Selfcheck, o),
        Command::Report(o) => (Task::Report, o),
    };
    match execute(task, &over) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            match &e {
                Error::Config(list) => {
                    eprintln!("error: invalid config:");
                    for item in list {
                        eprintln!("  - {item}");
                    }
                }
                _ => eprintln!("error: {e}"),
            }
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

fn load_raw(path: &Path) -> std::result::Result<Value, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut raw: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Run(Error::Config(vec![format!("{}: {e}", path.display())])))?;
    // a manifest carries the resolved config under "config"
    if let Some(obj) = raw.as_object() {
        if obj.get("tool").and_then(Value::as_str) == Some(TOOL) {
            if let Some(inner) = obj.get("config") {
                raw = inner.clone();
            }
        }
    }
    let base = absolute(path.parent().unwrap_or(Path::new(".")));
    resolve_paths(&mut raw, &base);
    Ok(raw)
}

fn overlay(raw: &mut Value, task: Task, o: &Overrides) {
    let Some(obj) = raw.as_object_mut() else { return };
    let path = |p: &PathBuf| Value::String(absolute(p).to_string_lossy().into_owned());
    let mut set_in = |section: &str, key: &str, v: Value| {
        let entry = obj.entry(section).or_insert_with(|| Value::Object(Map::new()));
        if let Some(s) = entry.as_object_mut() {
            s.insert(key.to_string(), v);
        }
    };
    let section = if task == Task::Probe { "probe" } else { "train" };
    if let Some(s) = o.seed {
        set_in(section, "seed", json!(s));
    }
    if let Some(e) = o.epochs {
        set_in(section, "max_epochs", json!(e));
    }
    if let Some(lr) = o.lr {
        set_in(section, "lr", json!(lr));
    }
    if let Some(b) = o.batch_size {
        set_in(section, "batch_size", json!(b));
    }
    for (key, v) in [
        ("train_data", &o.train_data),
        ("test_data", &o.test_data),
        ("checkpoint", &o.checkpoint),
        ("out", &o.out),
    ] {
        if let Some(p) = v {
            obj.insert(key.to_string(), path(p));
        }
    }
    if !o.inputs.is_empty() {
        obj.insert("inputs".into(), Value::Array(o.inputs.iter().map(path).collect()));
    }
}

/// The config in its input schema, every default explicit and every path
/// absolute; feeding it back through `--config` reproduces the run.
pub fn resolved_json(cfg: &RunConfig) -> Result<Value> {
    let mut obj = Map::new();
    let mut put = |k: &str, v: Value| {
        obj.insert(k.to_string(), v);
    };
    let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| json!(p));
    put("task", json!(cfg.task.name()));
    put("name", json!(cfg.name));
    put("frontends", serde_json::to_value(&cfg.frontends)?);
    put(
        "kimcnn",
        json!({
            "widths": cfg.kimcnn.widths,
            "maps_per_width": cfg.kimcnn.maps_per_width,
            "num_classes": cfg.kimcnn.num_classes,
        }),
    );
    put("train", serde_json::to_value(&cfg.train)?);
    let mut probe = match serde_json::to_value(&cfg.probe.settings)? {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    probe.insert("kinds".into(), serde_json::to_value(&cfg.probe.kinds)?);
    probe.insert("pooling".into(), serde_json::to_value(cfg.probe.pooling)?);
    if let Some(p) = opt_path(&cfg.probe.train_store) {
        probe.insert("train_store".into(), p);
    }
    if let Some(p) = opt_path(&cfg.probe.test_store) {
        probe.insert("test_store".into(), p);
    }
    if let Some(s) = cfg.probe.split {
        probe.insert("split".into(), json!(s));
    }
    put("probe", Value::Object(probe));
    put("stores", json!(cfg.stores));
    put("bin_width", json!(cfg.bin_width));
    put("inputs", json!(cfg.inputs));
    for (k, p) in [
        ("train_data", &cfg.train_data),
        ("test_data", &cfg.test_data),
        ("checkpoint", &cfg.checkpoint),
        ("out", &cfg.out),
    ] {
        if let Some(v) = opt_path(p) {
            put(k, v);
        }
    }
    Ok(Value::Object(obj))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::path(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::path(path, e))
}

fn execute(task: Task, o: &Overrides) -> std::result::Result<i32, Failure> {
    let mut raw = match &o.config {
        Some(p) => load_raw(p)?,
        None => json!({}),
    };
    overlay(&mut raw, task, o);
    let (cfg, warnings) = validate_config(&raw, task)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let out = match (&cfg.out, task) {
        (Some(p), _) => Some(p.clone()),
        (None, Task::Selfcheck) => None,
        (None, _) => return Err(Failure::Usage("no output directory: pass --out or set `out`".into())),
    };
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
        let manifest = json!({
            "tool": TOOL,
            "version": VERSION,
            "seed": if task == Task::Probe { cfg.probe.settings.seed } else { cfg.train.seed },
            "config": resolved_json(&cfg)?,
        });
        write_json(&dir.join("manifest.json"), &manifest)?;
    }
    let code = match task {
        Task::Train => run_train(&cfg, out.as_deref().expect("out"))?,
        Task::Eval => run_eval(&cfg, out.as_deref().expect("out"))?,
        Task::Probe => run_probes(&cfg, out.as_deref().expect("out"))?,
        Task::Stats => run_stats(&cfg, out.as_deref().expect("out"))?,
        Task::Report => run_report(&cfg, out.as_deref().expect("out"))?,
        Task::Selfcheck => run_selfcheck(out.as_deref())?,
    };
    Ok(code)
}

fn footer(cfg: &RunConfig, history: &[EpochRecord], stopped: Option<usize>) -> String {
    let epochs = history.last().map_or(0, |r| r.epoch);
    let stop = match stopped {
        Some(e) => format!("early stop at epoch {e}"),
        None => format!("ran {epochs} epochs"),
    };
    format!("\nStopping: {}, {stop}.\n", cfg.train.stopping_label())
}

fn run_train(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let train_path = cfg.train_data.as_ref().expect("validated");
    let examples = load_dataset(train_path)?;
    let test = cfg.test_data.as_ref().map(load_dataset).transpose()?;
    let mut model = Classifier::build(cfg.frontends.clone(), cfg.kimcnn.clone(), &cfg.train, &examples)?;
    let ckpt_path = out.join("checkpoint.tedb");
    let mut seen = Vec::new();
    let outcome = train_with(&mut model, &examples, &cfg.train, &mut |rec, m| {
        seen.push(rec.clone());
        eprintln!(
            "epoch {:>3}  loss {:.6}  train F1 {:.4}  lr {:.3e}",
            rec.epoch, rec.train_loss, rec.train.f1, rec.lr
        );
        m.checkpoint(&cfg.train, rec.epoch, seen.clone()).save(&ckpt_path)
    })?;
    outcome.checkpoint.save(&ckpt_path)?;
    write_json(&out.join("history.json"), &outcome.history)?;
    let metrics = match &test {
        Some(t) => evaluate(&model, t)?,
        None => evaluate(&model, &examples)?,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    let mut md = report(&[(cfg.name.clone(), metrics)]);
    md.push_str(&footer(cfg, &outcome.history, outcome.stopped_epoch));
    write_text(&out.join("report.md"), &md)?;
    Ok(EXIT_OK)
}

fn run_eval(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let ckpt = Checkpoint::load(cfg.checkpoint.as_ref().expect("validated"))?;
    let mut model = Classifier::from_checkpoint(&ckpt)?;
    if !cfg.stores.is_empty() {
        model.replace_stores(&cfg.stores)?;
    }
    let test = load_dataset(cfg.test_data.as_ref().expect("validated"))?;
    let metrics = evaluate(&model, &test)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    write_text(&out.join("report.md"), &report(&[(cfg.name.clone(), metrics)]))?;
    Ok(EXIT_OK)
}

fn subset(f: &Features, rows: &[usize]) -> Result<Features> {
    Features::new(
        rows.iter().map(|&i| f.ids[i]).collect(),
        rows.iter().map(|&i| f.labels[i]).collect(),
        f.dim,
        rows.iter().flat_map(|&i| f.row(i).iter().copied()).collect(),
    )
}

fn run_probes(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let p = &cfg.probe;
    let all = pool_store(&read_interchange(p.train_store.as_ref().expect("validated"))?, p.pooling)?;
    let (train, test) = match (&p.test_store, p.split) {
        (Some(t), _) => (all, pool_store(&read_interchange(t)?, p.pooling)?),
        (None, Some(ratio)) => {
            let (tr, te) = split_indices(all.len(), ratio, derive_seed(p.settings.seed, STREAM_PROBE_SPLIT, 0))?;
            (subset(&all, &tr)?, subset(&all, &te)?)
        }
        (None, None) => unreachable!("validated"),
    };
    let mut results = BTreeMap::new();
    let mut rows = Vec::new();
    for &kind in &p.kinds {
        let m = run_probe(kind, &p.settings, &train, &test)?;
        eprintln!("{:<20} F1 {:.4}", kind.name(), m.f1);
        results.insert(kind.name().to_string(), m);
        rows.push((kind.name().to_string(), m));
    }
    write_json(&out.join("metrics.json"), &results)?;
    write_text(&out.join("report.md"), &report(&rows))?;
    Ok(EXIT_OK)
}

fn run_stats(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let examples = load_dataset(cfg.train_data.as_ref().expect("validated"))?;
    let bins = length_histogram(&examples, cfg.bin_width)?;
    write_text(&out.join("stats.tsv"), &histogram_tsv(&bins))?;
    Ok(EXIT_OK)
}

/// Rows for `report` from one metrics.json (flat or keyed by name) or a run
/// directory holding one.
pub fn read_metrics(input: &Path) -> Result<Vec<(String, Metrics)>> {
    let (dir, file) = if input.is_dir() {
        (input.to_path_buf(), input.join("metrics.json"))
    } else {
        (input.parent().unwrap_or(Path::new(".")).to_path_buf(), input.to_path_buf())
    };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::path(&file, e))?;
    let v: Value = serde_json::from_str(&text)?;
    if let Ok(m) = serde_json::from_value::<Metrics>(v.clone()) {
        let manifest_name = std::fs::read_to_string(dir.join("manifest.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<Value>(&t).ok())
            .and_then(|m| m["config"]["name"].as_str().map(str::to_string));
        let name = manifest_name
            .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| file.display().to_string());
        return Ok(vec![(name, m)]);
    }
    let map: BTreeMap<String, Metrics> = serde_json::from_value(v)
        .map_err(|e| Error::Data(format!("{}: not a metrics file: {e}", file.display())))?;
    Ok(map.into_iter().collect())
}

fn run_report(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let mut rows = Vec::new();
    for input in &cfg.inputs {
        rows.extend(read_metrics(input)?);
    }
    let md = report(&rows);
    print!("{md}");
    write_text(&out.join("report.md"), &md)?;
    Ok(EXIT_OK)
}

fn run_selfcheck(out: Option<&Path>) -> Result<i32> {
    let checks = selfcheck::run_all();
    let mut text = String::new();
    for c in &checks {
        text.push_str(&format!("{} {:<32} {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    text.push_str(&format!("{} of {} checks passed\n", checks.len() - failed, checks.len()));
    print!("{text}");
    let _ = std::io::stdout().flush();
    if let Some(dir) = out {
        write_text(&dir.join("selfcheck.txt"), &text)?;
    }
    Ok(if failed == 0 { EXIT_OK } else { EXIT_DATA })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(main_with(["tedb", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(main_with(["tedb", "frobnicate"]), EXIT_USAGE);
        assert_eq!(main_with(["tedb"]), EXIT_USAGE);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(main_with(["tedb", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_config_exits_1() {
        assert_eq!(main_with(["tedb", "train", "--config", "/no/such/run.json"]), EXIT_USAGE);
    }

    #[test]
    fn invalid_config_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.json");
        std::fs::write(&cfg, r#"{"train": {"lr": "fast"}}"#).unwrap();
        let out = dir.path().join("o");
        assert_eq!(
            main_with(["tedb", "train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]),
            EXIT_DATA
        );
    }

    #[test]
    fn numeric_errors_map_to_3() {
        assert_eq!(exit_code(&Error::NonFiniteLoss { step: 1, lr: 1.0, loss: f64::NAN }), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::NonFiniteGradient("w".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Data("x".into())), EXIT_DATA);
    }

    #[test]
    fn resolved_config_validates_to_itself() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.csv");
        crate::corpus::write_dataset(&data, &crate::corpus::synthetic_dataset(4, 0)).unwrap();
        let (cfg, _) = validate_config(&json!({"train_data": data, "train": {"seed": 9}}), Task::Train).unwrap();
        let again = resolved_json(&cfg).unwrap();
        let (cfg2, _) = validate_config(&again, Task::Train).unwrap();
        assert_eq!(cfg, cfg2);
    }
}
