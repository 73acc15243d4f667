//! JSON run configuration: schema walk, defaults, path resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::embed::{FrontendSpec, ToyConfig};
use crate::error::{Error, Result};
use crate::kimcnn::KimCnnConfig;
use crate::train_eval::{Pooling, ProbeConfig, ProbeKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Train,
    Eval,
    Probe,
    Stats,
    Selfcheck,
    Report,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Eval => "eval",
            Task::Probe => "probe",
            Task::Stats => "stats",
            Task::Selfcheck => "selfcheck",
            Task::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSection {
    pub kinds: Vec<ProbeKind>,
    pub pooling: Pooling,
    pub train_store: Option<PathBuf>,
    pub test_store: Option<PathBuf>,
    /// Held-out share of the training store when no test store is given.
    pub split: Option<f64>,
    pub settings: ProbeConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            kinds: ProbeKind::ALL.to_vec(),
            pooling: Pooling::MeanTokens,
            train_store: None,
            test_store: None,
            split: None,
            settings: ProbeConfig::default(),
        }
    }
}

/// A validated run description with every default filled in and every
/// path absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub name: String,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub frontends: Vec<FrontendSpec>,
    pub kimcnn: KimCnnConfig,
    pub train: TrainConfig,
    pub probe: ProbeSection,
    pub checkpoint: Option<PathBuf>,
    /// Replacement embedding files for store frontends at eval time.
    pub stores: Vec<PathBuf>,
    pub bin_width: usize,
    /// Metrics files (or run directories) to tabulate.
    pub inputs: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy)]
enum Ty {
    UInt,
    Num,
    Bool,
    Str,
    Path,
    Enum(&'static [&'static str]),
    UIntList,
    PathList,
    EnumList(&'static [&'static str]),
    Frontends,
    Section(&'static [(&'static str, Ty)]),
}

const TASKS: &[&str] = &["train", "eval", "probe", "stats", "selfcheck", "report"];
const PROBES: &[&str] = &["logreg", "passive_aggressive", "knn3", "mlp", "linear_svm"];

const KIMCNN_FIELDS: &[(&str, Ty)] = &[("widths", Ty::UIntList), ("maps_per_width", Ty::UInt), ("num_classes", Ty::UInt)];

const TRAIN_FIELDS: &[(&str, Ty)] = &[
    ("batch_size", Ty::UInt),
    ("lr", Ty::Num),
    ("lr_min", Ty::Num),
    ("schedule", Ty::Enum(&["linear", "cosine_restarts"])),
    ("cycles", Ty::UInt),
    ("max_epochs", Ty::UInt),
    ("stopping", Ty::Enum(&["auto", "fixed"])),
    ("min_delta", Ty::Num),
    ("stop_metric", Ty::Enum(&["train_loss", "train_f1"])),
    ("seed", Ty::UInt),
    ("dropout_p", Ty::Num),
    ("weight_decay", Ty::Num),
    ("max_len", Ty::UInt),
    ("lowercase", Ty::Bool),
    ("min_count", Ty::UInt),
];

const PROBE_FIELDS: &[(&str, Ty)] = &[
    ("kinds", Ty::EnumList(PROBES)),
    ("pooling", Ty::Enum(&["mean_tokens", "first_token"])),
    ("train_store", Ty::Path),
    ("test_store", Ty::Path),
    ("split", Ty::Num),
    ("lr", Ty::Num),
    ("batch_size", Ty::UInt),
    ("max_epochs", Ty::UInt),
    ("min_delta", Ty::Num),
    ("weight_decay", Ty::Num),
    ("hidden", Ty::UInt),
    ("c", Ty::Num),
    ("seed", Ty::UInt),
];

const TOP_FIELDS: &[(&str, Ty)] = &[
    ("task", Ty::Enum(TASKS)),
    ("name", Ty::Str),
    ("train_data", Ty::Path),
    ("test_data", Ty::Path),
    ("frontends", Ty::Frontends),
    ("kimcnn", Ty::Section(KIMCNN_FIELDS)),
    ("train", Ty::Section(TRAIN_FIELDS)),
    ("probe", Ty::Section(PROBE_FIELDS)),
    ("checkpoint", Ty::Path),
    ("stores", Ty::PathList),
    ("bin_width", Ty::UInt),
    ("inputs", Ty::PathList),
    ("out", Ty::Path),
];

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn check(key: &str, v: &Value, ty: Ty, errs: &mut Vec<String>) {
    let mut want = |ok: bool, what: &str| {
        if !ok {
            errs.push(format!("{key}: expected {what}, got {}", kind_of(v)));
        }
    };
    match ty {
        Ty::UInt => want(v.is_u64(), "non-negative integer"),
        Ty::Num => want(v.is_number(), "number"),
        Ty::Bool => want(v.is_boolean(), "boolean"),
        Ty::Str | Ty::Path => want(v.is_string(), "string"),
        Ty::Enum(opts) => match v.as_str() {
            Some(s) if opts.contains(&s) => {}
            Some(s) => errs.push(format!("{key}: `{s}` is not one of {}", opts.join(", "))),
            None => want(false, "string"),
        },
        Ty::UIntList | Ty::PathList | Ty::EnumList(_) => match v.as_array() {
            Some(items) => {
                let item_ty = match ty {
                    Ty::UIntList => Ty::UInt,
                    Ty::PathList => Ty::Path,
                    Ty::EnumList(opts) => Ty::Enum(opts),
                    _ => unreachable!(),
                };
                for (i, item) in items.iter().enumerate() {
                    check(&format!("{key}[{i}]"), item, item_ty, errs);
                }
            }
            None => want(false, "array"),
        },
        Ty::Frontends => match v.as_array() {
            Some(items) => {
                for (i, item) in items.iter().enumerate() {
                    if let Err(e) = serde_json::from_value::<FrontendSpec>(item.clone()) {
                        errs.push(format!("{key}[{i}]: {e}"));
                    }
                }
            }
            None => want(false, "array"),
        },
        Ty::Section(fields) => match v.as_object() {
            Some(obj) => check_object(key, obj, fields, errs),
            None => want(false, "object"),
        },
    }
}

fn check_object(prefix: &str, obj: &Map<String, Value>, fields: &[(&str, Ty)], errs: &mut Vec<String>) {
    for (k, v) in obj {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match fields.iter().find(|(name, _)| name == k) {
            Some(&(_, ty)) => check(&key, v, ty, errs),
            None => errs.push(format!("{key}: unknown key")),
        }
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Rewrite every relative path string in a structurally valid config so it
/// is rooted at `base`.
pub fn resolve_paths(raw: &mut Value, base: &Path) {
    let Some(obj) = raw.as_object_mut() else { return };
    let fix = |v: &mut Value| {
        if let Some(s) = v.as_str() {
            *v = Value::String(resolve(base, s).to_string_lossy().into_owned());
        }
    };
    for key in ["train_data", "test_data", "checkpoint", "out"] {
        if let Some(v) = obj.get_mut(key) {
            fix(v);
        }
    }
    for key in ["stores", "inputs"] {
        if let Some(Value::Array(items)) = obj.get_mut(key) {
            items.iter_mut().for_each(fix);
        }
    }
    if let Some(Value::Object(p)) = obj.get_mut("probe") {
        for key in ["train_store", "test_store"] {
            if let Some(v) = p.get_mut(key) {
                fix(v);
            }
        }
    }
    if let Some(Value::Array(items)) = obj.get_mut("frontends") {
        for item in items {
            for kind in ["static", "store"] {
                if let Some(v) = item.get_mut(kind).and_then(|f| f.get_mut("path")) {
                    fix(v);
                }
            }
        }
    }
}

fn take<T: serde::de::DeserializeOwned + Default>(obj: &Map<String, Value>, key: &str) -> Result<T> {
    match obj.get(key) {
        Some(v) => Ok(serde_json::from_value(v.clone())?),
        None => Ok(T::default()),
    }
}

const TUNED_BATCH: std::ops::RangeInclusive<usize> = 4..=20;
const TUNED_LR: std::ops::RangeInclusive<f64> = 7.5e-6..=2.5e-5;

/// Validate `raw` for `task`: every type error, unknown key and
/// out-of-range value is reported together. Returns the resolved config
/// and warnings for values outside the tuned hyperparameter grid.
pub fn validate_config(raw: &Value, task: Task) -> Result<(RunConfig, Vec<String>)> {
    let Some(obj) = raw.as_object() else {
        return Err(Error::Config(vec![format!("config must be a JSON object, got {}", kind_of(raw))]));
    };
    let mut errs = Vec::new();
    check_object("", obj, TOP_FIELDS, &mut errs);
    if let Some(t) = obj.get("task").and_then(Value::as_str) {
        if t != task.name() && TASKS.contains(&t) {
            errs.push(format!("task: config is for `{t}` but `{}` was requested", task.name()));
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }

    let empty = Map::new();
    let section = |k: &str| obj.get(k).and_then(Value::as_object).unwrap_or(&empty);
    let path = |k: &str| obj.get(k).and_then(Value::as_str).map(PathBuf::from);
    let paths = |k: &str| -> Vec<PathBuf> {
        obj.get(k)
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).map(PathBuf::from).collect())
            .unwrap_or_default()
    };

    let train: TrainConfig = serde_json::from_value(Value::Object(section("train").clone()))?;
    let mut kimcnn: KimCnnConfig = serde_json::from_value(Value::Object(section("kimcnn").clone()))?;
    kimcnn.dropout_p = train.dropout_p;
    let frontends: Vec<FrontendSpec> = match obj.get("frontends") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => vec![FrontendSpec::Toy(ToyConfig::default())],
    };
    let p = section("probe");
    let mut settings = Map::new();
    for (k, v) in p {
        if !["kinds", "pooling", "train_store", "test_store", "split"].contains(&k.as_str()) {
            settings.insert(k.clone(), v.clone());
        }
    }
    let probe = ProbeSection {
        kinds: match p.get("kinds") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => ProbeKind::ALL.to_vec(),
        },
        pooling: match p.get("pooling") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => Pooling::MeanTokens,
        },
        train_store: p.get("train_store").and_then(Value::as_str).map(PathBuf::from),
        test_store: p.get("test_store").and_then(Value::as_str).map(PathBuf::from),
        split: p.get("split").and_then(Value::as_f64),
        settings: serde_json::from_value(Value::Object(settings))?,
    };
    let cfg = RunConfig {
        task,
        name: obj.get("name").and_then(Value::as_str).map_or_else(|| default_name(task, &probe), str::to_string),
        train_data: path("train_data"),
        test_data: path("test_data"),
        frontends,
        kimcnn,
        train,
        probe,
        checkpoint: path("checkpoint"),
        stores: paths("stores"),
        bin_width: take::<Option<usize>>(obj, "bin_width")?.unwrap_or(10),
        inputs: paths("inputs"),
        out: path("out"),
    };

    let mut errs = Vec::new();
    errs.extend(cfg.train.violations().into_iter().map(|e| format!("train: {e}")));
    // dropout is reported under train; input_dim comes from the frontend
    let head_check = KimCnnConfig {
        input_dim: 1,
        dropout_p: 0.0,
        ..cfg.kimcnn.clone()
    };
    errs.extend(head_check.violations().into_iter().map(|e| format!("kimcnn: {e}")));
    if cfg.frontends.is_empty() || cfg.frontends.len() > 2 {
        errs.push(format!("frontends: expected 1 or 2, got {}", cfg.frontends.len()));
    }
    for (i, f) in cfg.frontends.iter().enumerate() {
        if let FrontendSpec::Toy(t) = f {
            if let Err(e) = t.validate() {
                errs.push(format!("frontends[{i}]: {e}"));
            }
        }
    }
    let s = &cfg.probe.settings;
    if !(s.lr.is_finite() && s.lr > 0.0) {
        errs.push(format!("probe.lr: {} must be positive", s.lr));
    }
    if s.batch_size == 0 || s.max_epochs == 0 || s.hidden == 0 {
        errs.push("probe: batch_size, max_epochs and hidden must be at least 1".into());
    }
    if !(s.c.is_finite() && s.c > 0.0) {
        errs.push(format!("probe.c: {} must be positive", s.c));
    }
    if let Some(r) = cfg.probe.split {
        if !(r > 0.0 && r < 1.0) {
            errs.push(format!("probe.split: {r} outside (0,1)"));
        }
    }
    if cfg.bin_width == 0 {
        errs.push("bin_width: must be at least 1".into());
    }
    check_task_inputs(&cfg, &mut errs);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }

    let mut warnings = Vec::new();
    if task == Task::Train {
        if !TUNED_BATCH.contains(&cfg.train.batch_size) {
            warnings.push(format!("train.batch_size {} is outside the tuned range 4-20", cfg.train.batch_size));
        }
        if !TUNED_LR.contains(&cfg.train.lr) {
            warnings.push(format!("train.lr {} is outside the tuned range 7.5e-6 to 2.5e-5", cfg.train.lr));
        }
        if cfg.train.schedule == crate::optim::ScheduleKind::CosineRestarts && ![5, 8].contains(&cfg.train.cycles) {
            warnings.push(format!("train.cycles {} is not one of the tuned values 5 or 8", cfg.train.cycles));
        }
    }
    Ok((cfg, warnings))
}

fn default_name(task: Task, probe: &ProbeSection) -> String {
    match task {
        Task::Probe if probe.kinds.len() == 1 => probe.kinds[0].name().to_string(),
        _ => "kimcnn".to_string(),
    }
}

fn check_task_inputs(cfg: &RunConfig, errs: &mut Vec<String>) {
    let mut need = |key: &str, p: &Option<PathBuf>| match p {
        None => errs.push(format!("{key}: required for `{}`", cfg.task.name())),
        Some(p) if !p.exists() => errs.push(format!("{key}: {} does not exist", p.display())),
        Some(_) => {}
    };
    match cfg.task {
        Task::Train => need("train_data", &cfg.train_data),
        Task::Eval => {
            need("checkpoint", &cfg.checkpoint);
            need("test_data", &cfg.test_data);
        }
        Task::Probe => {
            need("probe.train_store", &cfg.probe.train_store);
            if cfg.probe.test_store.is_some() {
                need("probe.test_store", &cfg.probe.test_store);
            } else if cfg.probe.split.is_none() {
                errs.push("probe: give test_store or split".into());
            }
        }
        Task::Stats => need("train_data", &cfg.train_data),
        Task::Report => {
            if cfg.inputs.is_empty() {
                errs.push("inputs: required for `report`".into());
            }
        }
        Task::Selfcheck => {}
    }
    let mut exists = |key: String, p: &Path| {
        if !p.exists() {
            errs.push(format!("{key}: {} does not exist", p.display()));
        }
    };
    if matches!(cfg.task, Task::Train) {
        if let Some(p) = &cfg.test_data {
            exists("test_data".into(), p);
        }
        for (i, f) in cfg.frontends.iter().enumerate() {
            match f {
                FrontendSpec::Static { path, .. } | FrontendSpec::Store { path } => {
                    exists(format!("frontends[{i}].path"), path)
                }
                FrontendSpec::Toy(_) => {}
            }
        }
    }
    for (i, p) in cfg.stores.iter().enumerate() {
        exists(format!("stores[{i}]"), p);
    }
    for (i, p) in cfg.inputs.iter().enumerate() {
        exists(format!("inputs[{i}]"), p);
    }
}
