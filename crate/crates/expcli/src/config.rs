//! Plain-text `key = value` experiment configs with `[section]` headers.
//!
//! Keys are unique across sections; a section header only documents where a
//! key lives, and a key placed under the wrong header is rejected. Overrides
//! use `key=value` or `section.key=value`.

use std::fmt::Write as _;
use std::path::PathBuf;

use introlearn::train::{DatasetKind, ExperimentConfig, LrSchedule, TrainMethod};
use introlearn::{Error, Result};
use sha2::{Digest, Sha256};

/// `(key, section)` in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("method", "run"),
    ("seed", "run"),
    ("trials", "run"),
    ("teacher", "run"),
    ("init-seeds", "run"),
    ("dataset", "data"),
    ("data-dir", "data"),
    ("subset", "data"),
    ("augment", "data"),
    ("synth-classes", "data"),
    ("synth-shape", "data"),
    ("synth-per-class", "data"),
    ("synth-test-per-class", "data"),
    ("synth-separation", "data"),
    ("arch", "model"),
    ("width-divisor", "model"),
    ("dropout", "model"),
    ("batch-size", "optim"),
    ("epochs", "optim"),
    ("lr", "optim"),
    ("lr-decay", "optim"),
    ("lr-factor", "optim"),
    ("momentum", "optim"),
    ("weight-decay", "optim"),
    ("warmup-epochs", "targets"),
    ("alpha", "targets"),
    ("lambda", "targets"),
    ("temperature", "targets"),
    ("beta", "targets"),
    ("ls-alpha", "targets"),
    ("cp-strength", "targets"),
    ("explain-method", "explain"),
    ("gradcam-layer", "explain"),
    ("explain-batch-stats", "explain"),
    ("explain-budget-mb", "explain"),
];

/// Keys that do not change what a single trial computes.
const NON_SEMANTIC: &[&str] = &["trials"];

pub const PRESETS: &[&str] = &["sec3-cnn", "sec5-resnet", "sec5-mlp"];

fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _)| *k == key).map(|(_, s)| *s)
}

fn key_err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Configuration(format!("{key}: {msg}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| key_err(key, format!("cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(key_err(key, format!("expected true or false, got `{v}`"))),
    }
}

fn optional(v: &str) -> Option<&str> {
    (!v.is_empty() && v != "none").then_some(v)
}

fn list<T: std::str::FromStr>(key: &str, v: &str, sep: char) -> Result<Vec<T>> {
    match optional(v) {
        None => Ok(Vec::new()),
        Some(v) => v.split(sep).map(|s| num(key, s.trim())).collect(),
    }
}

/// Applies one `key = value` assignment.
pub fn set(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    match key {
        "preset" => *cfg = preset(v)?,
        "method" => cfg.method = v.parse()?,
        "seed" => cfg.seed = num(key, v)?,
        "trials" => cfg.trials = num(key, v)?,
        "teacher" => cfg.teacher = optional(v).map(PathBuf::from),
        "init-seeds" => {
            cfg.init_seeds = match list::<u64>(key, v, ',')?.as_slice() {
                [] => None,
                [a, b] => Some([*a, *b]),
                _ => return Err(key_err(key, "expected two comma-separated seeds")),
            }
        }
        "dataset" => cfg.dataset = v.parse()?,
        "data-dir" => cfg.data_dir = optional(v).map(PathBuf::from),
        "subset" => cfg.subset = optional(v).map(|s| num(key, s)).transpose()?,
        "augment" => cfg.augment = flag(key, v)?,
        "synth-classes" => cfg.synth.classes = num(key, v)?,
        "synth-shape" => cfg.synth.shape = list(key, v, 'x')?,
        "synth-per-class" => cfg.synth.per_class = num(key, v)?,
        "synth-test-per-class" => cfg.synth_test_per_class = num(key, v)?,
        "synth-separation" => cfg.synth.separation = num(key, v)?,
        "arch" => cfg.arch = v.to_string(),
        "width-divisor" => cfg.width_divisor = num(key, v)?,
        "dropout" => cfg.dropout_rate = num(key, v)?,
        "batch-size" => cfg.batch_size = num(key, v)?,
        "epochs" => cfg.epochs = num(key, v)?,
        "lr" => cfg.schedule.initial = num(key, v)?,
        "lr-decay" => cfg.schedule.decay_points = list(key, v, ',')?,
        "lr-factor" => cfg.schedule.factor = num(key, v)?,
        "momentum" => cfg.momentum = num(key, v)?,
        "weight-decay" => cfg.weight_decay = num(key, v)?,
        "warmup-epochs" => cfg.warmup_epochs = num(key, v)?,
        "alpha" => cfg.alpha = num(key, v)?,
        "lambda" => cfg.lambda = num(key, v)?,
        "temperature" => cfg.temperature = num(key, v)?,
        "beta" => cfg.beta = num(key, v)?,
        "ls-alpha" => cfg.ls_alpha = num(key, v)?,
        "cp-strength" => cfg.cp_strength = num(key, v)?,
        "explain-method" => cfg.explain = v.parse()?,
        "gradcam-layer" => cfg.gradcam_layer = optional(v).map(|s| num(key, s)).transpose()?,
        "explain-batch-stats" => cfg.explain_batch_stats = flag(key, v)?,
        "explain-budget-mb" => cfg.explain_budget_mb = num(key, v)?,
        _ => {
            return Err(Error::Configuration(format!(
                "unknown config key `{key}`; valid keys: preset, {}",
                KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
            )))
        }
    }
    Ok(())
}

/// Parses `key=value` or `section.key=value`.
pub fn apply_override(cfg: &mut ExperimentConfig, assignment: &str) -> Result<()> {
    let (lhs, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Configuration(format!("override `{assignment}` is not key=value")))?;
    let lhs = lhs.trim();
    let key = match lhs.split_once('.') {
        Some((section, key)) => {
            check_section(key, section)?;
            key
        }
        None => lhs,
    };
    set(cfg, key, value)
}

fn check_section(key: &str, section: &str) -> Result<()> {
    match section_of(key) {
        Some(s) if s != section => Err(key_err(key, format!("belongs in [{s}], found in [{section}]"))),
        _ => Ok(()),
    }
}

/// Parses a config file body on top of the defaults. A `preset` key, if
/// present, must come first.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen: Vec<String> = Vec::new();
    let mut section: Option<String> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| Error::Configuration(format!("line {}: {msg}", n + 1));
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| at(format!("malformed section `{line}`")))?;
            section = Some(name.trim().to_string());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, got `{line}`")))?;
        let key = key.trim();
        if seen.iter().any(|k| k == key) {
            return Err(at(format!("duplicate key `{key}`")));
        }
        if key == "preset" && !seen.is_empty() {
            return Err(at("preset must precede every other key".into()));
        }
        if let Some(s) = &section {
            check_section(key, s).map_err(|e| at(e.to_string()))?;
        }
        set(&mut cfg, key, value).map_err(|e| at(e.to_string()))?;
        seen.push(key.to_string());
    }
    Ok(cfg)
}

/// Documented paper settings.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = ExperimentConfig::default();
    Ok(match name {
        // Plain CNNs on CIFAR-10 for the dark-knowledge study.
        "sec3-cnn" => ExperimentConfig {
            arch: "cnn-8".into(),
            dataset: DatasetKind::Cifar10,
            augment: true,
            batch_size: 128,
            epochs: 160,
            warmup_epochs: 80,
            schedule: LrSchedule::constant(0.01),
            momentum: 0.9,
            weight_decay: 0.0,
            beta: 0.5,
            temperature: 4.0,
            lambda: 0.1,
            trials: 5,
            ..base
        },
        "sec5-resnet" => ExperimentConfig {
            method: TrainMethod::Le,
            arch: "resnet8".into(),
            dataset: DatasetKind::Cifar10,
            augment: true,
            batch_size: 128,
            epochs: 160,
            warmup_epochs: 80,
            schedule: LrSchedule {
                initial: 0.1,
                decay_points: vec![80, 120],
                factor: 10.0,
            },
            momentum: 0.9,
            weight_decay: 5e-4,
            alpha: 0.9,
            lambda: 0.1,
            temperature: 4.0,
            explain: introlearn::explain::Method::GradCam,
            trials: 5,
            ..base
        },
        "sec5-mlp" => ExperimentConfig {
            method: TrainMethod::Le,
            arch: "mlp-1024".into(),
            dataset: DatasetKind::Mnist,
            augment: false,
            batch_size: 16,
            epochs: 50,
            warmup_epochs: 10,
            schedule: LrSchedule::constant(0.01),
            momentum: 0.9,
            weight_decay: 0.0,
            alpha: 0.9,
            lambda: 0.1,
            explain: introlearn::explain::Method::Grad,
            trials: 5,
            ..base
        },
        _ => {
            return Err(Error::Configuration(format!(
                "preset: unknown preset `{name}`; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    })
}

fn value_of(cfg: &ExperimentConfig, key: &str) -> String {
    let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
    let join = |v: &[usize], sep: &str| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(sep);
    match key {
        "method" => cfg.method.to_string(),
        "seed" => cfg.seed.to_string(),
        "trials" => cfg.trials.to_string(),
        "teacher" => opt(cfg.teacher.as_ref().map(|p| p.display().to_string())),
        "init-seeds" => opt(cfg.init_seeds.map(|[a, b]| format!("{a},{b}"))),
        "dataset" => cfg.dataset.to_string(),
        "data-dir" => opt(cfg.data_dir.as_ref().map(|p| p.display().to_string())),
        "subset" => opt(cfg.subset.map(|s| s.to_string())),
        "augment" => cfg.augment.to_string(),
        "synth-classes" => cfg.synth.classes.to_string(),
        "synth-shape" => join(&cfg.synth.shape, "x"),
        "synth-per-class" => cfg.synth.per_class.to_string(),
        "synth-test-per-class" => cfg.synth_test_per_class.to_string(),
        "synth-separation" => format!("{:?}", cfg.synth.separation),
        "arch" => cfg.arch.clone(),
        "width-divisor" => cfg.width_divisor.to_string(),
        "dropout" => format!("{:?}", cfg.dropout_rate),
        "batch-size" => cfg.batch_size.to_string(),
        "epochs" => cfg.epochs.to_string(),
        "lr" => format!("{:?}", cfg.schedule.initial),
        "lr-decay" => opt((!cfg.schedule.decay_points.is_empty()).then(|| join(&cfg.schedule.decay_points, ","))),
        "lr-factor" => format!("{:?}", cfg.schedule.factor),
        "momentum" => format!("{:?}", cfg.momentum),
        "weight-decay" => format!("{:?}", cfg.weight_decay),
        "warmup-epochs" => cfg.warmup_epochs.to_string(),
        "alpha" => format!("{:?}", cfg.alpha),
        "lambda" => format!("{:?}", cfg.lambda),
        "temperature" => format!("{:?}", cfg.temperature),
        "beta" => format!("{:?}", cfg.beta),
        "ls-alpha" => format!("{:?}", cfg.ls_alpha),
        "cp-strength" => format!("{:?}", cfg.cp_strength),
        "explain-method" => cfg.explain.to_string(),
        "gradcam-layer" => opt(cfg.gradcam_layer.map(|l| l.to_string())),
        "explain-batch-stats" => cfg.explain_batch_stats.to_string(),
        "explain-budget-mb" => cfg.explain_budget_mb.to_string(),
        _ => unreachable!("every key is rendered"),
    }
}

/// Canonical config text; `parse(&render(c)) == c`.
pub fn render(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut current = "";
    for &(key, section) in KEYS {
        if section != current {
            if !current.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "[{section}]");
            current = section;
        }
        let _ = writeln!(out, "{key} = {}", value_of(cfg, key));
    }
    out
}

/// SHA-256 over the canonical rendering of every semantic key.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut h = Sha256::new();
    for &(key, _) in KEYS.iter().filter(|(k, _)| !NON_SEMANTIC.contains(k)) {
        h.update(format!("{key}={}\n", value_of(cfg, key)));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
