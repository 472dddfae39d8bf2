//! Run configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::explain::Method;
use crate::net::Arch;
use crate::rng::Rng;

use super::optim::LrSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMethod {
    Ce,
    Ls,
    Cp,
    Dropout,
    Le,
    LePermut,
    Kd,
    Cwtm,
    CwtmPermut,
    CwtmRandom,
    Dkpp,
    Ban,
    BanL,
    Dml,
}

pub const METHODS: &[(&str, TrainMethod)] = &[
    ("ce", TrainMethod::Ce),
    ("ls", TrainMethod::Ls),
    ("cp", TrainMethod::Cp),
    ("dropout", TrainMethod::Dropout),
    ("le", TrainMethod::Le),
    ("le-permut", TrainMethod::LePermut),
    ("kd", TrainMethod::Kd),
    ("cwtm", TrainMethod::Cwtm),
    ("cwtm-permut", TrainMethod::CwtmPermut),
    ("cwtm-random", TrainMethod::CwtmRandom),
    ("dkpp", TrainMethod::Dkpp),
    ("ban", TrainMethod::Ban),
    ("ban+l", TrainMethod::BanL),
    ("dml", TrainMethod::Dml),
];

impl TrainMethod {
    pub fn name(self) -> &'static str {
        METHODS.iter().find(|(_, m)| *m == self).map(|(n, _)| *n).expect("listed")
    }

    /// Methods that read a frozen network's outputs.
    pub fn needs_teacher(self) -> bool {
        use TrainMethod::*;
        matches!(self, Kd | Cwtm | CwtmPermut | Dkpp | Ban | BanL)
    }

    pub fn uses_explanations(self) -> bool {
        matches!(self, TrainMethod::Le | TrainMethod::LePermut)
    }
}

impl FromStr for TrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        METHODS.iter().find(|(n, _)| *n == s).map(|(_, m)| *m).ok_or_else(|| {
            let names: Vec<&str> = METHODS.iter().map(|(n, _)| *n).collect();
            Error::Configuration(format!("unknown method `{s}`; valid methods: {}", names.join(", ")))
        })
    }
}

impl fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Synth,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "synth" => Ok(DatasetKind::Synth),
            _ => Err(Error::Configuration(format!(
                "unknown dataset `{s}`; expected mnist, cifar10 or synth"
            ))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Synth => "synth",
        })
    }
}

/// Every hyperparameter of a run. `seed` is the seed of this trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: TrainMethod,
    pub arch: String,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Train on the first `n` training images only.
    pub subset: Option<usize>,
    pub synth: SynthSpec,
    pub synth_test_per_class: usize,
    pub augment: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub beta: f64,
    pub ls_alpha: f64,
    pub cp_strength: f64,
    pub dropout_rate: f32,
    pub width_divisor: usize,
    pub explain: Method,
    pub gradcam_layer: Option<usize>,
    pub explain_batch_stats: bool,
    pub explain_budget_mb: usize,
    pub seed: u64,
    pub trials: usize,
    pub teacher: Option<PathBuf>,
    /// Explicit parameter-initialization seeds for the (first, second) network.
    pub init_seeds: Option<[u64; 2]>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: TrainMethod::Ce,
            arch: "mlp-small".into(),
            dataset: DatasetKind::Synth,
            data_dir: None,
            subset: None,
            synth: SynthSpec {
                classes: 4,
                shape: vec![1, 8, 8],
                per_class: 32,
                separation: 6.0,
            },
            synth_test_per_class: 16,
            augment: false,
            batch_size: 16,
            epochs: 3,
            warmup_epochs: 1,
            schedule: LrSchedule::constant(0.01),
            momentum: 0.9,
            weight_decay: 0.0,
            alpha: 0.9,
            lambda: 0.1,
            temperature: 4.0,
            beta: 0.5,
            ls_alpha: 0.9,
            cp_strength: 0.5,
            dropout_rate: 0.1,
            width_divisor: 1,
            explain: Method::Grad,
            gradcam_layer: None,
            explain_batch_stats: false,
            explain_budget_mb: 256,
            seed: 0,
            trials: 1,
            teacher: None,
            init_seeds: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Configuration(format!("{key}: {msg}")));
        self.arch.parse::<Arch>()?;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha", format!("must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.ls_alpha > 0.0 && self.ls_alpha <= 1.0) {
            return bad("ls-alpha", format!("must lie in (0, 1], got {}", self.ls_alpha));
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", format!("must be non-negative, got {}", self.lambda));
        }
        if !(self.temperature > 0.0) {
            return bad("temperature", format!("must be positive, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad("beta", format!("must lie in [0, 1), got {}", self.beta));
        }
        if !(self.cp_strength >= 0.0) {
            return bad("cp-strength", format!("must be non-negative, got {}", self.cp_strength));
        }
        if !(self.dropout_rate >= 0.0 && self.dropout_rate < 1.0) {
            return bad("dropout", format!("must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.batch_size == 0 {
            return bad("batch-size", "must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if self.trials == 0 {
            return bad("trials", "must be positive".into());
        }
        if self.width_divisor == 0 {
            return bad("width-divisor", "must be positive".into());
        }
        if !(self.schedule.initial > 0.0) || !(self.schedule.factor > 0.0) {
            return bad("lr", "initial rate and decay factor must be positive".into());
        }
        let d = &self.schedule.decay_points;
        if d.windows(2).any(|w| w[0] >= w[1]) || d.last().is_some_and(|&l| l >= self.epochs) {
            return bad("lr-decay", format!("points {d:?} must increase strictly and stay below {}", self.epochs));
        }
        if self.method.needs_teacher() && self.teacher.is_none() {
            return bad("teacher", format!("method {} needs a teacher checkpoint", self.method));
        }
        if self.dataset == DatasetKind::Synth && self.synth_test_per_class == 0 {
            return bad("synth-test-per-class", "must be positive".into());
        }
        if self.dataset != DatasetKind::Synth && self.data_dir.is_none() {
            return bad("data-dir", format!("dataset {} needs a data directory", self.dataset));
        }
        Ok(())
    }

    /// Initialization seed of network `k` (0 or 1).
    pub fn init_seed(&self, k: usize) -> u64 {
        match self.init_seeds {
            Some(s) => s[k],
            None => Rng::with_stream(self.seed, 100 + k as u64).next_u64(),
        }
    }
}

/// Train and test splits as configured, standardized with training-split
/// constants (synthetic data is left as drawn).
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let dir = || {
        cfg.data_dir
            .clone()
            .ok_or_else(|| Error::Configuration("data-dir is required".into()))
    };
    let (mut train, mut test) = match cfg.dataset {
        DatasetKind::Mnist => data::load_mnist(&dir()?)?,
        DatasetKind::Cifar10 => data::load_cifar10(&dir()?)?,
        DatasetKind::Synth => {
            // Draw train and test together so they share cluster centres.
            let mut spec = cfg.synth.clone();
            spec.per_class += cfg.synth_test_per_class;
            let all = data::synth(&spec, cfg.seed)?;
            let n_train = cfg.synth.classes * cfg.synth.per_class;
            let train_idx: Vec<usize> = (0..n_train).collect();
            let test_idx: Vec<usize> = (n_train..all.len()).collect();
            let split = |idx: &[usize]| -> Result<Dataset> {
                let (x, y) = all.gather(idx)?;
                Dataset::new(x, y, all.class_names.clone())
            };
            return Ok((split(&train_idx)?, split(&test_idx)?));
        }
    };
    if let Some(n) = cfg.subset {
        train = train.subset(n)?;
    }
    data::standardize(&mut train, &mut test);
    Ok((train, test))
}
