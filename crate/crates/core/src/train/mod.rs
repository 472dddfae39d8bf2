//! Training procedures for every method: one-hot CE, the regularizers,
//! explanation-derived targets, teacher-based variants and mutual learning.

pub mod config;
pub mod eval;
pub mod loss;
pub mod optim;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{load_data, DatasetKind, ExperimentConfig, TrainMethod, METHODS};
pub use eval::{evaluate, Evaluation};
pub use loss::{ce_loss, confidence_penalty, LossOutput, LossTerm};
pub use optim::{lr_at, LrSchedule, Sgd};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::explain::{explain_all, ExplainConfig};
use crate::net::{ArchOptions, Network};
use crate::rng::Rng;
use crate::targets::{self, TargetDistribution};
use crate::tensor::{softmax, Tensor};

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_error: f64,
    /// Seconds since the start of the run; not serialized so that metric
    /// files stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network<f32>,
    /// Second network of a mutual-learning run.
    pub peer: Option<Network<f32>>,
    pub metrics: Vec<MetricsRecord>,
    pub peer_metrics: Vec<MetricsRecord>,
}

/// Random streams of a run, all derived from the trial seed.
struct Streams {
    batches: Rng,
    augment: Rng,
    targets: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            batches: Rng::with_stream(seed, 1),
            augment: Rng::with_stream(seed, 2),
            targets: Rng::with_stream(seed, 3),
        }
    }
}

pub fn build_network(cfg: &ExperimentConfig, sample_shape: &[usize], classes: usize, k: usize) -> Result<Network<f32>> {
    let opts = ArchOptions {
        dropout: (cfg.method == TrainMethod::Dropout).then_some(cfg.dropout_rate),
        width_divisor: cfg.width_divisor,
    };
    Network::build_with(&cfg.arch, sample_shape, classes, &opts, &mut Rng::new(cfg.init_seed(k)))
}

fn check_teacher(cfg: &ExperimentConfig, teacher: Option<&Network<f32>>, train: &Dataset) -> Result<()> {
    if !cfg.method.needs_teacher() {
        return Ok(());
    }
    let t = teacher.ok_or_else(|| {
        Error::Configuration(format!("teacher: method {} needs a teacher checkpoint", cfg.method))
    })?;
    if t.input_shape() != train.sample_shape() || t.num_classes() != train.classes() {
        return Err(Error::Configuration(format!(
            "teacher: expects {:?} with {} classes, data is {:?} with {}",
            t.input_shape(),
            t.num_classes(),
            train.sample_shape(),
            train.classes()
        )));
    }
    if matches!(cfg.method, TrainMethod::Ban | TrainMethod::BanL) && t.arch() != cfg.arch {
        return Err(Error::Configuration(format!(
            "teacher: born-again training needs a {} predecessor, got {}",
            cfg.arch,
            t.arch()
        )));
    }
    Ok(())
}

fn softened(logits: &Tensor<f32>, temperature: f64) -> Result<Vec<TargetDistribution>> {
    (0..logits.batch())
        .map(|i| targets::kd_targets(logits.row(i), temperature))
        .collect()
}

/// Loss terms, optional sample weights and confidence-penalty strength for
/// one mini-batch of a single-network method.
struct StepLoss {
    terms: Vec<LossTerm>,
    weights: Option<Vec<f64>>,
    penalty: f64,
}

fn step_loss(
    cfg: &ExperimentConfig,
    epoch: usize,
    net: &Network<f32>,
    teacher: Option<&Network<f32>>,
    x: &Tensor<f32>,
    labels: &[usize],
    rng: &mut Rng,
) -> Result<StepLoss> {
    use TrainMethod::*;
    let c = net.num_classes();
    let one_hot = |coef| LossTerm::one_hot(coef, labels, c);
    let plain = |terms| StepLoss {
        terms,
        weights: None,
        penalty: 0.0,
    };
    let teacher_logits = || teacher.expect("checked before training").forward_eval(x);
    Ok(match cfg.method {
        Ce | Dropout => plain(vec![one_hot(1.0)]),
        Cp => StepLoss {
            penalty: cfg.cp_strength,
            ..plain(vec![one_hot(1.0)])
        },
        Ls => plain(vec![LossTerm::new(
            1.0,
            labels
                .iter()
                .map(|&y| targets::ls_targets(y, cfg.ls_alpha, c))
                .collect::<Result<_>>()?,
        )]),
        Le | LePermut if epoch < cfg.warmup_epochs => plain(vec![one_hot(1.0)]),
        Le | LePermut => {
            let ecfg = ExplainConfig {
                method: cfg.explain,
                layer: cfg.gradcam_layer,
                batch_stats: cfg.explain_batch_stats,
                budget_bytes: cfg.explain_budget_mb << 20,
            };
            let sets = explain_all(net, x, &ecfg)?;
            let mut q = Vec::with_capacity(labels.len());
            for (set, &y) in sets.iter().zip(labels) {
                let t = targets::le_targets(set, y, cfg.alpha)?;
                q.push(if cfg.method == LePermut {
                    targets::permute_targets(&t, y, rng)
                } else {
                    t
                });
            }
            plain(vec![LossTerm::new(1.0, q), one_hot(cfg.lambda)])
        }
        Kd | BanL => plain(vec![
            LossTerm::new(1.0, softened(&teacher_logits()?, cfg.temperature)?),
            one_hot(cfg.lambda),
        ]),
        Ban => plain(vec![LossTerm::new(1.0, softened(&teacher_logits()?, cfg.temperature)?)]),
        Dkpp => {
            let q = softened(&teacher_logits()?, cfg.temperature)?;
            let permuted = q.iter().map(|t| targets::dkpp_targets(t, rng)).collect();
            plain(vec![LossTerm::new(1.0, permuted), one_hot(cfg.lambda)])
        }
        Cwtm | CwtmPermut => {
            let q = softened(&teacher_logits()?, 1.0)?;
            let w = if cfg.method == Cwtm {
                targets::cwtm_weights(&q)?
            } else {
                targets::cwtm_permut_weights(&q, rng)?
            };
            StepLoss {
                weights: Some(w.values().to_vec()),
                ..plain(vec![one_hot(1.0)])
            }
        }
        CwtmRandom => StepLoss {
            weights: Some(targets::cwtm_random_weights(labels.len(), cfg.beta, rng)?.values().to_vec()),
            ..plain(vec![one_hot(1.0)])
        },
        Dml => unreachable!("mutual learning has its own loop"),
    })
}

/// Running train statistics of one network over an epoch.
#[derive(Default)]
struct EpochStats {
    loss: f64,
    correct: usize,
    seen: usize,
}

impl EpochStats {
    fn add(&mut self, loss: f64, logits: &Tensor<f32>, labels: &[usize]) {
        self.loss += loss * labels.len() as f64;
        self.correct += eval::correct(logits, labels);
        self.seen += labels.len();
    }

    fn record(&self, epoch: usize, lr: f64, test: &Evaluation, start: Instant) -> MetricsRecord {
        MetricsRecord {
            epoch,
            lr,
            train_loss: self.loss / self.seen as f64,
            train_accuracy: 100.0 * self.correct as f64 / self.seen as f64,
            test_accuracy: test.accuracy,
            test_error: test.error,
            wall_time: start.elapsed().as_secs_f64(),
        }
    }
}

fn next_batch(cfg: &ExperimentConfig, ds: &Dataset, idx: &[usize], rng: &mut Rng) -> Result<(Tensor<f32>, Vec<usize>)> {
    let (mut x, y) = ds.gather(idx)?;
    if cfg.augment {
        data::augment(&mut x, rng)?;
    }
    Ok((x, y))
}

/// Runs the configured method. `observe` sees each metrics record as soon as
/// its epoch finishes (network index 0 or 1).
pub fn train_with(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    teacher: Option<&Network<f32>>,
    observe: &mut dyn FnMut(usize, &MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_teacher(cfg, teacher, train)?;
    if cfg.batch_size > train.len() {
        return Err(Error::Configuration(format!(
            "batch-size: {} exceeds the {} training samples",
            cfg.batch_size,
            train.len()
        )));
    }
    if cfg.method == TrainMethod::Dml {
        return train_mutual(cfg, train, test, observe);
    }
    let start = Instant::now();
    let mut net = build_network(cfg, train.sample_shape(), train.classes(), 0)?;
    let mut opt = Sgd::new(&net, cfg.momentum, cfg.weight_decay);
    let mut streams = Streams::new(cfg.seed);
    let mut dropout_rng = Rng::with_stream(cfg.init_seed(0), 1);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, &cfg.schedule);
        let mut stats = EpochStats::default();
        for idx in data::batches(train, cfg.batch_size, &mut streams.batches, false)? {
            let (x, y) = next_batch(cfg, train, &idx, &mut streams.augment)?;
            // Targets come from the weights before this step's update.
            let sl = step_loss(cfg, epoch, &net, teacher, &x, &y, &mut streams.targets)?;
            let (logits, tape) = net.forward_train(&x, &mut dropout_rng)?;
            let mut out = ce_loss(&logits, &sl.terms, sl.weights.as_deref())?;
            if sl.penalty != 0.0 {
                let cp = confidence_penalty(&logits, sl.penalty)?;
                out.loss += cp.loss;
                out.dlogits.add_assign(&cp.dlogits)?;
            }
            stats.add(out.loss, &logits, &y);
            let grads = net.backward_params(tape, &out.dlogits)?;
            opt.step(&mut net, &grads, lr)?;
        }
        let rec = stats.record(epoch, lr, &evaluate(&net, test)?, start);
        observe(0, &rec);
        metrics.push(rec);
    }
    Ok(TrainOutcome {
        net,
        peer: None,
        metrics,
        peer_metrics: Vec::new(),
    })
}

pub fn train(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, teacher: Option<&Network<f32>>) -> Result<TrainOutcome> {
    train_with(cfg, train, test, teacher, &mut |_, _| {})
}

/// Two networks trained together; each minimizes
/// `ce(p, y) + λ·KL(p_peer ‖ p)` against the peer's outputs on the same batch.
fn train_mutual(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    observe: &mut dyn FnMut(usize, &MetricsRecord),
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut nets = [
        build_network(cfg, train.sample_shape(), train.classes(), 0)?,
        build_network(cfg, train.sample_shape(), train.classes(), 1)?,
    ];
    let mut opts = [
        Sgd::new(&nets[0], cfg.momentum, cfg.weight_decay),
        Sgd::new(&nets[1], cfg.momentum, cfg.weight_decay),
    ];
    let mut drop = [
        Rng::with_stream(cfg.init_seed(0), 1),
        Rng::with_stream(cfg.init_seed(1), 1),
    ];
    let mut streams = Streams::new(cfg.seed);
    let mut metrics: [Vec<MetricsRecord>; 2] = Default::default();
    let c = train.classes();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, &cfg.schedule);
        let mut stats = [EpochStats::default(), EpochStats::default()];
        for idx in data::batches(train, cfg.batch_size, &mut streams.batches, false)? {
            let (x, y) = next_batch(cfg, train, &idx, &mut streams.augment)?;
            let (l0, t0) = nets[0].forward_train(&x, &mut drop[0])?;
            let (l1, t1) = nets[1].forward_train(&x, &mut drop[1])?;
            let probs = |l: &Tensor<f32>| -> Result<Vec<TargetDistribution>> {
                (0..l.batch())
                    .map(|i| {
                        let p = softmax(l.row(i), 1.0)?;
                        TargetDistribution::new(p.into_iter().map(f64::from).collect())
                    })
                    .collect()
            };
            let q = [probs(&l0)?, probs(&l1)?];
            let logits = [l0, l1];
            for (k, tape) in [t0, t1].into_iter().enumerate() {
                let peer = &q[1 - k];
                let terms = [LossTerm::one_hot(1.0, &y, c), LossTerm::new(cfg.lambda, peer.clone())];
                let out = ce_loss(&logits[k], &terms, None)?;
                // ce(p, q) = KL(q‖p) + H(q); report the KL form.
                let h: f64 = peer.iter().map(|t| loss::entropy(t.values())).sum::<f64>() / y.len() as f64;
                stats[k].add(out.loss - cfg.lambda * h, &logits[k], &y);
                let grads = nets[k].backward_params(tape, &out.dlogits)?;
                opts[k].step(&mut nets[k], &grads, lr)?;
            }
        }
        for k in 0..2 {
            let rec = stats[k].record(epoch, lr, &evaluate(&nets[k], test)?, start);
            observe(k, &rec);
            metrics[k].push(rec);
        }
    }
    let [net, peer] = nets;
    let [m0, m1] = metrics;
    Ok(TrainOutcome {
        net,
        peer: Some(peer),
        metrics: m0,
        peer_metrics: m1,
    })
}
