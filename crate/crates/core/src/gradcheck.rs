//! Finite-difference and closed-form gradient verification.
//!
//! Everything here evaluates gradients through forward passes only (central
//! differences in `f64`) or through an independent algebraic route, so it can
//! be pointed at the backward implementation it is checking.

use serde::Serialize;

use crate::error::Result;
use crate::net::{ArchOptions, BackwardRequest, ForwardOpts, Network, ReluMode};
use crate::rng::Rng;
use crate::targets::{self, TargetDistribution};
use crate::tensor::{softmax, Tensor};
use crate::train::loss::{ce_loss, confidence_penalty, LossTerm};

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-6;
/// Magnitudes below this are compared on an absolute scale: relative error
/// is `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU or max-pool boundary.
    pub skipped: usize,
}

impl CheckReport {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, numeric));
        self.checked += 1;
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.checked > 0 && self.skipped * 5 <= self.checked + self.skipped
    }

    fn merge(&mut self, other: &CheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

fn probe(net: &Network<f64>, x: &Tensor<f64>, seed: &Tensor<f64>, batch_stats: bool) -> Result<(f64, u64)> {
    let opts = ForwardOpts {
        batch_stats,
        ..ForwardOpts::eval()
    };
    let (y, tape) = net.forward(x, opts)?;
    Ok((y.dot(seed)?, tape.activation_signature()))
}

fn sample_coords(len: usize, per_tensor: usize, rng: &mut Rng) -> Vec<usize> {
    if len <= per_tensor {
        (0..len).collect()
    } else {
        (0..per_tensor).map(|_| rng.below(len)).collect()
    }
}

/// Checks parameter gradients of `⟨seed, logits⟩` by central differences.
pub fn check_param_grads(
    net: &Network<f64>,
    x: &Tensor<f64>,
    seed: &Tensor<f64>,
    batch_stats: bool,
    per_tensor: usize,
    rng: &mut Rng,
) -> Result<CheckReport> {
    check_param_grads_with(net, x, seed, batch_stats, per_tensor, 0.0, rng)
}

/// As [`check_param_grads`], with `bias` added to every analytic gradient
/// (a negative control for the checker itself).
pub fn check_param_grads_with(
    net: &Network<f64>,
    x: &Tensor<f64>,
    seed: &Tensor<f64>,
    batch_stats: bool,
    per_tensor: usize,
    bias: f64,
    rng: &mut Rng,
) -> Result<CheckReport> {
    let mut report = CheckReport::new("params");
    let opts = ForwardOpts {
        batch_stats,
        ..ForwardOpts::eval()
    };
    let (_, tape) = net.forward(x, opts)?;
    let base_sig = tape.activation_signature();
    let grads = net.backward_params(tape, seed)?;
    let mut probe_net = net.clone();
    for (t, grad) in grads.iter().enumerate() {
        for idx in sample_coords(grad.len(), per_tensor, rng) {
            let orig = probe_net.params().nth(t).expect("param").data()[idx];
            let mut eval_at = |v: f64| -> Result<(f64, u64)> {
                probe_net.params_mut().nth(t).expect("param").data_mut()[idx] = v;
                probe(&probe_net, x, seed, batch_stats)
            };
            let (fp, sp) = eval_at(orig + FD_STEP)?;
            let (fm, sm) = eval_at(orig - FD_STEP)?;
            eval_at(orig)?;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            report.record(grad.data()[idx] + bias, (fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

/// Checks the standard-mode input gradient of `⟨seed, logits⟩`.
pub fn check_input_grads(
    net: &Network<f64>,
    x: &Tensor<f64>,
    seed: &Tensor<f64>,
    batch_stats: bool,
    samples: usize,
    rng: &mut Rng,
) -> Result<CheckReport> {
    let mut report = CheckReport::new("input");
    let opts = ForwardOpts {
        batch_stats,
        ..ForwardOpts::eval()
    };
    let (_, tape) = net.forward(x, opts)?;
    let base_sig = tape.activation_signature();
    let g = net
        .backward(tape, seed, BackwardRequest::input(ReluMode::Standard))?
        .input
        .expect("requested");
    let mut xp = x.clone();
    for idx in sample_coords(x.len(), samples, rng) {
        let orig = x.data()[idx];
        xp.data_mut()[idx] = orig + FD_STEP;
        let (fp, sp) = probe(net, &xp, seed, batch_stats)?;
        xp.data_mut()[idx] = orig - FD_STEP;
        let (fm, sm) = probe(net, &xp, seed, batch_stats)?;
        xp.data_mut()[idx] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        report.record(g.data()[idx], (fp - fm) / (2.0 * FD_STEP));
    }
    Ok(report)
}

/// Reduced-width configuration of a named architecture used for checking.
#[derive(Debug, Clone)]
pub struct StubSpec {
    pub arch: String,
    pub input_shape: Vec<usize>,
    pub width_divisor: usize,
    pub batch: usize,
    pub classes: usize,
}

impl StubSpec {
    pub fn for_arch(arch: &str) -> Self {
        let (input_shape, width_divisor) = match arch {
            a if a.starts_with("mlp") => (vec![1, 8, 8], if a == "mlp-1024" { 32 } else { 1 }),
            a if a.starts_with("cnn") => (vec![3, 8, 8], 16),
            _ => (vec![3, 32, 32], 8),
        };
        Self {
            arch: arch.to_string(),
            input_shape,
            width_divisor,
            batch: 4,
            classes: 5,
        }
    }
}

/// Full finite-difference suite on one architecture stub, with batchnorm in
/// both batch-statistics and running-statistics modes.
pub fn check_architecture(stub: &StubSpec, seed: u64) -> Result<Vec<CheckReport>> {
    check_architecture_with(stub, seed, 0.0)
}

pub fn check_architecture_with(stub: &StubSpec, seed: u64, corrupt: f64) -> Result<Vec<CheckReport>> {
    let mut rng = Rng::new(seed);
    let opts = ArchOptions {
        dropout: None,
        width_divisor: stub.width_divisor,
    };
    let mut net = Network::<f64>::build_with(&stub.arch, &stub.input_shape, stub.classes, &opts, &mut rng)?;
    perturb_affine(&mut net, &mut rng);
    let mut shape = vec![stub.batch];
    shape.extend_from_slice(&stub.input_shape);
    let x = Tensor::from_fn(shape, |_| rng.normal());
    let seed_t = Tensor::from_fn(vec![stub.batch, stub.classes], |_| rng.normal());
    let mut out = Vec::new();
    for batch_stats in [true, false] {
        if !batch_stats && !has_batchnorm(&net) {
            continue;
        }
        let tag = if batch_stats { "train-bn" } else { "eval-bn" };
        let mut p = check_param_grads_with(&net, &x, &seed_t, batch_stats, 6, corrupt, &mut rng)?;
        p.name = format!("{} params ({tag})", stub.arch);
        let mut i = check_input_grads(&net, &x, &seed_t, batch_stats, 24, &mut rng)?;
        i.name = format!("{} input ({tag})", stub.arch);
        out.push(p);
        out.push(i);
    }
    Ok(out)
}

fn has_batchnorm(net: &Network<f64>) -> bool {
    net.buffer_groups().iter().any(|b| !b.is_empty())
}

/// Moves batchnorm scale/shift, biases and running stats away from their
/// initial constants so every term of the backward pass is exercised.
pub fn perturb_affine(net: &mut Network<f64>, rng: &mut Rng) {
    for p in net.params_mut() {
        if p.ndim() == 1 {
            for v in p.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }
    let groups: Vec<Vec<Tensor<f64>>> = net
        .buffer_groups()
        .iter()
        .map(|g| {
            g.iter()
                .enumerate()
                .map(|(i, t)| {
                    t.map(|v| if i % 2 == 0 { v + 0.2 } else { v * 1.5 })
                })
                .collect()
        })
        .collect();
    let rebuilt = Network::from_parts(
        net.arch(),
        net.input_shape(),
        net.num_classes(),
        net.layers().to_vec(),
        net.param_groups().to_vec(),
        groups,
    )
    .expect("same shapes");
    *net = rebuilt;
}

fn random_dists(b: usize, c: usize, rng: &mut Rng) -> Vec<TargetDistribution> {
    (0..b)
        .map(|_| {
            let logits: Vec<f64> = (0..c).map(|_| 3.0 * rng.normal()).collect();
            TargetDistribution::new(softmax(&logits, 1.0).expect("finite")).expect("valid")
        })
        .collect()
}

/// Gradient of `Σ_i w_i Σ_terms coef·ce(p_i, t)` obtained by back-propagating
/// `∂L/∂p = -w·t/p` through the softmax Jacobian.
pub fn softmax_chain_dlogits(logits: &Tensor<f64>, terms: &[LossTerm], weights: &[f64]) -> Tensor<f64> {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(vec![b, c]);
    for i in 0..b {
        let p = softmax(logits.row(i), 1.0).expect("finite");
        let mut gp = vec![0.0; c];
        for term in terms {
            for j in 0..c {
                gp[j] -= weights[i] * term.coef * term.targets[i].values()[j] / p[j];
            }
        }
        let inner: f64 = gp.iter().zip(&p).map(|(g, q)| g * q).sum();
        for j in 0..c {
            out.row_mut(i)[j] = p[j] * (gp[j] - inner);
        }
    }
    out
}

/// Closed-form `dlogits` versus the softmax-chain route for one-hot (CE),
/// teacher (KD), teacher-weighted (CWTM) and permuted-teacher (DKPP) targets,
/// plus finite differences of the confidence penalty.
pub fn check_loss_identities(batches: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = Rng::new(seed);
    let mut reports: Vec<CheckReport> = ["ce", "kd", "cwtm", "dkpp", "confidence-penalty"]
        .iter()
        .map(|n| CheckReport::new(format!("dlogits {n}")))
        .collect();
    for _ in 0..batches {
        let b = 1 + rng.below(8);
        let c = 2 + rng.below(9);
        let logits = Tensor::from_fn(vec![b, c], |_| 2.0 * rng.normal());
        let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
        let onehot: Vec<TargetDistribution> = labels.iter().map(|&y| TargetDistribution::one_hot(y, c)).collect();
        let teacher = random_dists(b, c, &mut rng);
        let uniform = vec![1.0 / b as f64; b];
        let cwtm = targets::cwtm_weights(&teacher)?;
        let dkpp: Vec<TargetDistribution> = teacher.iter().map(|q| targets::dkpp_targets(q, &mut rng)).collect();
        let cases: [(usize, Vec<TargetDistribution>, Vec<f64>); 4] = [
            (0, onehot.clone(), uniform.clone()),
            (1, teacher, uniform.clone()),
            (2, onehot, cwtm.values().to_vec()),
            (3, dkpp, uniform.clone()),
        ];
        for (slot, tgt, w) in cases {
            let terms = [LossTerm::new(1.0, tgt)];
            let closed = ce_loss(&logits, &terms, Some(&w))?;
            let chained = softmax_chain_dlogits(&logits, &terms, &w);
            let r = &mut reports[slot];
            for (a, n) in closed.dlogits.data().iter().zip(chained.data()) {
                r.record(*a, *n);
            }
            // Closed form is w_i (p_i - t_i) exactly.
            for i in 0..b {
                let p = softmax(logits.row(i), 1.0)?;
                for j in 0..c {
                    let want = w[i] * (p[j] - terms[0].targets[i].values()[j]);
                    r.record(closed.dlogits.row(i)[j], want);
                }
            }
        }
        let strength = rng.uniform_range(0.1, 2.0);
        let cp = confidence_penalty(&logits, strength)?;
        let r = &mut reports[4];
        let mut lp = logits.clone();
        for idx in 0..logits.len() {
            let orig = logits.data()[idx];
            lp.data_mut()[idx] = orig + FD_STEP;
            let fp = confidence_penalty(&lp, strength)?.loss;
            lp.data_mut()[idx] = orig - FD_STEP;
            let fm = confidence_penalty(&lp, strength)?.loss;
            lp.data_mut()[idx] = orig;
            r.record(cp.dlogits.data()[idx], (fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(reports)
}

/// Summary of a full gradient-check run.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSummary {
    pub reports: Vec<CheckReport>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(CheckReport::passed)
    }

    pub fn overall(&self) -> CheckReport {
        let mut all = CheckReport::new("overall");
        for r in &self.reports {
            all.merge(r);
        }
        all
    }
}

/// What `gradcheck` runs for one architecture: the finite-difference suite and
/// the loss identities.
/// A non-zero `corrupt` offsets every analytic parameter gradient.
pub fn run_suite(arch: &str, seed: u64, corrupt: f64) -> Result<GradcheckSummary> {
    let mut reports = check_architecture_with(&StubSpec::for_arch(arch), seed, corrupt)?;
    reports.extend(check_loss_identities(100, seed)?);
    Ok(GradcheckSummary { reports })
}
