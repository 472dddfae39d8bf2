//! Training-target construction: one-hot, label smoothing, explanation-derived
//! soft targets, softened teacher outputs, permuted variants, and per-sample
//! weights derived from teacher confidence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{cosine, ExplanationSet};
use crate::rng::Rng;
use crate::tensor::{argmax, softmax, Scalar};

pub const SUM_TOLERANCE: f64 = 1e-6;

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    values: Vec<f64>,
}

impl TargetDistribution {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Parameter("empty target distribution".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter(format!("target has negative or non-finite entries: {values:?}")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Parameter(format!("target sums to {sum}, not 1")));
        }
        Ok(Self { values })
    }

    pub fn one_hot(class: usize, classes: usize) -> Self {
        let mut values = vec![0.0; classes];
        values[class] = 1.0;
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }

    pub fn max(&self) -> f64 {
        self.values[self.argmax()]
    }
}

/// Per-sample loss weights, normalized over the mini-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    values: Vec<f64>,
}

impl SampleWeights {
    pub fn uniform(b: usize) -> Self {
        Self {
            values: vec![1.0 / b as f64; b],
        }
    }

    fn normalized(raw: Vec<f64>) -> Result<Self> {
        let total: f64 = raw.iter().sum();
        if raw.is_empty() || !(total > 0.0) || !total.is_finite() {
            return Err(Error::Parameter(format!("cannot normalize sample weights {raw:?}")));
        }
        Ok(Self {
            values: raw.into_iter().map(|v| v / total).collect(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("alpha must be in (0, 1], got {alpha}")))
    }
}

/// Soft targets from the cosine similarity of each class's explanation to
/// the ground-truth class's explanation. `cos_to_gt[k]` is ignored at `gt`.
///
/// The ground truth gets `alpha`; the remaining `1 - alpha` is split across
/// the other classes in proportion to `cos + 1`.
pub fn le_targets_from_cosines(cos_to_gt: &[f64], gt: usize, alpha: f64) -> Result<TargetDistribution> {
    let c = cos_to_gt.len();
    if c < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {c}")));
    }
    if gt >= c {
        return Err(Error::Parameter(format!("ground-truth class {gt} out of range {c}")));
    }
    check_alpha(alpha)?;
    let shifted: Vec<f64> = cos_to_gt.iter().map(|v| v.clamp(-1.0, 1.0) + 1.0).collect();
    let denom: f64 = shifted.iter().enumerate().filter(|(k, _)| *k != gt).map(|(_, v)| v).sum();
    let rest = 1.0 - alpha;
    let values = (0..c)
        .map(|k| {
            if k == gt {
                alpha
            } else if denom > 0.0 {
                rest * shifted[k] / denom
            } else {
                rest / (c - 1) as f64
            }
        })
        .collect();
    TargetDistribution::new(values)
}

/// [`le_targets_from_cosines`] applied to a full explanation set.
pub fn le_targets<T: Scalar>(set: &ExplanationSet<T>, gt: usize, alpha: f64) -> Result<TargetDistribution> {
    let anchor = set.maps.get(gt).ok_or_else(|| {
        Error::Parameter(format!("ground-truth class {gt} outside {} explanations", set.maps.len()))
    })?;
    let cos = set
        .maps
        .iter()
        .map(|m| cosine(m, anchor))
        .collect::<Result<Vec<_>>>()?;
    le_targets_from_cosines(&cos, gt, alpha)
}

/// `alpha` on the ground truth, `(1 - alpha)/(c - 1)` elsewhere.
pub fn ls_targets(gt: usize, alpha: f64, classes: usize) -> Result<TargetDistribution> {
    if classes < 2 || gt >= classes {
        return Err(Error::Parameter(format!("bad class {gt} of {classes}")));
    }
    check_alpha(alpha)?;
    let other = (1.0 - alpha) / (classes - 1) as f64;
    TargetDistribution::new((0..classes).map(|k| if k == gt { alpha } else { other }).collect())
}

/// Temperature-softened teacher distribution.
pub fn kd_targets<T: Scalar>(teacher_logits: &[T], temperature: f64) -> Result<TargetDistribution> {
    let p = softmax(teacher_logits, temperature)?;
    TargetDistribution::new(p.into_iter().map(Scalar::widen).collect())
}

/// Keeps `protected` fixed and shuffles every other entry.
fn permute_except(q: &TargetDistribution, protected: usize, rng: &mut Rng) -> TargetDistribution {
    let mut others: Vec<f64> = q
        .values
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != protected)
        .map(|(_, &v)| v)
        .collect();
    rng.shuffle(&mut others);
    let mut it = others.into_iter();
    let values = (0..q.len())
        .map(|k| if k == protected { q.values[k] } else { it.next().expect("c-1 entries") })
        .collect();
    TargetDistribution { values }
}

/// Teacher distribution with its non-argmax entries randomly permuted.
pub fn dkpp_targets(teacher: &TargetDistribution, rng: &mut Rng) -> TargetDistribution {
    permute_except(teacher, teacher.argmax(), rng)
}

/// Targets with every non-ground-truth entry randomly permuted.
pub fn permute_targets(q: &TargetDistribution, gt: usize, rng: &mut Rng) -> TargetDistribution {
    permute_except(q, gt, rng)
}

/// `w_i = q_i^max / Σ_j q_j^max`.
pub fn cwtm_weights(teacher: &[TargetDistribution]) -> Result<SampleWeights> {
    SampleWeights::normalized(teacher.iter().map(TargetDistribution::max).collect())
}

/// Teacher-max weights shuffled across batch positions.
pub fn cwtm_permut_weights(teacher: &[TargetDistribution], rng: &mut Rng) -> Result<SampleWeights> {
    let mut w = cwtm_weights(teacher)?;
    rng.shuffle(&mut w.values);
    Ok(w)
}

/// Random confidences drawn uniformly from `[beta, 1)`, normalized.
pub fn cwtm_random_weights(b: usize, beta: f64, rng: &mut Rng) -> Result<SampleWeights> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta must be in [0, 1), got {beta}")));
    }
    if b == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    SampleWeights::normalized((0..b).map(|_| rng.uniform_range(beta, 1.0)).collect())
}

/// Raw `[beta, 1)` draws behind [`cwtm_random_weights`], exposed for checking.
pub fn cwtm_random_draws(b: usize, beta: f64, rng: &mut Rng) -> Vec<f64> {
    (0..b).map(|_| rng.uniform_range(beta, 1.0)).collect()
}
