//! Cross-entropy against arbitrary target distributions and the confidence
//! penalty. Values are accumulated in `f64` regardless of the tensor scalar.

use crate::error::{dim_err, Error, Result};
use crate::targets::TargetDistribution;
use crate::tensor::{Scalar, Tensor};

/// One `coef · Σ_i w_i ce(p_i, t_i)` summand.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub coef: f64,
    /// One target per batch row.
    pub targets: Vec<TargetDistribution>,
}

impl LossTerm {
    pub fn new(coef: f64, targets: Vec<TargetDistribution>) -> Self {
        Self { coef, targets }
    }

    pub fn one_hot(coef: f64, labels: &[usize], classes: usize) -> Self {
        Self::new(coef, labels.iter().map(|&y| TargetDistribution::one_hot(y, classes)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<T: Scalar = f32> {
    pub loss: f64,
    pub dlogits: Tensor<T>,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    row.iter().map(|&z| z - lse).collect()
}

fn rows_f64<T: Scalar>(logits: &Tensor<T>) -> Result<(usize, usize)> {
    if logits.ndim() != 2 {
        return Err(dim_err(format!("logits must be b×c, got {:?}", logits.shape())));
    }
    logits.ensure_finite("logits")?;
    Ok((logits.shape()[0], logits.shape()[1]))
}

/// `Σ_i w_i Σ_terms coef·ce(softmax(z_i), t_i)` with `w_i = 1/b` by default.
/// `dlogits_i = w_i Σ_terms coef·(p_i − t_i)`.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, terms: &[LossTerm], weights: Option<&[f64]>) -> Result<LossOutput<T>> {
    let (b, c) = rows_f64(logits)?;
    for term in terms {
        if term.targets.len() != b {
            return Err(dim_err(format!("{} targets for a batch of {b}", term.targets.len())));
        }
        if let Some(t) = term.targets.iter().find(|t| t.len() != c) {
            return Err(dim_err(format!("target of length {} for {c} classes", t.len())));
        }
    }
    let uniform = vec![1.0 / b as f64; b];
    let w = weights.unwrap_or(&uniform);
    if w.len() != b {
        return Err(dim_err(format!("{} sample weights for a batch of {b}", w.len())));
    }
    let mut loss = 0.0;
    let mut dlogits = Tensor::zeros(vec![b, c]);
    let mut grad = vec![0.0f64; c];
    for i in 0..b {
        let z: Vec<f64> = logits.row(i).iter().map(|v| v.widen()).collect();
        let logp = log_softmax(&z);
        let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        grad.iter_mut().for_each(|g| *g = 0.0);
        for term in terms.iter().filter(|t| t.coef != 0.0) {
            let t = term.targets[i].values();
            let ce: f64 = t.iter().zip(&logp).filter(|(&tk, _)| tk != 0.0).map(|(tk, lp)| -tk * lp).sum();
            loss += w[i] * term.coef * ce;
            for k in 0..c {
                grad[k] += term.coef * (p[k] - t[k]);
            }
        }
        for (d, g) in dlogits.row_mut(i).iter_mut().zip(&grad) {
            *d = T::lit(w[i] * g);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    Ok(LossOutput { loss, dlogits })
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `KL(q ‖ softmax(z))`.
pub fn kl_divergence<T: Scalar>(q: &TargetDistribution, logits: &[T]) -> f64 {
    let z: Vec<f64> = logits.iter().map(|v| v.widen()).collect();
    let logp = log_softmax(&z);
    q.values()
        .iter()
        .zip(&logp)
        .filter(|(&qk, _)| qk > 0.0)
        .map(|(&qk, lp)| qk * (qk.ln() - lp))
        .sum()
}

/// Batch mean of `−strength · H(p_i)`. The gradient is
/// `strength · p_j (log p_j + H) / b`.
pub fn confidence_penalty<T: Scalar>(logits: &Tensor<T>, strength: f64) -> Result<LossOutput<T>> {
    let (b, c) = rows_f64(logits)?;
    let mut loss = 0.0;
    let mut dlogits = Tensor::zeros(vec![b, c]);
    if strength == 0.0 {
        return Ok(LossOutput { loss, dlogits });
    }
    let scale = strength / b as f64;
    for i in 0..b {
        let z: Vec<f64> = logits.row(i).iter().map(|v| v.widen()).collect();
        let logp = log_softmax(&z);
        let h: f64 = -logp.iter().map(|&l| l.exp() * l).sum::<f64>();
        loss -= scale * h;
        for (d, &l) in dlogits.row_mut(i).iter_mut().zip(&logp) {
            *d = T::lit(scale * l.exp() * (l + h));
        }
    }
    Ok(LossOutput { loss, dlogits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::softmax;
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> TargetDistribution {
        TargetDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn matching_target_gives_zero_gradient() {
        let z = Tensor::<f64>::new(vec![1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        let p = softmax(z.row(0), 1.0).unwrap();
        let out = ce_loss(&z, &[LossTerm::new(1.0, vec![dist(&p)])], None).unwrap();
        assert!(out.dlogits.data().iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn single_one_hot_is_p_minus_y() {
        let z = Tensor::<f64>::new(vec![1, 4], vec![1.0, 2.0, 0.5, -0.5]).unwrap();
        let p = softmax(z.row(0), 1.0).unwrap();
        let out = ce_loss(&z, &[LossTerm::one_hot(1.0, &[2], 4)], None).unwrap();
        for k in 0..4 {
            let y = if k == 2 { 1.0 } else { 0.0 };
            assert!((out.dlogits.data()[k] - (p[k] - y)).abs() < 1e-15);
        }
        assert!((out.loss + p[2].ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_rows_scale_by_their_weight() {
        let z = Tensor::<f64>::new(vec![2, 3], vec![0.1, 0.2, 0.3, 1.0, -1.0, 0.0]).unwrap();
        let terms = [LossTerm::one_hot(1.0, &[0, 1], 3)];
        let out = ce_loss(&z, &terms, Some(&[0.8, 0.2])).unwrap();
        for (i, (w, y)) in [(0.8, 0usize), (0.2, 1)].into_iter().enumerate() {
            let p = softmax(z.row(i), 1.0).unwrap();
            for k in 0..3 {
                let t = if k == y { 1.0 } else { 0.0 };
                assert!((out.dlogits.row(i)[k] - w * (p[k] - t)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kd_gradient_is_p_minus_q_over_b() {
        let mut rng = Rng::new(5);
        let (b, c) = (4, 6);
        let z = Tensor::<f64>::from_fn(vec![b, c], |_| rng.normal());
        let q: Vec<_> = (0..b)
            .map(|_| {
                let t: Vec<f64> = (0..c).map(|_| rng.normal() * 3.0).collect();
                dist(&softmax(&t, 4.0).unwrap())
            })
            .collect();
        let out = ce_loss(&z, &[LossTerm::new(1.0, q.clone())], None).unwrap();
        for i in 0..b {
            let p = softmax(z.row(i), 1.0).unwrap();
            for k in 0..c {
                let want = (p[k] - q[i].values()[k]) / b as f64;
                assert!((out.dlogits.row(i)[k] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mismatched_targets_are_dimension_errors() {
        let z = Tensor::<f64>::zeros(vec![2, 3]);
        let err = ce_loss(&z, &[LossTerm::one_hot(1.0, &[0], 3)], None).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        let err = ce_loss(&z, &[LossTerm::one_hot(1.0, &[0, 1], 4)], None).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn zero_coefficient_terms_do_not_change_bits() {
        let z = Tensor::<f32>::new(vec![2, 3], vec![0.1, 0.7, -0.3, 2.0, 0.0, 1.0]).unwrap();
        let a = ce_loss(&z, &[LossTerm::one_hot(1.0, &[1, 2], 3)], None).unwrap();
        let b = ce_loss(
            &z,
            &[LossTerm::one_hot(1.0, &[1, 2], 3), LossTerm::one_hot(0.0, &[0, 0], 3)],
            None,
        )
        .unwrap();
        assert_eq!(a.dlogits.data(), b.dlogits.data());
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }

    #[test]
    fn uniform_prediction_has_zero_penalty_gradient() {
        let z = Tensor::<f64>::full(vec![3, 5], 0.7);
        let out = confidence_penalty(&z, 2.0).unwrap();
        assert!(out.dlogits.data().iter().all(|d| d.abs() < 1e-15));
        assert!((out.loss + 2.0 * (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_strength_is_a_no_op() {
        let z = Tensor::<f64>::new(vec![1, 3], vec![5.0, 0.0, -2.0]).unwrap();
        let out = confidence_penalty(&z, 0.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.dlogits.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let z = [0.5f64, -0.2, 1.5];
        let q = dist(&softmax(&z, 1.0).unwrap());
        assert!(kl_divergence(&q, &z).abs() < 1e-14);
        assert!(kl_divergence(&TargetDistribution::one_hot(0, 3), &z) > 0.0);
    }

    proptest! {
        #[test]
        fn penalty_gradient_matches_finite_differences(seed in any::<u64>(), strength in 0.05f64..4.0) {
            let mut rng = Rng::new(seed);
            let z = Tensor::<f64>::from_fn(vec![3, 4], |_| 2.0 * rng.normal());
            let out = confidence_penalty(&z, strength).unwrap();
            let h = 1e-5;
            for idx in 0..z.len() {
                let mut zp = z.clone();
                zp.data_mut()[idx] += h;
                let mut zm = z.clone();
                zm.data_mut()[idx] -= h;
                let fd = (confidence_penalty(&zp, strength).unwrap().loss
                    - confidence_penalty(&zm, strength).unwrap().loss) / (2.0 * h);
                prop_assert!((fd - out.dlogits.data()[idx]).abs() < 1e-8);
            }
        }

        #[test]
        fn ce_loss_is_nonnegative_and_gradient_rows_sum_to_zero(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let z = Tensor::<f64>::from_fn(vec![4, 5], |_| 3.0 * rng.normal());
            let labels: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
            let out = ce_loss(&z, &[LossTerm::one_hot(1.0, &labels, 5)], None).unwrap();
            prop_assert!(out.loss >= 0.0);
            for i in 0..4 {
                prop_assert!(out.dlogits.row(i).iter().sum::<f64>().abs() < 1e-14);
            }
        }
    }
}
