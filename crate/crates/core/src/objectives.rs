//! Cross-entropy, fairness and weighted Tchebycheff losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preference::PreferenceVector;
use crate::tape::{Var, LOG_FLOOR};
use crate::tensor::Tensor;

/// Loss pair `(cross-entropy, fairness)` for one model on one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossVector {
    pub ce: f64,
    pub fair: f64,
}

impl LossVector {
    pub fn new(ce: f64, fair: f64) -> Self {
        LossVector { ce, fair }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.ce, self.fair]
    }

    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.fair.is_finite()
    }
}

fn indicator(values: &[u8]) -> Tensor {
    Tensor::vector(values.iter().map(|&v| f64::from(v)).collect())
}

fn check_batch(preds: &Tensor, len: usize, what: &str) -> Result<()> {
    if preds.len() != len {
        return Err(Error::Dimension {
            op: "loss",
            left: preds.shape().to_vec(),
            right: vec![len],
        });
    }
    if len == 0 {
        return Err(Error::contract(format!("{what} loss of an empty batch")));
    }
    Ok(())
}

/// Mean binary cross-entropy with log arguments floored at [`LOG_FLOOR`].
pub fn ce_loss<'t>(preds: Var<'t>, labels: &[u8]) -> Result<Var<'t>> {
    let p = preds.value();
    check_batch(&p, labels.len(), "cross-entropy")?;
    let tape = preds.tape();
    let shape = p.shape().to_vec();
    let y = tape.leaf(indicator(labels).reshape(&shape)?);
    let not_y = tape.leaf(indicator(labels).map(|v| 1.0 - v).reshape(&shape)?);
    let log_p = preds.log();
    let log_q = preds.mul_const(-1.0).add_const(1.0).log();
    let ll = y.mul(log_p)?.add(not_y.mul(log_q)?)?;
    Ok(ll.mean().mul_const(-1.0))
}

/// Magnitude of the batch covariance between the sensitive attribute and the
/// predictions.
///
/// With `c = a - mean(a)`, `mean(c * (p - mean(p))) = mean(c * p)` because
/// `c` sums to zero, so the centred predictions are never materialized.
pub fn fair_loss<'t>(preds: Var<'t>, sensitive: &[u8]) -> Result<Var<'t>> {
    let p = preds.value();
    check_batch(&p, sensitive.len(), "fairness")?;
    if !(sensitive.contains(&0) && sensitive.contains(&1)) {
        return Err(Error::contract("fairness loss needs both sensitive groups in the batch"));
    }
    let a = indicator(sensitive);
    let mean_a = a.sum() / a.len() as f64;
    let centred = preds.tape().leaf(a.map(|v| v - mean_a).reshape(p.shape())?);
    Ok(centred.mul(preds)?.mean().abs())
}

/// `max(ce / λ1, fair / λ2)`; ties send the gradient to the CE branch.
pub fn tch_loss<'t>(ce: Var<'t>, fair: Var<'t>, lambda: &PreferenceVector) -> Result<Var<'t>> {
    ce.mul_const(1.0 / lambda.first())
        .max(fair.mul_const(1.0 / lambda.second()))
}

pub fn tch_value(loss: LossVector, lambda: &PreferenceVector) -> f64 {
    (loss.ce / lambda.first()).max(loss.fair / lambda.second())
}

/// Tape-free [`ce_loss`].
pub fn ce_value(preds: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if y == 1 {
                -p.max(LOG_FLOOR).ln()
            } else {
                -(1.0 - p).max(LOG_FLOOR).ln()
            }
        })
        .sum();
    total / preds.len() as f64
}

/// Tape-free [`fair_loss`].
pub fn fair_value(preds: &[f64], sensitive: &[u8]) -> f64 {
    let n = preds.len() as f64;
    let mean_a = sensitive.iter().map(|&a| f64::from(a)).sum::<f64>() / n;
    let cov: f64 = preds
        .iter()
        .zip(sensitive)
        .map(|(&p, &a)| (f64::from(a) - mean_a) * p)
        .sum::<f64>()
        / n;
    cov.abs()
}

pub fn loss_vector(preds: &[f64], labels: &[u8], sensitive: &[u8]) -> LossVector {
    LossVector::new(ce_value(preds, labels), fair_value(preds, sensitive))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use proptest::prelude::*;

    fn pref(l1: f64) -> PreferenceVector {
        PreferenceVector::from_first(l1).unwrap()
    }

    fn eval_ce(p: &[f64], y: &[u8]) -> f64 {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::vector(p.to_vec()));
        ce_loss(v, y).unwrap().item()
    }

    fn eval_fair(p: &[f64], a: &[u8]) -> f64 {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::vector(p.to_vec()));
        fair_loss(v, a).unwrap().item()
    }

    #[test]
    fn cross_entropy_values() {
        assert!((eval_ce(&[0.5], &[1]) - 2f64.ln()).abs() < 1e-12);
        assert!(eval_ce(&[1.0, 0.0], &[1, 0]).abs() < 1e-11);
        assert!((eval_ce(&[0.9, 0.1], &[1, 0]) - (-(0.9f64).ln())).abs() < 1e-12);
        assert!((eval_ce(&[0.9, 0.1], &[1, 0]) - 0.105361).abs() < 1e-6);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![]));
        assert!(matches!(ce_loss(v, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn fairness_values() {
        assert!(eval_fair(&[0.3, 0.3, 0.3], &[0, 1, 1]) < 1e-15);
        assert!((eval_fair(&[0.0, 1.0], &[0, 1]) - 0.25).abs() < 1e-15);
        assert!((eval_fair(&[1.0, 0.0], &[0, 1]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn fairness_needs_both_groups() {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![0.2, 0.4]));
        assert!(matches!(fair_loss(v, &[1, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn tchebycheff_values_and_tie_rule() {
        let tape = Tape::new();
        let check = |ce: f64, fair: f64, l1: f64| {
            let c = tape.scalar(ce);
            let f = tape.scalar(fair);
            let t = tch_loss(c, f, &pref(l1)).unwrap();
            let g = tape.backward(t).unwrap();
            (t.item(), g.get(c).item(), g.get(f).item())
        };
        let (v, _, _) = check(0.3, 0.6, 0.5);
        assert!((v - 1.2).abs() < 1e-12);
        let (v, gc, gf) = check(0.4, 0.4, 0.5);
        assert!((v - 0.8).abs() < 1e-12);
        assert_eq!((gc, gf), (2.0, 0.0));
        let (v, _, _) = check(0.2, 0.2, 0.8);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn taped_and_plain_losses_agree() {
        let p = [0.1, 0.7, 0.45, 0.99, 0.3];
        let y = [0, 1, 1, 1, 0];
        let a = [1, 0, 1, 0, 0];
        assert!((eval_ce(&p, &y) - ce_value(&p, &y)).abs() < 1e-14);
        assert!((eval_fair(&p, &a) - fair_value(&p, &a)).abs() < 1e-15);
    }

    fn centred_covariance(p: &[f64], a: &[u8]) -> f64 {
        let n = p.len() as f64;
        let ma = a.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let mp = p.iter().sum::<f64>() / n;
        (p.iter().zip(a).map(|(&p, &a)| (f64::from(a) - ma) * (p - mp)).sum::<f64>() / n).abs()
    }

    proptest! {
        #[test]
        fn tchebycheff_is_the_max(ce in 0.0f64..5.0, fair in 0.0f64..1.0, l1 in 0.001f64..0.999) {
            let l = pref(l1);
            let t = tch_value(LossVector::new(ce, fair), &l);
            let a = ce / l.first();
            let b = fair / l.second();
            prop_assert!(t >= a && t >= b);
            prop_assert!(t == a || t == b);
        }

        #[test]
        fn losses_are_permutation_invariant(
            rows in proptest::collection::vec((0.01f64..0.99, 0u8..2, 0u8..2), 2..40),
            rot in 0usize..40,
        ) {
            let mut rows = rows;
            rows[0].2 = 0;
            rows[1].2 = 1;
            let p: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let y: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let a: Vec<u8> = rows.iter().map(|r| r.2).collect();
            let mut shuffled = rows.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let ps: Vec<f64> = shuffled.iter().map(|r| r.0).collect();
            let ys: Vec<u8> = shuffled.iter().map(|r| r.1).collect();
            let as_: Vec<u8> = shuffled.iter().map(|r| r.2).collect();
            prop_assert!((eval_ce(&p, &y) - eval_ce(&ps, &ys)).abs() < 1e-12);
            prop_assert!((eval_fair(&p, &a) - eval_fair(&ps, &as_)).abs() < 1e-12);

            // group relabeling symmetry and the centred-covariance identity
            let flipped: Vec<u8> = a.iter().map(|&v| 1 - v).collect();
            prop_assert!((eval_fair(&p, &a) - eval_fair(&p, &flipped)).abs() < 1e-12);
            prop_assert!((eval_fair(&p, &a) - centred_covariance(&p, &a)).abs() < 1e-12);
        }
    }
}
