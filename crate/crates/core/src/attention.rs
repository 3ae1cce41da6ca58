//! Enablement attention over the user's enabled domains.
//!
//! Scores are plain dot products `s_e = u · v_e` between the utterance vector
//! and each enabled domain's row of the enablement table. Sigmoid attention
//! squashes each score independently; softmax attention normalises over the
//! enabled set. The summary vector is `c = Σ_e a_e · v_e`.
//!
//! Batched graph builders work on dense `batch × n` score matrices with a
//! 0/1 enablement mask; the per-example functions below wrap them.

use numcore::{sigmoid, Array, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Sigmoid,
    Softmax,
}

/// Attention nodes for a batch; `weights` is zero outside the enabled sets.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub scores: Var,
    pub weights: Var,
    pub summary: Var,
}

/// `batch × n` 0/1 mask of enabled domains.
pub fn enabled_mask<S: AsRef<[usize]>>(enabled: &[S], n: usize) -> Result<Array> {
    let mut mask = Array::zeros(enabled.len(), n);
    for (r, set) in enabled.iter().enumerate() {
        for &id in set.as_ref() {
            if id >= n {
                return Err(Error::UnknownDomainId { id, n });
            }
            mask.set(r, id, 1.0);
        }
    }
    Ok(mask)
}

/// Builds scores, weights and the summary vector for a batch.
pub fn attend_batch(tape: &mut Tape, u: Var, table: Var, mask: &Array, mode: AttentionMode) -> Result<AttentionVars> {
    let scores = tape.matmul_nt(u, table)?;
    let weights = match mode {
        AttentionMode::Sigmoid => {
            let all = tape.sigmoid(scores)?;
            let m = tape.constant(mask.clone());
            tape.mul(all, m)?
        }
        AttentionMode::Softmax => tape.masked_softmax(scores, mask)?,
    };
    let summary = tape.matmul(weights, table)?;
    Ok(AttentionVars {
        scores,
        weights,
        summary,
    })
}

/// `L_a` summed over the batch: binary cross-entropy of the weights over
/// each enabled set against the ground-truth indicator.
pub fn supervised_loss_batch(tape: &mut Tape, weights: Var, mask: &Array, gold: &[usize]) -> Result<Var> {
    let mut targets = Array::zeros(mask.rows(), mask.cols());
    for (r, &g) in gold.iter().enumerate() {
        if g >= mask.cols() {
            return Err(Error::UnknownDomainId { id: g, n: mask.cols() });
        }
        targets.set(r, g, mask.get(r, g));
    }
    Ok(tape.binary_cross_entropy(weights, &targets, mask)?)
}

/// `L_d` summed over the batch against fixed soft targets.
pub fn distillation_loss_batch(tape: &mut Tape, weights: Var, mask: &Array, soft: &Array) -> Result<Var> {
    Ok(tape.binary_cross_entropy(weights, soft, mask)?)
}

/// `σ(u_snap · v_e / T)` on enabled entries, zero elsewhere. No tape involved.
pub fn soft_target_matrix(u_snapshot: &Array, table_snapshot: &Array, mask: &Array, temperature: f64) -> Result<Array> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let mut scores = numcore::matmul(u_snapshot, &table_snapshot.transpose())?;
    for (s, &m) in scores.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *s = if m != 0.0 { sigmoid(*s / temperature) } else { 0.0 };
    }
    Ok(scores)
}

/// Attention over one utterance's enabled set (in the given order).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult {
    pub enabled: Vec<usize>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub summary: Vec<f64>,
}

/// A loss value with the number of clamped probabilities behind it.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossValue {
    pub value: f64,
    pub saturations: u64,
}

fn check_unique(enabled: &[usize]) -> Result<()> {
    let mut seen = enabled.to_vec();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Invalid("duplicate domain in enabled set".into()));
    }
    Ok(())
}

pub fn attend(u: &[f64], enabled: &[usize], table: &Array, mode: AttentionMode) -> Result<AttentionResult> {
    check_unique(enabled)?;
    let mask = enabled_mask(&[enabled], table.rows())?;
    let mut tape = Tape::new();
    let u_var = tape.constant(Array::row(u.to_vec()));
    let t_var = tape.constant(table.clone());
    let vars = attend_batch(&mut tape, u_var, t_var, &mask, mode)?;
    let scores = tape.value(vars.scores);
    let weights = tape.value(vars.weights);
    Ok(AttentionResult {
        enabled: enabled.to_vec(),
        scores: enabled.iter().map(|&e| scores.get(0, e)).collect(),
        weights: enabled.iter().map(|&e| weights.get(0, e)).collect(),
        summary: tape.value(vars.summary).as_slice().to_vec(),
    })
}

fn bce_over(probs: &[f64], targets: &[f64]) -> Result<LossValue> {
    if probs.is_empty() {
        return Ok(LossValue::default());
    }
    let mut tape = Tape::new();
    let p = tape.constant(Array::row(probs.to_vec()));
    let y = Array::row(targets.to_vec());
    let w = Array::filled(1, probs.len(), 1.0);
    let loss = tape.binary_cross_entropy(p, &y, &w)?;
    Ok(LossValue {
        value: tape.value(loss).as_slice()[0],
        saturations: tape.saturations(),
    })
}

/// `L_a` for one utterance; zero when the enabled set is empty.
pub fn supervised_attention_loss(result: &AttentionResult, ground_truth: usize) -> Result<LossValue> {
    let targets: Vec<f64> = result
        .enabled
        .iter()
        .map(|&e| if e == ground_truth { 1.0 } else { 0.0 })
        .collect();
    bce_over(&result.weights, &targets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargets {
    pub enabled: Vec<usize>,
    pub targets: Vec<f64>,
    pub temperature: f64,
    /// Epoch of the snapshot that produced the targets, when known.
    pub source_epoch: Option<usize>,
}

/// `ã_e = σ(u_snap · v_e_snap / T)` for every enabled domain.
pub fn soft_targets(u_snapshot: &[f64], enabled: &[usize], table_snapshot: &Array, temperature: f64) -> Result<SoftTargets> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if u_snapshot.len() != table_snapshot.cols() {
        return Err(numcore::NumError::ShapeMismatch {
            op: "soft_targets",
            left: (1, u_snapshot.len()),
            right: table_snapshot.shape(),
        }
        .into());
    }
    let targets = enabled
        .iter()
        .map(|&e| {
            if e >= table_snapshot.rows() {
                return Err(Error::UnknownDomainId {
                    id: e,
                    n: table_snapshot.rows(),
                });
            }
            let s: f64 = u_snapshot.iter().zip(table_snapshot.row_slice(e)).map(|(a, b)| a * b).sum();
            Ok(sigmoid(s / temperature))
        })
        .collect::<Result<_>>()?;
    Ok(SoftTargets {
        enabled: enabled.to_vec(),
        targets,
        temperature,
        source_epoch: None,
    })
}

/// `L_d` for one utterance. The student weights are used as computed
/// (no temperature on the student side).
pub fn distillation_loss(result: &AttentionResult, targets: &SoftTargets) -> Result<LossValue> {
    if result.enabled != targets.enabled {
        return Err(Error::Invalid(
            "attention result and soft targets cover different enabled sets".into(),
        ));
    }
    bce_over(&result.weights, &targets.targets)
}

/// Distillation weight `β^t = 1 − 0.95^t` for zero-based epoch `t`.
pub fn beta_schedule(epoch: i64) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::Invalid(format!("epoch must be non-negative, got {epoch}")));
    }
    Ok(1.0 - 0.95f64.powi(epoch as i32))
}

/// `α · ((1 − β^t) · L_a + β^t · L_d)`.
pub fn combined_aux_loss(supervised: f64, distill: f64, epoch: i64, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be non-negative, got {alpha}")));
    }
    let beta = beta_schedule(epoch)?;
    Ok(alpha * ((1.0 - beta) * supervised + beta * distill))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIGMOID_ONE: f64 = 0.731_058_578_630_004_9;

    fn table() -> Array {
        Array::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 2.0], vec![0.5, 0.5]]).unwrap()
    }

    #[test]
    fn zero_scores_give_half_weights() {
        let r = attend(&[0.0, 0.0], &[0, 2, 3], &table(), AttentionMode::Sigmoid).unwrap();
        assert_eq!(r.weights, vec![0.5; 3]);
    }

    #[test]
    fn equal_scores_split_softmax_evenly() {
        let r = attend(&[0.0, 1.0], &[0, 1], &table(), AttentionMode::Softmax).unwrap();
        assert_eq!(r.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn opposite_scores_under_sigmoid() {
        let r = attend(&[1.0, 0.0], &[0, 1], &table(), AttentionMode::Sigmoid).unwrap();
        assert_eq!(r.scores, vec![1.0, -1.0]);
        assert!((r.weights[0] - SIGMOID_ONE).abs() < 1e-15);
        assert!((r.weights[1] - (1.0 - SIGMOID_ONE)).abs() < 1e-15);
        // c = a0·v0 + a1·v1
        let c0 = r.weights[0] * 1.0 - r.weights[1];
        assert!((r.summary[0] - c0).abs() < 1e-15);
        assert_eq!(r.summary[1], 0.0);
    }

    #[test]
    fn empty_enabled_set_is_legal() {
        for mode in [AttentionMode::Sigmoid, AttentionMode::Softmax] {
            let r = attend(&[0.3, -0.2], &[], &table(), mode).unwrap();
            assert!(r.weights.is_empty());
            assert_eq!(r.summary, vec![0.0, 0.0]);
            assert_eq!(supervised_attention_loss(&r, 1).unwrap().value, 0.0);
        }
    }

    #[test]
    fn unknown_domain_is_an_error() {
        assert!(matches!(
            attend(&[0.0, 0.0], &[7], &table(), AttentionMode::Sigmoid),
            Err(Error::UnknownDomainId { id: 7, n: 4 })
        ));
    }

    #[test]
    fn supervised_loss_reference_values() {
        let single = AttentionResult {
            enabled: vec![3],
            scores: vec![0.0],
            weights: vec![0.5],
            summary: vec![],
        };
        assert!((supervised_attention_loss(&single, 3).unwrap().value - std::f64::consts::LN_2).abs() < 1e-12);

        let pair = AttentionResult {
            enabled: vec![3, 5],
            scores: vec![0.0; 2],
            weights: vec![0.9, 0.1],
            summary: vec![],
        };
        let l = supervised_attention_loss(&pair, 3).unwrap().value;
        assert!((l - 2.0 * -(0.9f64.ln())).abs() < 1e-12);
        assert!((l - 0.210_721).abs() < 1e-6);
    }

    #[test]
    fn saturated_weights_are_clamped_and_counted() {
        let r = AttentionResult {
            enabled: vec![0, 1],
            scores: vec![0.0; 2],
            weights: vec![0.0, 1.0],
            summary: vec![],
        };
        let l = supervised_attention_loss(&r, 0).unwrap();
        assert_eq!(l.saturations, 2);
        let eps = 1e-12f64;
        let expected = -eps.ln() - (1.0 - (1.0 - eps)).ln();
        assert!((l.value - expected).abs() < 1e-9);
    }

    #[test]
    fn soft_target_reference_values() {
        let table = Array::from_rows(&[vec![16.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let t = soft_targets(&[1.0, 0.0], &[0, 1], &table, 16.0).unwrap();
        assert!((t.targets[0] - SIGMOID_ONE).abs() < 1e-15);
        assert_eq!(t.targets[1], 0.5);
        assert!(soft_targets(&[1.0, 0.0], &[0], &table, 0.0).is_err());
    }

    #[test]
    fn temperature_softens_monotonically_towards_half() {
        let table = Array::from_rows(&[vec![5.0]]).unwrap();
        let mut prev = f64::INFINITY;
        for t in [1.0, 2.0, 4.0, 16.0, 64.0, 1e3, 1e6] {
            let a = soft_targets(&[1.0], &[0], &table, t).unwrap().targets[0];
            assert!(a > 0.5 && a < prev);
            prev = a;
        }
        assert!(prev - 0.5 < 1e-5);
    }

    #[test]
    fn distillation_minimum_is_the_target_entropy() {
        let mk = |a: f64| AttentionResult {
            enabled: vec![2],
            scores: vec![0.0],
            weights: vec![a],
            summary: vec![],
        };
        let target = |a: f64| SoftTargets {
            enabled: vec![2],
            targets: vec![a],
            temperature: 16.0,
            source_epoch: None,
        };
        let half = distillation_loss(&mk(0.5), &target(0.5)).unwrap().value;
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);

        let p = SIGMOID_ONE;
        let h = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        let at = distillation_loss(&mk(p), &target(p)).unwrap().value;
        assert!((at - h).abs() < 1e-12);
        assert!((at - 0.582_203).abs() < 1e-6);
        for d in [1e-3, -1e-3, 0.05, -0.05] {
            assert!(distillation_loss(&mk(p + d), &target(p)).unwrap().value > at);
        }

        let mismatch = SoftTargets {
            enabled: vec![3],
            ..target(0.5)
        };
        assert!(distillation_loss(&mk(0.5), &mismatch).is_err());
    }

    #[test]
    fn beta_schedule_values() {
        assert_eq!(beta_schedule(0).unwrap(), 0.0);
        assert!((beta_schedule(1).unwrap() - 0.05).abs() < 1e-15);
        assert!((beta_schedule(25).unwrap() - 0.722_610).abs() < 1e-6);
        assert!(beta_schedule(-1).is_err());
        let mut prev = -1.0;
        for t in 0..200 {
            let b = beta_schedule(t).unwrap();
            assert!(b > prev && (0.0..1.0).contains(&b));
            prev = b;
        }
    }

    #[test]
    fn combined_aux_loss_edges() {
        assert_eq!(combined_aux_loss(0.7, 123.0, 0, 0.01).unwrap(), 0.01 * 0.7);
        assert_eq!(combined_aux_loss(0.7, 0.3, 5, 0.0).unwrap(), 0.0);
        let mut prev = f64::INFINITY;
        for t in 0..50 {
            let w = combined_aux_loss(1.0, 0.0, t, 1.0).unwrap();
            assert!(w < prev);
            prev = w;
        }
        assert!(combined_aux_loss(1.0, 1.0, 0, -1.0).is_err());
    }
}
