//! Ranking metrics: top-1 accuracy, mean reciprocal rank, top-3 accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub mrr: f64,
    pub top3: f64,
    pub count: usize,
}

impl Metrics {
    /// `top1 ≤ mrr ≤ 1` and `top1 ≤ top3 ≤ 1`.
    pub fn identities_hold(&self) -> bool {
        self.top1 <= self.mrr && self.mrr <= 1.0 && self.top1 <= self.top3 && self.top3 <= 1.0
    }
}

/// Metrics from full rankings (permutations of domain ids, best first).
pub fn compute_metrics<R: AsRef<[usize]>>(rankings: &[R], ground_truths: &[usize]) -> Result<Metrics> {
    if rankings.is_empty() {
        return Err(Error::Invalid("cannot compute metrics on an empty evaluation set".into()));
    }
    if rankings.len() != ground_truths.len() {
        return Err(Error::Invalid(format!(
            "{} rankings but {} ground truths",
            rankings.len(),
            ground_truths.len()
        )));
    }
    let ranks = rankings
        .iter()
        .zip(ground_truths)
        .map(|(r, &g)| {
            r.as_ref()
                .iter()
                .position(|&d| d == g)
                .map(|p| p + 1)
                .ok_or(Error::UnknownDomainId {
                    id: g,
                    n: r.as_ref().len(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics_from_ranks(&ranks))
}

/// Metrics from 1-based ranks of the ground truth.
pub fn metrics_from_ranks(ranks: &[usize]) -> Metrics {
    let n = ranks.len() as f64;
    let mut m = Metrics {
        count: ranks.len(),
        ..Metrics::default()
    };
    for &r in ranks {
        m.top1 += f64::from(u8::from(r == 1));
        m.mrr += 1.0 / r as f64;
        m.top3 += f64::from(u8::from(r <= 3));
    }
    m.top1 /= n;
    m.mrr /= n;
    m.top3 /= n;
    m
}

/// A fraction rendered as a percentage with two decimals, e.g. `95.81`.
pub fn percent(value: f64) -> String {
    format!("{:.2}", 100.0 * value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_rankings() {
        let m = compute_metrics(&[vec![2, 0, 1], vec![0, 1, 2]], &[2, 0]).unwrap();
        assert_eq!((m.top1, m.mrr, m.top3, m.count), (1.0, 1.0, 1.0, 2));
    }

    #[test]
    fn hand_computed_pair() {
        let m = compute_metrics(&[vec![0, 1], vec![0, 1]], &[0, 1]).unwrap();
        assert_eq!((m.top1, m.mrr, m.top3), (0.5, 0.75, 1.0));
    }

    #[test]
    fn rank_four_misses_top3() {
        let m = compute_metrics(&[vec![3, 2, 1, 0]], &[0]).unwrap();
        assert_eq!((m.top1, m.mrr, m.top3), (0.0, 0.25, 0.0));
    }

    #[test]
    fn errors() {
        assert!(compute_metrics::<Vec<usize>>(&[], &[]).is_err());
        assert!(compute_metrics(&[vec![0, 1]], &[5]).is_err());
        assert!(compute_metrics(&[vec![0, 1]], &[0, 1]).is_err());
    }

    #[test]
    fn percent_rendering() {
        assert_eq!(percent(0.9581), "95.81");
        assert_eq!(percent(1.0), "100.00");
        assert_eq!(percent(0.0), "0.00");
    }
}
