use crate::array::Array;
use crate::error::{NumError, Result};

/// How gradients are bounded before the optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ClipMode {
    /// Rescale all gradients together when their joint L2 norm exceeds the threshold.
    #[default]
    GlobalNorm,
    /// Clamp each gradient entry to `[-threshold, threshold]`.
    Value,
}

/// Global L2 norm over a set of gradient arrays.
pub fn global_norm(grads: &[Array]) -> f64 {
    grads.iter().map(Array::squared_norm).sum::<f64>().sqrt()
}

/// Clips `grads` in place and returns the scale applied (1.0 when untouched).
///
/// In [`ClipMode::Value`] the returned value is the fraction of entries that
/// were left unchanged.
pub fn clip_gradients(grads: &mut [Array], threshold: f64, mode: ClipMode) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(NumError::InvalidArgument(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(NumError::NonFiniteNorm);
    }
    match mode {
        ClipMode::GlobalNorm => {
            if norm <= threshold {
                return Ok(1.0);
            }
            let scale = threshold / norm;
            grads.iter_mut().for_each(|g| g.scale_in_place(scale));
            Ok(scale)
        }
        ClipMode::Value => {
            let (mut total, mut kept) = (0usize, 0usize);
            for g in grads.iter_mut() {
                for v in g.as_mut_slice() {
                    total += 1;
                    if v.abs() <= threshold {
                        kept += 1;
                    }
                    *v = v.clamp(-threshold, threshold);
                }
            }
            Ok(if total == 0 { 1.0 } else { kept as f64 / total as f64 })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for a fixed list of parameters.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Array>,
    second: Vec<Array>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Array>, config: AdamConfig) -> Self {
        let first: Vec<Array> = params
            .into_iter()
            .map(|p| Array::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [&mut Array], grads: &[Array]) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(NumError::UninitializedState(params.len()));
        }
        if grads.len() != params.len() {
            return Err(NumError::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(NumError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            for (((pv, &gv), mv), vv) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut g = vec![Array::row(vec![3.0, 0.0])];
        assert_eq!(clip_gradients(&mut g, 5.0, ClipMode::GlobalNorm).unwrap(), 1.0);
        assert_eq!(g[0].as_slice(), &[3.0, 0.0]);

        let mut g = vec![Array::row(vec![3.0, 4.0])];
        assert_eq!(clip_gradients(&mut g, 5.0, ClipMode::GlobalNorm).unwrap(), 1.0);
        assert_eq!(g[0].as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_halves_norm_ten() {
        let mut g = vec![Array::row(vec![6.0, 8.0])];
        let scale = clip_gradients(&mut g, 5.0, ClipMode::GlobalNorm).unwrap();
        assert_eq!(scale, 0.5);
        assert_eq!(g[0].as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_is_global_across_arrays() {
        let mut g = vec![Array::row(vec![6.0]), Array::row(vec![8.0])];
        clip_gradients(&mut g, 5.0, ClipMode::GlobalNorm).unwrap();
        assert!((global_norm(&g) - 5.0).abs() < 1e-12);
        assert!((g[0].as_slice()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn clip_rejects_bad_input() {
        let mut g = vec![Array::row(vec![f64::NAN])];
        assert_eq!(
            clip_gradients(&mut g, 5.0, ClipMode::GlobalNorm),
            Err(NumError::NonFiniteNorm)
        );
        let mut g = vec![Array::row(vec![1.0])];
        assert!(clip_gradients(&mut g, 0.0, ClipMode::GlobalNorm).is_err());
    }

    #[test]
    fn clip_by_value_clamps_entries() {
        let mut g = vec![Array::row(vec![-7.0, 2.0, 9.0, 0.5])];
        let kept = clip_gradients(&mut g, 5.0, ClipMode::Value).unwrap();
        assert_eq!(g[0].as_slice(), &[-5.0, 2.0, 5.0, 0.5]);
        assert_eq!(kept, 0.5);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Array::row(vec![0.5, -0.25]);
        let mut s = AdamState::new([&p], AdamConfig::default());
        s.step(&mut [&mut p], &[Array::zeros(1, 2)]).unwrap();
        assert_eq!(p.as_slice(), &[0.5, -0.25]);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Array::scalar(1.0);
        let mut s = AdamState::new([&p], AdamConfig::default());
        let g = [Array::scalar(1.0)];
        s.step(&mut [&mut p], &g).unwrap();
        let d1 = 1.0 - p.as_slice()[0];
        // m̂ = v̂ = 1 after bias correction, so the step is lr/(1+ε).
        assert!((d1 - 2e-4 / (1.0 + 1e-8)).abs() < 1e-15);
        let before = p.as_slice()[0];
        s.step(&mut [&mut p], &g).unwrap();
        let d2 = before - p.as_slice()[0];
        assert!(d2.abs() <= d1.abs() * 1.01);
    }

    #[test]
    fn adam_uninitialized_state_is_an_error() {
        let mut p = Array::scalar(1.0);
        let mut s = AdamState::default();
        assert_eq!(
            s.step(&mut [&mut p], &[Array::scalar(1.0)]),
            Err(NumError::UninitializedState(1))
        );
    }
}
