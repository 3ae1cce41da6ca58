//! Finite-difference verification of the complete training loss.

use numcore::{grad_check, Array, GradCheckReport};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{DropoutMask, DropoutVars};
use crate::error::{Error, Result};
use crate::model::{DistillSnapshot, Model, ModelConfig, ModelVars, Variant};

/// A small random model, batch and (for distillation) fixture snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullModelCheck {
    pub vocab: usize,
    pub d_emb: usize,
    pub d_hidden: usize,
    pub d_ff: usize,
    pub domains: usize,
    /// Size of every example's enabled set.
    pub enabled: usize,
    pub batch: usize,
    pub max_len: usize,
    pub model: u8,
    pub epoch: usize,
    /// Apply fixed variational-dropout masks, as in training.
    pub dropout: bool,
    pub seed: u64,
}

impl Default for FullModelCheck {
    fn default() -> Self {
        Self {
            vocab: 50,
            d_emb: 8,
            d_hidden: 8,
            d_ff: 8,
            domains: 6,
            enabled: 2,
            batch: 3,
            max_len: 5,
            model: 4,
            epoch: 1,
            dropout: true,
            seed: 7,
        }
    }
}

pub const DEFAULT_STEP: f64 = 1e-5;

impl FullModelCheck {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let variant = Variant::table(self.model).ok_or_else(|| Error::Config(format!("model must be 1–6, got {}", self.model)))?;
        let config = ModelConfig {
            vocab: self.vocab,
            domains: self.domains,
            d_emb: self.d_emb,
            d_hidden: self.d_hidden,
            d_ff: self.d_ff,
            variant,
            alpha: 0.01,
            temperature: 16.0,
            dropout: 0.2,
            freeze_embeddings: false,
        };
        config.validate()?;
        if self.enabled > self.domains || self.batch == 0 || self.max_len == 0 {
            return Err(Error::Config("need enabled ≤ domains and a non-empty batch".into()));
        }
        Ok(config)
    }

    /// Runs the check: gradients of the full loss at `epoch` with respect to
    /// every parameter, including the enablement bias when present.
    pub fn run(&self, tolerance: f64, step: f64) -> Result<GradCheckReport> {
        let config = self.model_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let model = Model::new(config.clone(), &mut rng)?;
        // The snapshot is a separately initialized model, so its targets
        // differ from the current attention weights.
        let snapshot = DistillSnapshot::capture(&Model::new(config.clone(), &mut rng)?.params, 0);

        let tokens: Vec<Vec<usize>> = (0..self.batch)
            .map(|_| {
                let len = rng.random_range(1..=self.max_len);
                (0..len).map(|_| rng.random_range(0..self.vocab)).collect()
            })
            .collect();
        let enabled: Vec<Vec<usize>> = (0..self.batch)
            .map(|_| {
                let mut e = sample(&mut rng, self.domains, self.enabled).into_vec();
                e.sort_unstable();
                e
            })
            .collect();
        // Half of the examples have their ground truth enabled.
        let gold: Vec<usize> = enabled
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if i % 2 == 0 && !e.is_empty() {
                    e[0]
                } else {
                    (0..self.domains).find(|d| !e.contains(d)).unwrap_or(0)
                }
            })
            .collect();
        let masks = DropoutMask::sample_pair(self.batch, self.d_emb, self.d_hidden, config.dropout, &mut rng);
        let token_refs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
        let mask = crate::attention::enabled_mask(&enabled, self.domains)?;
        let soft = snapshot.soft_targets(&token_refs, &mask, config.temperature)?;

        let params: Vec<Array> = model.params.named().into_iter().map(|(_, a)| a.clone()).collect();
        let report = grad_check(&params, tolerance, step, |tape, vars| {
            let vars = ModelVars::from_ordered(vars, self.d_hidden).map_err(to_num)?;
            let dropout = self.dropout.then(|| DropoutVars::register(tape, &masks));
            let fwd = model
                .forward(tape, &vars, &token_refs, &enabled, dropout.as_ref())
                .map_err(to_num)?;
            let loss = model
                .batch_loss(tape, &fwd, &gold, self.epoch, Some(&soft))
                .map_err(to_num)?;
            Ok(loss.total)
        })?;
        Ok(report)
    }
}

fn to_num(e: Error) -> numcore::NumError {
    match e {
        Error::Numeric(n) => n,
        other => numcore::NumError::InvalidArgument(other.to_string()),
    }
}
