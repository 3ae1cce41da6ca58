//! Training loop: enablement randomization, clipping, Adam, best-dev
//! selection and the distillation snapshot protocol.

use std::path::{Path, PathBuf};
use std::time::Instant;

use numcore::{clip_gradients, global_norm, AdamConfig, AdamState, Array, ClipMode, NumError, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::beta_schedule;
use crate::checkpoint::Checkpoint;
use crate::datagen::{Corpus, DomainCatalog, Example};
use crate::embeddings::PretrainedVectors;
use crate::encoder::{DropoutMask, DropoutVars};
use crate::error::{Error, Result};
use crate::head::rank_domains;
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{DistillSnapshot, EncodedExample, LossBreakdown, Model, ModelConfig, Variant};
use crate::vocab::{tokenize, Vocabulary};

/// Gradient clipping rule, as written in config files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipSetting {
    #[default]
    GlobalNorm,
    Value,
}

impl From<ClipSetting> for ClipMode {
    fn from(c: ClipSetting) -> Self {
        match c {
            ClipSetting::GlobalNorm => ClipMode::GlobalNorm,
            ClipSetting::Value => ClipMode::Value,
        }
    }
}

/// Every knob of a training run. Serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub clip_mode: ClipSetting,
    pub alpha: f64,
    pub temperature: f64,
    pub randomize_probability: f64,
    pub seed: u64,
    /// Ablation model number 1–6; ignored when `variant` is given.
    pub model: u8,
    /// Arbitrary flag combination overriding `model`.
    pub variant: Option<Variant>,
    pub d_emb: usize,
    pub d_hidden: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub freeze_embeddings: bool,
    pub pretrained: Option<PathBuf>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 25,
            batch_size: 128,
            lr: adam.lr,
            clip: 5.0,
            clip_mode: ClipSetting::GlobalNorm,
            alpha: 0.01,
            temperature: 16.0,
            randomize_probability: 0.5,
            seed: 1,
            model: 4,
            variant: None,
            d_emb: 50,
            d_hidden: 64,
            d_ff: 128,
            dropout: 0.2,
            freeze_embeddings: false,
            pretrained: None,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolved_variant(&self) -> Result<Variant> {
        match self.variant {
            Some(v) => Ok(v),
            None => Variant::table(self.model)
                .ok_or_else(|| Error::Config(format!("model must be 1–6, got {}", self.model))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_variant()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if !(0.0..=1.0).contains(&self.randomize_probability) {
            return bad(format!(
                "randomize_probability must be in [0, 1], got {}",
                self.randomize_probability
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, vocab: usize, domains: usize) -> Result<ModelConfig> {
        let config = ModelConfig {
            vocab,
            domains,
            d_emb: self.d_emb,
            d_hidden: self.d_hidden,
            d_ff: self.d_ff,
            variant: self.resolved_variant()?,
            alpha: self.alpha,
            temperature: self.temperature,
            dropout: self.dropout,
            freeze_embeddings: self.freeze_embeddings,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Independent random streams of one run.
pub struct RunRngs {
    pub init: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
    pub randomize: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            init: stream(0),
            shuffle: stream(1),
            randomize: stream(2),
            dropout: stream(3),
        }
    }
}

/// Replacement of enabled sets with random ones during training only.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnablementRandomizer {
    pub probability: f64,
    pub train_draws: u64,
    pub train_replacements: u64,
    pub inference_calls: u64,
    pub inference_replacements: u64,
}

impl EnablementRandomizer {
    pub fn new(probability: f64) -> Self {
        Self {
            probability,
            ..Self::default()
        }
    }

    /// Enabled set for one training visit of an example: with the
    /// configured probability, a uniformly drawn set of distinct domains of
    /// the same size replaces the original.
    pub fn training<R: Rng + ?Sized>(&mut self, enabled: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
        self.train_draws += 1;
        if self.probability > 0.0 && rng.random::<f64>() < self.probability {
            self.train_replacements += 1;
            let mut set = rand::seq::index::sample(rng, n, enabled.len().min(n)).into_vec();
            set.sort_unstable();
            set
        } else {
            enabled.to_vec()
        }
    }

    /// Enabled set at inference: always the true one.
    pub fn inference(&mut self, enabled: &[usize]) -> Vec<usize> {
        self.inference_calls += 1;
        enabled.to_vec()
    }

    pub fn replacement_rate(&self) -> f64 {
        if self.train_draws == 0 {
            0.0
        } else {
            self.train_replacements as f64 / self.train_draws as f64
        }
    }
}

/// Index of the best dev top-1 so far; ties keep the earliest epoch.
pub fn snapshot_policy(dev_history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in dev_history.iter().enumerate() {
        if best.is_none_or(|b| v > dev_history[b]) {
            best = Some(i);
        }
    }
    best
}

/// Tokenizes and maps examples to ids; empty utterances are rejected.
pub fn encode_examples(examples: &[Example], vocab: &Vocabulary) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|e| {
            let tokens = vocab.encode(&tokenize(&e.text));
            if tokens.is_empty() {
                return Err(Error::EmptyUtterance);
            }
            Ok(EncodedExample {
                tokens,
                gold: e.label,
                enabled: e.enabled.clone(),
            })
        })
        .collect()
}

/// Vocabulary over the training split.
pub fn build_vocab(train: &[Example]) -> Vocabulary {
    let tokenized: Vec<Vec<String>> = train.iter().map(|e| tokenize(&e.text)).collect();
    Vocabulary::from_sequences(tokenized.iter().map(|t| t.as_slice()))
}

/// Ranks and metrics of a model on examples, using their true enabled sets.
pub fn evaluate(
    model: &Model,
    examples: &[EncodedExample],
    randomizer: &mut EnablementRandomizer,
) -> Result<(Metrics, Vec<Vec<usize>>)> {
    let inputs: Vec<EncodedExample> = examples
        .iter()
        .map(|e| EncodedExample {
            enabled: randomizer.inference(&e.enabled),
            ..e.clone()
        })
        .collect();
    let refs: Vec<&EncodedExample> = inputs.iter().collect();
    let logits = model.logits(&refs)?;
    let rankings: Vec<Vec<usize>> = (0..inputs.len()).map(|r| rank_domains(logits.row_slice(r))).collect();
    let gold: Vec<usize> = inputs.iter().map(|e| e.gold).collect();
    Ok((compute_metrics(&rankings, &gold)?, rankings))
}

/// One row of the run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub beta: f64,
    pub steps: usize,
    /// Loss components averaged over the epoch's batches.
    pub loss: LossBreakdown,
    pub clip_rate: f64,
    pub mean_grad_norm: f64,
    pub saturations: u64,
    pub aux_loss_constructions: u64,
    pub train_replacement_rate: f64,
    pub dev: Metrics,
    pub improved: bool,
    pub snapshot_epoch: Option<usize>,
    pub snapshot_checksum: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub config_hash: String,
    pub variant: String,
    pub model_config: ModelConfig,
    pub selu_lambda: f64,
    pub selu_alpha: f64,
    pub train_examples: usize,
    pub dev_examples: usize,
    pub pretrained_hits: Option<usize>,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
    pub best_dev: Metrics,
    pub randomizer: EnablementRandomizer,
    pub aux_loss_constructions: u64,
    pub snapshot_refreshes: usize,
    /// Whether every snapshot kept its checksum until it was replaced.
    pub snapshot_checksum_stable: bool,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: RunReport,
}

impl TrainOutcome {
    pub fn model(&self) -> Model {
        self.checkpoint.model()
    }
}

/// Trains on `corpus.train`, selects by dev top-1, and returns the best
/// checkpoint with a run report.
pub fn train(config: &TrainConfig, catalog: &DomainCatalog, corpus: &Corpus) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.train.is_empty() || corpus.dev.is_empty() {
        return Err(Error::Invalid("train and dev splits must be non-empty".into()));
    }
    let n = catalog.len();
    let vocab = build_vocab(&corpus.train);
    let train_set = encode_examples(&corpus.train, &vocab)?;
    let dev_set = encode_examples(&corpus.dev, &vocab)?;
    for e in train_set.iter().chain(&dev_set) {
        if e.gold >= n || e.enabled.iter().any(|&d| d >= n) {
            return Err(Error::UnknownDomainId { id: e.gold.max(*e.enabled.iter().max().unwrap_or(&0)), n });
        }
    }
    let model_config = config.model_config(vocab.len(), n)?;
    let variant = model_config.variant;
    let mut rngs = RunRngs::new(config.seed);
    let mut model = Model::new(model_config.clone(), &mut rngs.init)?;
    let pretrained_hits = match &config.pretrained {
        Some(path) => Some(PretrainedVectors::load(path)?.apply(&mut model.params.encoder.embedding, &vocab)?),
        None => None,
    };

    let mut adam = AdamState::new(model.params.named().into_iter().map(|(_, a)| a), config.adam());
    let mut randomizer = EnablementRandomizer::new(config.randomize_probability);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut snapshot: Option<DistillSnapshot> = None;
    let mut snapshot_checksum_stable = true;
    let mut best: Option<(usize, Metrics, Checkpoint)> = None;
    let mut dev_history = Vec::new();
    let mut epochs = Vec::new();
    let mut aux_total = 0u64;
    let mut refreshes = 0usize;
    let config_hash = config.hash();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let beta = beta_schedule(epoch as i64)?;
        order.shuffle(&mut rngs.shuffle);
        let draws_before = (randomizer.train_draws, randomizer.train_replacements);
        let mut sums = LossBreakdown::default();
        let (mut steps, mut clipped, mut norm_sum, mut saturations, mut aux) = (0usize, 0usize, 0.0, 0u64, 0u64);

        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let diverged = |reason: String| Error::Diverged { epoch, step, reason };
            let wrap = |e: Error| match e {
                Error::Numeric(NumError::NonFinite { op }) => diverged(format!("non-finite value in `{op}`")),
                Error::Numeric(NumError::NonFiniteNorm) => diverged("non-finite gradient norm".into()),
                other => other,
            };
            let tokens: Vec<&[usize]> = batch.iter().map(|&i| train_set[i].tokens.as_slice()).collect();
            let enabled: Vec<Vec<usize>> = batch
                .iter()
                .map(|&i| randomizer.training(&train_set[i].enabled, n, &mut rngs.randomize))
                .collect();
            let gold: Vec<usize> = batch.iter().map(|&i| train_set[i].gold).collect();

            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true);
            let masks = DropoutMask::sample_pair(batch.len(), config.d_emb, config.d_hidden, config.dropout, &mut rngs.dropout);
            let dropout = (config.dropout > 0.0).then(|| DropoutVars::register(&mut tape, &masks));
            let fwd = model
                .forward(&mut tape, &vars, &tokens, &enabled, dropout.as_ref())
                .map_err(wrap)?;
            let soft = match (&snapshot, variant.distill && beta > 0.0) {
                (Some(s), true) => Some(s.soft_targets(&tokens, &fwd.mask, config.temperature)?),
                _ => None,
            };
            let loss = model.batch_loss(&mut tape, &fwd, &gold, epoch, soft.as_ref()).map_err(wrap)?;
            aux += u64::from(loss.supervised.is_some()) + u64::from(loss.distill.is_some());
            let values = LossBreakdown::read(&tape, &loss);
            if !values.total.is_finite() {
                return Err(diverged(format!("loss is {}", values.total)));
            }
            tape.backward(loss.total).map_err(|e| wrap(e.into()))?;
            saturations += tape.saturations();

            let mut grads: Vec<Array> = vars
                .ordered()
                .into_iter()
                .zip(model.params.named())
                .map(|(v, (_, a))| tape.take_grad(v).unwrap_or_else(|| Array::zeros(a.rows(), a.cols())))
                .collect();
            let norm = global_norm(&grads);
            if !norm.is_finite() {
                return Err(diverged("non-finite gradient norm".into()));
            }
            let kept = clip_gradients(&mut grads, config.clip, config.clip_mode.into()).map_err(|e| wrap(e.into()))?;
            clipped += usize::from(kept < 1.0);
            norm_sum += norm;
            adam.step(&mut model.params.arrays_mut(), &grads).map_err(|e| wrap(e.into()))?;

            sums.main += values.main;
            sums.supervised += values.supervised;
            sums.distill += values.distill;
            sums.total += values.total;
            steps += 1;
        }

        let (dev, _) = evaluate(&model, &dev_set, &mut randomizer)?;
        let improved = snapshot_policy(&{
            dev_history.push(dev.top1);
            dev_history.clone()
        }) == Some(epoch);
        if improved {
            if let Some(s) = &snapshot {
                snapshot_checksum_stable &= s.current_checksum() == s.checksum;
            }
            let s = DistillSnapshot::capture(&model.params, epoch);
            log::debug!("epoch {epoch}: snapshot refreshed ({})", &s.checksum[..12]);
            snapshot = Some(s);
            refreshes += 1;
            let checkpoint = Checkpoint::new(config.clone(), epoch, dev, vocab.clone(), catalog.names(), model.clone());
            best = Some((epoch, dev, checkpoint));
        }
        let k = steps.max(1) as f64;
        let draws = randomizer.train_draws - draws_before.0;
        let replacements = randomizer.train_replacements - draws_before.1;
        let row = EpochReport {
            epoch,
            beta,
            steps,
            loss: LossBreakdown {
                main: sums.main / k,
                supervised: sums.supervised / k,
                distill: sums.distill / k,
                total: sums.total / k,
            },
            clip_rate: clipped as f64 / k,
            mean_grad_norm: norm_sum / k,
            saturations,
            aux_loss_constructions: aux,
            train_replacement_rate: if draws == 0 { 0.0 } else { replacements as f64 / draws as f64 },
            dev,
            improved,
            snapshot_epoch: snapshot.as_ref().map(|s| s.epoch),
            snapshot_checksum: snapshot.as_ref().map(|s| s.checksum.clone()),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch:>2}  loss {:.4} (m {:.4} a {:.4} d {:.4})  dev top1 {:.4} mrr {:.4} top3 {:.4}{}  {:.1}s",
            row.loss.total,
            row.loss.main,
            row.loss.supervised,
            row.loss.distill,
            dev.top1,
            dev.mrr,
            dev.top3,
            if improved { " *" } else { "" },
            row.seconds
        );
        aux_total += aux;
        epochs.push(row);
    }
    if let Some(s) = &snapshot {
        snapshot_checksum_stable &= s.current_checksum() == s.checksum;
    }

    let (best_epoch, best_dev, checkpoint) = match best {
        Some((e, m, c)) => (Some(e), m, c),
        None => {
            // Zero epochs: the untrained model is the result.
            let (dev, _) = evaluate(&model, &dev_set, &mut randomizer)?;
            let c = Checkpoint::new(config.clone(), 0, dev, vocab.clone(), catalog.names(), model.clone());
            (None, dev, c)
        }
    };
    let report = RunReport {
        config: config.clone(),
        config_hash,
        variant: variant.to_string(),
        model_config,
        selu_lambda: numcore::SELU_LAMBDA,
        selu_alpha: numcore::SELU_ALPHA,
        train_examples: train_set.len(),
        dev_examples: dev_set.len(),
        pretrained_hits,
        epochs,
        best_epoch,
        best_dev,
        randomizer,
        aux_loss_constructions: aux_total,
        snapshot_refreshes: refreshes,
        snapshot_checksum_stable,
    };
    Ok(TrainOutcome { checkpoint, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_toml_round_trip() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.lr, c.clip, c.alpha, c.temperature), (25, 128, 2e-4, 5.0, 0.01, 16.0));
        assert_eq!(c.randomize_probability, 0.5);
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let partial = TrainConfig::from_toml("model = 2\nepochs = 3\n").unwrap();
        assert_eq!((partial.model, partial.epochs, partial.batch_size), (2, 3, 128));
        assert!(TrainConfig::from_toml("model = 9\n").is_err());
        assert!(TrainConfig::from_toml("bogus = 1\n").is_err());
        assert_ne!(c.hash(), partial.hash());
    }

    #[test]
    fn snapshot_policy_examples() {
        assert_eq!(snapshot_policy(&[]), None);
        assert_eq!(snapshot_policy(&[0.5, 0.7, 0.6]), Some(1));
        assert_eq!(snapshot_policy(&[0.1, 0.2, 0.3]), Some(2));
        assert_eq!(snapshot_policy(&[0.4, 0.4, 0.4]), Some(0));
    }

    #[test]
    fn randomizer_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut never = EnablementRandomizer::new(0.0);
        for _ in 0..100 {
            assert_eq!(never.training(&[1, 4, 7], 10, &mut rng), vec![1, 4, 7]);
        }
        assert_eq!(never.train_replacements, 0);

        let mut always = EnablementRandomizer::new(1.0);
        for _ in 0..100 {
            let s = always.training(&[1, 4, 7], 10, &mut rng);
            assert_eq!(s.len(), 3);
            assert!(s.windows(2).all(|w| w[0] < w[1]) && s.iter().all(|&d| d < 10));
        }
        assert_eq!(always.train_replacements, 100);
        assert_eq!(always.inference(&[2]), vec![2]);
        assert_eq!((always.inference_calls, always.inference_replacements), (1, 0));
    }
}
