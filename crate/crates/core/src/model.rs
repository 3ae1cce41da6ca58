//! Full classifier: encoder → enablement attention → feed-forward head.

use std::fmt;

use numcore::{Array, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{
    attend_batch, beta_schedule, distillation_loss_batch, enabled_mask, soft_target_matrix,
    supervised_loss_batch, AttentionMode, AttentionResult, AttentionVars,
};
use crate::encoder::{encode_batch, DropoutVars, EncoderParams, EncoderVars, LstmParams, LstmVars};
use crate::error::{Error, Result};
use crate::head::{main_loss_batch, predict_batch, HeadOutput, HeadParams, HeadVars, Prediction};

/// Which attention activation and auxiliary terms a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub attention: AttentionMode,
    pub supervised: bool,
    pub distill: bool,
    pub enablement_bias: bool,
}

impl Variant {
    /// The six ablation configurations, numbered 1–6.
    pub fn table(model: u8) -> Option<Self> {
        use AttentionMode::*;
        let v = |attention, supervised, distill, enablement_bias| Self {
            attention,
            supervised,
            distill,
            enablement_bias,
        };
        Some(match model {
            1 => v(Softmax, false, false, false),
            2 => v(Sigmoid, false, false, false),
            3 => v(Sigmoid, true, false, false),
            4 => v(Sigmoid, true, true, false),
            5 => v(Softmax, false, false, true),
            6 => v(Sigmoid, true, true, true),
            _ => return None,
        })
    }

    /// Number of this variant in the ablation table, if it is one of the six.
    pub fn table_number(&self) -> Option<u8> {
        (1..=6).find(|&m| Self::table(m) == Some(*self))
    }

    pub fn uses_aux_losses(&self) -> bool {
        self.supervised || self.distill
    }
}

impl fmt::Display for Variant {
    /// Short tags: `sfm`/`sgmd`, then `spvs`, `sdst`, `bias` when set.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut tags = vec![match self.attention {
            AttentionMode::Softmax => "sfm",
            AttentionMode::Sigmoid => "sgmd",
        }];
        if self.supervised {
            tags.push("spvs");
        }
        if self.distill {
            tags.push("sdst");
        }
        if self.enablement_bias {
            tags.push("bias");
        }
        f.write_str(&tags.join(", "))
    }
}

/// Shapes, variant and loss settings of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub domains: usize,
    pub d_emb: usize,
    pub d_hidden: usize,
    pub d_ff: usize,
    pub variant: Variant,
    pub alpha: f64,
    pub temperature: f64,
    pub dropout: f64,
    pub freeze_embeddings: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab < 2 || self.domains < 2 {
            return bad(format!(
                "need vocab ≥ 2 and domains ≥ 2, got {} and {}",
                self.vocab, self.domains
            ));
        }
        if self.d_emb == 0 || self.d_hidden == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Every learnable array of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    /// `n × 2·d_hidden`; row `e` is the enablement vector of domain `e`.
    pub enablement: Array,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::init(config.vocab, config.d_emb, config.d_hidden, rng)?;
        let enablement = numcore::xavier_init(config.domains, 2 * config.d_hidden, rng)?;
        let head = HeadParams::init(
            4 * config.d_hidden,
            config.d_ff,
            config.domains,
            config.variant.enablement_bias,
            rng,
        )?;
        Ok(Self {
            encoder,
            enablement,
            head,
        })
    }

    /// Arrays with stable names, in canonical order.
    pub fn named(&self) -> Vec<(String, &Array)> {
        let mut out = vec![("encoder.embedding".to_string(), &self.encoder.embedding)];
        for (dir, lstm) in [("forward", &self.encoder.forward), ("backward", &self.encoder.backward)] {
            for (name, a) in LstmParams::NAMES.iter().zip(lstm.arrays()) {
                out.push((format!("encoder.{dir}.{name}"), a));
            }
        }
        out.push(("enablement".into(), &self.enablement));
        out.push(("head.hidden_w".into(), &self.head.hidden_w));
        out.push(("head.hidden_b".into(), &self.head.hidden_b));
        out.push(("head.output_w".into(), &self.head.output_w));
        out.push(("head.output_b".into(), &self.head.output_b));
        if let Some(b) = &self.head.enablement_bias {
            out.push(("head.enablement_bias".into(), b));
        }
        out
    }

    /// Mutable arrays in the same order as [`ModelParams::named`].
    pub fn arrays_mut(&mut self) -> Vec<&mut Array> {
        let mut out = vec![&mut self.encoder.embedding];
        out.extend(self.encoder.forward.arrays_mut());
        out.extend(self.encoder.backward.arrays_mut());
        out.push(&mut self.enablement);
        out.push(&mut self.head.hidden_w);
        out.push(&mut self.head.hidden_b);
        out.push(&mut self.head.output_w);
        out.push(&mut self.head.output_b);
        if let Some(b) = &mut self.head.enablement_bias {
            out.push(b);
        }
        out
    }

    /// Rebuilds parameters from `(name, array)` pairs in canonical order.
    pub fn from_named(config: &ModelConfig, arrays: Vec<(String, Array)>) -> Result<Self> {
        let mut template = Self::zeros(config);
        let expected: Vec<(String, (usize, usize))> =
            template.named().into_iter().map(|(n, a)| (n, a.shape())).collect();
        if expected.len() != arrays.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                expected.len(),
                arrays.len()
            )));
        }
        for ((slot, (exp_name, exp_shape)), (name, array)) in
            template.arrays_mut().into_iter().zip(expected).zip(arrays)
        {
            if name != exp_name || array.shape() != exp_shape {
                return Err(Error::Checkpoint(format!(
                    "array `{name}` {:?} does not match expected `{exp_name}` {exp_shape:?}",
                    array.shape()
                )));
            }
            *slot = array;
        }
        Ok(template)
    }

    fn zeros(config: &ModelConfig) -> Self {
        let h = config.d_hidden;
        Self {
            encoder: EncoderParams {
                embedding: Array::zeros(config.vocab, config.d_emb),
                forward: LstmParams::zeros(config.d_emb, h),
                backward: LstmParams::zeros(config.d_emb, h),
            },
            enablement: Array::zeros(config.domains, 2 * h),
            head: HeadParams {
                hidden_w: Array::zeros(4 * h, config.d_ff),
                hidden_b: Array::zeros(1, config.d_ff),
                output_w: Array::zeros(config.d_ff, config.domains),
                output_b: Array::zeros(1, config.domains),
                enablement_bias: config.variant.enablement_bias.then(|| Array::zeros(1, 1)),
            },
        }
    }

    pub fn checksum(&self) -> String {
        checksum(self.named().into_iter().map(|(_, a)| a))
    }
}

/// SHA-256 over the little-endian bytes of the arrays, hex encoded.
pub fn checksum<'a>(arrays: impl IntoIterator<Item = &'a Array>) -> String {
    let mut hasher = Sha256::new();
    for a in arrays {
        hasher.update((a.rows() as u64).to_le_bytes());
        hasher.update((a.cols() as u64).to_le_bytes());
        for v in a.as_slice() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Tape leaves for every parameter, plus their canonical order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub enablement: Var,
    pub head: HeadVars,
}

impl ModelVars {
    pub fn register(tape: &mut Tape, params: &ModelParams, trainable: bool, freeze_embeddings: bool) -> Self {
        let encoder = EncoderVars::register(tape, &params.encoder, trainable, freeze_embeddings);
        let enablement = if trainable {
            tape.param(params.enablement.clone())
        } else {
            tape.constant(params.enablement.clone())
        };
        let head = HeadVars::register(tape, &params.head, trainable);
        Self {
            encoder,
            enablement,
            head,
        }
    }

    /// Rebuilds the structure from leaves in [`ModelVars::ordered`] order.
    pub fn from_ordered(vars: &[Var], hidden: usize) -> Result<Self> {
        if vars.len() != 16 && vars.len() != 17 {
            return Err(Error::Invalid(format!("expected 16 or 17 parameter leaves, got {}", vars.len())));
        }
        let lstm = |v: &[Var]| LstmVars {
            input: v[0],
            recurrent: v[1],
            bias: v[2],
            peephole_forget: v[3],
            peephole_output: v[4],
            hidden,
        };
        Ok(Self {
            encoder: EncoderVars {
                embedding: vars[0],
                forward: lstm(&vars[1..6]),
                backward: lstm(&vars[6..11]),
            },
            enablement: vars[11],
            head: HeadVars {
                hidden_w: vars[12],
                hidden_b: vars[13],
                output_w: vars[14],
                output_b: vars[15],
                enablement_bias: vars.get(16).copied(),
            },
        })
    }

    /// Vars in the order of [`ModelParams::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.encoder.embedding];
        out.extend(self.encoder.forward.vars());
        out.extend(self.encoder.backward.vars());
        out.push(self.enablement);
        out.extend([
            self.head.hidden_w,
            self.head.hidden_b,
            self.head.output_w,
            self.head.output_b,
        ]);
        out.extend(self.head.enablement_bias);
        out
    }
}

/// A tokenized example with domain ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub tokens: Vec<usize>,
    pub gold: usize,
    pub enabled: Vec<usize>,
}

/// Nodes produced by one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub utterance: Var,
    pub attention: AttentionVars,
    pub head: HeadOutput,
    pub mask: Array,
}

/// Loss nodes of a batch; each term is already averaged over the batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub main: Var,
    pub supervised: Option<Var>,
    pub distill: Option<Var>,
    pub total: Var,
}

/// Scalar loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub supervised: f64,
    pub distill: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read(tape: &Tape, vars: &LossVars) -> Self {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).as_slice()[0]);
        Self {
            main: get(Some(vars.main)),
            supervised: get(vars.supervised),
            distill: get(vars.distill),
            total: get(Some(vars.total)),
        }
    }
}

/// Frozen encoder and enablement table that produce distillation targets.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillSnapshot {
    pub encoder: EncoderParams,
    pub enablement: Array,
    pub epoch: usize,
    pub checksum: String,
}

impl DistillSnapshot {
    pub fn capture(params: &ModelParams, epoch: usize) -> Self {
        let encoder = params.encoder.clone();
        let enablement = params.enablement.clone();
        let checksum = Self::compute_checksum(&encoder, &enablement);
        Self {
            encoder,
            enablement,
            epoch,
            checksum,
        }
    }

    fn compute_checksum(encoder: &EncoderParams, enablement: &Array) -> String {
        let mut arrays = vec![&encoder.embedding];
        arrays.extend(encoder.forward.arrays());
        arrays.extend(encoder.backward.arrays());
        arrays.push(enablement);
        checksum(arrays)
    }

    /// Recomputes the checksum of the stored arrays.
    pub fn current_checksum(&self) -> String {
        Self::compute_checksum(&self.encoder, &self.enablement)
    }

    /// Soft targets for a batch; computed without any trainable leaves, so
    /// no gradient can reach the snapshot.
    pub fn soft_targets(&self, tokens: &[&[usize]], mask: &Array, temperature: f64) -> Result<Array> {
        let mut tape = Tape::new();
        let vars = EncoderVars::register(&mut tape, &self.encoder, false, true);
        let u = encode_batch(&mut tape, &vars, tokens, None)?;
        soft_target_matrix(tape.value(u), &self.enablement, mask, temperature)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars::register(tape, &self.params, trainable, self.config.freeze_embeddings)
    }

    /// Batched forward pass. `dropout` is present only in training.
    pub fn forward<S: AsRef<[usize]>>(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        tokens: &[&[usize]],
        enabled: &[S],
        dropout: Option<&[DropoutVars; 2]>,
    ) -> Result<ForwardVars> {
        if tokens.len() != enabled.len() {
            return Err(Error::Invalid(format!(
                "{} token sequences but {} enabled sets",
                tokens.len(),
                enabled.len()
            )));
        }
        let mask = enabled_mask(enabled, self.config.domains)?;
        let utterance = encode_batch(tape, &vars.encoder, tokens, dropout)?;
        let attention = attend_batch(tape, utterance, vars.enablement, &mask, self.config.variant.attention)?;
        let head = predict_batch(tape, utterance, attention.summary, &mask, &vars.head)?;
        Ok(ForwardVars {
            utterance,
            attention,
            head,
            mask,
        })
    }

    /// `L = L_m + α·((1 − β^t)·L_a + β^t·L_d)` averaged over the batch, with
    /// terms the variant disables left out. `soft_targets` is required only
    /// when distillation is on and `β^t > 0`.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        fwd: &ForwardVars,
        gold: &[usize],
        epoch: usize,
        soft_targets: Option<&Array>,
    ) -> Result<LossVars> {
        let scale = 1.0 / gold.len().max(1) as f64;
        let main = main_loss_batch(tape, fwd.head.probs, gold)?;
        let main = tape.scale(main, scale)?;
        let variant = self.config.variant;
        let beta = beta_schedule(epoch as i64)?;
        let alpha = self.config.alpha;

        let supervised = if variant.supervised {
            let l = supervised_loss_batch(tape, fwd.attention.weights, &fwd.mask, gold)?;
            Some(tape.scale(l, scale)?)
        } else {
            None
        };
        let distill = if variant.distill && beta > 0.0 {
            let soft = soft_targets.ok_or(Error::MissingSnapshot { epoch })?;
            let l = distillation_loss_batch(tape, fwd.attention.weights, &fwd.mask, soft)?;
            Some(tape.scale(l, scale)?)
        } else {
            None
        };

        let mut total = main;
        if let Some(l) = supervised {
            let w = tape.scale(l, alpha * (1.0 - beta))?;
            total = tape.add(total, w)?;
        }
        if let Some(l) = distill {
            let w = tape.scale(l, alpha * beta)?;
            total = tape.add(total, w)?;
        }
        Ok(LossVars {
            main,
            supervised,
            distill,
            total,
        })
    }

    /// Loss of a single example in evaluation mode (no dropout, the
    /// example's own enabled set).
    pub fn total_loss(
        &self,
        example: &EncodedExample,
        epoch: usize,
        snapshot: Option<&DistillSnapshot>,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let tokens = [example.tokens.as_slice()];
        let enabled = [example.enabled.as_slice()];
        let fwd = self.forward(&mut tape, &vars, &tokens, &enabled, None)?;
        let needs_targets = self.config.variant.distill && beta_schedule(epoch as i64)? > 0.0;
        let soft = match (needs_targets, snapshot) {
            (true, Some(s)) => Some(s.soft_targets(&tokens, &fwd.mask, self.config.temperature)?),
            (true, None) => return Err(Error::MissingSnapshot { epoch }),
            (false, _) => None,
        };
        let loss = self.batch_loss(&mut tape, &fwd, &[example.gold], epoch, soft.as_ref())?;
        Ok(LossBreakdown::read(&tape, &loss))
    }

    /// Logits for a list of examples, evaluated in chunks.
    pub fn logits(&self, examples: &[&EncodedExample]) -> Result<Array> {
        const CHUNK: usize = 256;
        let mut out = Array::zeros(examples.len(), self.config.domains);
        for (ci, chunk) in examples.chunks(CHUNK).enumerate() {
            let mut tape = Tape::new();
            let vars = self.register(&mut tape, false);
            let tokens: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
            let enabled: Vec<&[usize]> = chunk.iter().map(|e| e.enabled.as_slice()).collect();
            let fwd = self.forward(&mut tape, &vars, &tokens, &enabled, None)?;
            let logits = tape.value(fwd.head.logits);
            for r in 0..chunk.len() {
                out.row_slice_mut(ci * CHUNK + r).copy_from_slice(logits.row_slice(r));
            }
        }
        Ok(out)
    }

    pub fn predict(&self, example: &EncodedExample) -> Result<Prediction> {
        let logits = self.logits(&[example])?;
        Ok(Prediction::from_logits(logits.as_slice().to_vec()))
    }

    /// Attention over the example's own enabled set, in its listed order.
    pub fn attention(&self, example: &EncodedExample) -> Result<AttentionResult> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let fwd = self.forward(&mut tape, &vars, &[example.tokens.as_slice()], &[example.enabled.as_slice()], None)?;
        let scores = tape.value(fwd.attention.scores);
        let weights = tape.value(fwd.attention.weights);
        Ok(AttentionResult {
            enabled: example.enabled.clone(),
            scores: example.enabled.iter().map(|&e| scores.get(0, e)).collect(),
            weights: example.enabled.iter().map(|&e| weights.get(0, e)).collect(),
            summary: tape.value(fwd.attention.summary).as_slice().to_vec(),
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config(model: u8) -> ModelConfig {
        ModelConfig {
            vocab: 12,
            domains: 5,
            d_emb: 4,
            d_hidden: 3,
            d_ff: 6,
            variant: Variant::table(model).unwrap(),
            alpha: 0.01,
            temperature: 16.0,
            dropout: 0.2,
            freeze_embeddings: false,
        }
    }

    fn example() -> EncodedExample {
        EncodedExample {
            tokens: vec![2, 5, 7],
            gold: 3,
            enabled: vec![1, 3, 4],
        }
    }

    #[test]
    fn variant_table_and_labels() {
        let labels: Vec<String> = (1..=6).map(|m| Variant::table(m).unwrap().to_string()).collect();
        assert_eq!(
            labels,
            ["sfm", "sgmd", "sgmd, spvs", "sgmd, spvs, sdst", "sfm, bias", "sgmd, spvs, sdst, bias"]
        );
        assert!(Variant::table(0).is_none() && Variant::table(7).is_none());
        for m in 1..=6 {
            assert_eq!(Variant::table(m).unwrap().table_number(), Some(m));
        }
    }

    #[test]
    fn named_round_trip_and_shape_errors() {
        let cfg = tiny_config(6);
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let named: Vec<(String, Array)> = params.named().into_iter().map(|(n, a)| (n, a.clone())).collect();
        assert_eq!(named.len(), 17);
        let back = ModelParams::from_named(&cfg, named.clone()).unwrap();
        assert_eq!(back, params);

        let mut broken = named;
        broken[0].1 = Array::zeros(1, 1);
        assert!(ModelParams::from_named(&cfg, broken).is_err());
    }

    #[test]
    fn vars_order_matches_named_order() {
        let cfg = tiny_config(5);
        let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, true);
        for ((_, a), v) in model.params.named().into_iter().zip(vars.ordered()) {
            assert_eq!(tape.value(v), a);
        }
    }

    #[test]
    fn model_two_total_is_main_loss() {
        let model = Model::new(tiny_config(2), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let l = model.total_loss(&example(), 3, None).unwrap();
        assert_eq!(l.total, l.main);
        assert_eq!(l.supervised, 0.0);
    }

    #[test]
    fn model_three_adds_decayed_supervision() {
        let model = Model::new(tiny_config(3), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for t in [0usize, 1, 7] {
            let l = model.total_loss(&example(), t, None).unwrap();
            let beta = beta_schedule(t as i64).unwrap();
            assert!(l.supervised > 0.0);
            assert_eq!(l.distill, 0.0);
            assert!((l.total - (l.main + 0.01 * (1.0 - beta) * l.supervised)).abs() < 1e-15);
        }
    }

    #[test]
    fn distillation_requires_snapshot_after_epoch_zero() {
        let model = Model::new(tiny_config(4), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(model.total_loss(&example(), 0, None).is_ok());
        assert!(matches!(
            model.total_loss(&example(), 1, None),
            Err(Error::MissingSnapshot { epoch: 1 })
        ));
        let snap = DistillSnapshot::capture(&model.params, 0);
        let l = model.total_loss(&example(), 1, Some(&snap)).unwrap();
        assert!(l.distill > 0.0);
    }

    #[test]
    fn batched_logits_match_single_predictions() {
        let model = Model::new(tiny_config(6), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let a = example();
        let b = EncodedExample {
            tokens: vec![3, 4, 5, 6, 8, 9],
            gold: 0,
            enabled: vec![],
        };
        let logits = model.logits(&[&a, &b]).unwrap();
        for (r, e) in [&a, &b].into_iter().enumerate() {
            let single = model.predict(e).unwrap();
            for (x, y) in single.logits.iter().zip(logits.row_slice(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
