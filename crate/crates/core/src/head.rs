use numcore::{sigmoid, xavier_init, Array, Tape, Var};
use rand::Rng;

use crate::attention::{enabled_mask, LossValue};
use crate::error::{Error, Result};

/// Single-hidden-layer feed-forward classifier over `[u ; c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `2·dim(u) × d_ff`
    pub hidden_w: Array,
    /// `1 × d_ff`
    pub hidden_b: Array,
    /// `d_ff × n`
    pub output_w: Array,
    /// `1 × n`
    pub output_b: Array,
    /// Shared scalar added to the logit of every enabled domain.
    pub enablement_bias: Option<Array>,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(input: usize, d_ff: usize, domains: usize, with_bias: bool, rng: &mut R) -> Result<Self> {
        Ok(Self {
            hidden_w: xavier_init(input, d_ff, rng)?,
            hidden_b: xavier_init(1, d_ff, rng)?,
            output_w: xavier_init(d_ff, domains, rng)?,
            output_b: xavier_init(1, domains, rng)?,
            enablement_bias: with_bias.then(|| Array::scalar(0.0)),
        })
    }

    pub fn domains(&self) -> usize {
        self.output_w.cols()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub hidden_w: Var,
    pub hidden_b: Var,
    pub output_w: Var,
    pub output_b: Var,
    pub enablement_bias: Option<Var>,
}

impl HeadVars {
    pub fn register(tape: &mut Tape, p: &HeadParams, trainable: bool) -> Self {
        let mut leaf = |a: &Array| {
            if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        Self {
            hidden_w: leaf(&p.hidden_w),
            hidden_b: leaf(&p.hidden_b),
            output_w: leaf(&p.output_w),
            output_b: leaf(&p.output_b),
            enablement_bias: p.enablement_bias.as_ref().map(leaf),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    pub probs: Var,
}

/// `logits = W₂·selu(W₁·[u;c] + b₁) + b₂ (+ b_enb on enabled domains)`, `o = σ(logits)`.
pub fn predict_batch(tape: &mut Tape, u: Var, c: Var, mask: &Array, vars: &HeadVars) -> Result<HeadOutput> {
    let joint = tape.concat(&[u, c])?;
    let hidden = tape.matmul(joint, vars.hidden_w)?;
    let hidden = tape.add_row(hidden, vars.hidden_b)?;
    let hidden = tape.selu(hidden)?;
    let logits = tape.matmul(hidden, vars.output_w)?;
    let mut logits = tape.add_row(logits, vars.output_b)?;
    if let Some(b) = vars.enablement_bias {
        let m = tape.constant(mask.clone());
        let shift = tape.mul_scalar(m, b)?;
        logits = tape.add(logits, shift)?;
    }
    let probs = tape.sigmoid(logits)?;
    Ok(HeadOutput { logits, probs })
}

/// `L_m` summed over the batch against one-hot ground truths.
pub fn main_loss_batch(tape: &mut Tape, probs: Var, gold: &[usize]) -> Result<Var> {
    let (rows, n) = tape.value(probs).shape();
    let mut targets = Array::zeros(rows, n);
    for (r, &g) in gold.iter().enumerate() {
        if g >= n {
            return Err(Error::UnknownDomainId { id: g, n });
        }
        targets.set(r, g, 1.0);
    }
    let weights = Array::filled(rows, n, 1.0);
    Ok(tape.binary_cross_entropy(probs, &targets, &weights)?)
}

/// Domain ids by descending score; ties go to the lower id.
///
/// Ranking uses logits, which order identically to the sigmoid confidences
/// but do not collapse to ties when confidences round to 1.0.
pub fn rank_domains(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

/// 1-based rank of `gold` under the [`rank_domains`] ordering.
pub fn rank_of(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > g || (s == g && i < gold))
        .count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub confidences: Vec<f64>,
    pub ranking: Vec<usize>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let confidences = logits.iter().map(|&z| sigmoid(z)).collect();
        let ranking = rank_domains(&logits);
        Self {
            logits,
            confidences,
            ranking,
        }
    }

    pub fn top(&self) -> usize {
        self.ranking[0]
    }
}

/// Per-utterance prediction from the utterance and summary vectors.
pub fn predict(u: &[f64], c: &[f64], enabled: &[usize], params: &HeadParams, bias_enabled: bool) -> Result<Prediction> {
    if bias_enabled && params.enablement_bias.is_none() {
        return Err(Error::Config("enablement bias requested but the head has none".into()));
    }
    let mask = enabled_mask(&[enabled], params.domains())?;
    let mut tape = Tape::new();
    let mut vars = HeadVars::register(&mut tape, params, false);
    if !bias_enabled {
        vars.enablement_bias = None;
    }
    let u = tape.constant(Array::row(u.to_vec()));
    let c = tape.constant(Array::row(c.to_vec()));
    let out = predict_batch(&mut tape, u, c, &mask, &vars)?;
    Ok(Prediction::from_logits(tape.value(out.logits).as_slice().to_vec()))
}

/// `L_m` for one prediction.
pub fn main_loss(prediction: &Prediction, ground_truth: usize) -> Result<LossValue> {
    let n = prediction.confidences.len();
    if ground_truth >= n {
        return Err(Error::UnknownDomainId { id: ground_truth, n });
    }
    let mut tape = Tape::new();
    let probs = tape.constant(Array::row(prediction.confidences.clone()));
    let loss = main_loss_batch(&mut tape, probs, &[ground_truth])?;
    Ok(LossValue {
        value: tape.value(loss).as_slice()[0],
        saturations: tape.saturations(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prediction(confidences: Vec<f64>) -> Prediction {
        let ranking = rank_domains(&confidences);
        Prediction {
            logits: vec![0.0; confidences.len()],
            confidences,
            ranking,
        }
    }

    fn small_head(bias: f64) -> HeadParams {
        HeadParams {
            hidden_w: Array::from_rows(&[vec![0.5, -1.0], vec![0.25, 0.5], vec![1.0, 0.0]]).unwrap(),
            hidden_b: Array::row(vec![0.1, -0.2]),
            output_w: Array::from_rows(&[vec![1.0, -0.5], vec![0.3, 2.0]]).unwrap(),
            output_b: Array::row(vec![0.0, 0.05]),
            enablement_bias: Some(Array::scalar(bias)),
        }
    }

    #[test]
    fn main_loss_reference_values() {
        let l = main_loss(&prediction(vec![0.5]), 0).unwrap().value;
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = main_loss(&prediction(vec![0.9, 0.1]), 0).unwrap().value;
        assert!((l - 0.210_721).abs() < 1e-6);
        let perfect = main_loss(&prediction(vec![1.0, 0.0, 0.0]), 0).unwrap();
        assert!(perfect.value <= 3.0 * 1.1e-12);
        assert_eq!(perfect.saturations, 3);
        assert!(main_loss(&prediction(vec![0.5]), 1).is_err());
    }

    #[test]
    fn two_domain_hand_evaluation() {
        // u = (1, −2), c = (0.5); hidden pre = (1·0.5 − 2·0.25 + 0.5·1 + 0.1,
        // 1·−1 − 2·0.5 + 0 − 0.2) = (0.6, −2.2)
        let h0 = 1.050_700_987_355_480_5 * 0.6;
        let h1 = 1.050_700_987_355_480_5 * 1.673_263_242_354_377_2 * ((-2.2f64).exp() - 1.0);
        let z0 = h0 * 1.0 + h1 * 0.3;
        let z1 = h0 * -0.5 + h1 * 2.0 + 0.05 + 0.7;
        let p = predict(&[1.0, -2.0], &[0.5], &[1], &small_head(0.7), true).unwrap();
        assert!((p.logits[0] - z0).abs() < 1e-12);
        assert!((p.logits[1] - z1).abs() < 1e-12);
        assert!((p.confidences[0] - 1.0 / (1.0 + (-z0).exp())).abs() < 1e-12);
        assert!((p.confidences[1] - 1.0 / (1.0 + (-z1).exp())).abs() < 1e-12);
    }

    #[test]
    fn zero_bias_matches_disabled_bias() {
        let head = small_head(0.0);
        let a = predict(&[0.3, 0.1], &[-0.4], &[0, 1], &head, false).unwrap();
        let b = predict(&[0.3, 0.1], &[-0.4], &[0, 1], &head, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn positive_bias_lifts_only_enabled_domains() {
        let off = predict(&[0.3, 0.1], &[-0.4], &[1], &small_head(0.8), false).unwrap();
        let on = predict(&[0.3, 0.1], &[-0.4], &[1], &small_head(0.8), true).unwrap();
        assert_eq!(on.confidences[0], off.confidences[0]);
        assert!(on.confidences[1] > off.confidences[1]);
        assert!((on.logits[1] - off.logits[1] - 0.8).abs() < 1e-12);
        assert!(predict(&[0.3, 0.1], &[-0.4], &[1], &HeadParams { enablement_bias: None, ..small_head(0.0) }, true).is_err());
    }

    #[test]
    fn confidences_are_not_a_distribution() {
        let head = HeadParams {
            output_b: Array::row(vec![3.0, 3.0]),
            ..small_head(0.0)
        };
        let p = predict(&[0.0, 0.0], &[0.0], &[], &head, false).unwrap();
        assert!(p.confidences.iter().sum::<f64>() > 1.0);
    }

    #[test]
    fn ranking_ties_prefer_lower_id() {
        assert_eq!(rank_domains(&[0.2, 0.9, 0.2, 0.9]), vec![1, 3, 0, 2]);
        assert_eq!(rank_of(&[0.2, 0.9, 0.2, 0.9], 3), 2);
        assert_eq!(rank_of(&[0.2, 0.9, 0.2, 0.9], 2), 4);
    }
}
