//! Utterance encoder: word embeddings followed by a bidirectional LSTM with
//! coupled input/forget gates and diagonal peephole connections.
//!
//! The utterance vector is `[h_fwd(last) ; h_bwd(first)]`, so its width is
//! twice the hidden size. Batches are padded with [`PAD_ID`]; each row's
//! state is frozen once its true length is exhausted, which makes the final
//! forward state the state at the last real token.

use numcore::{xavier_init, Array, Tape, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::vocab::PAD_ID;

/// Gate blocks are laid out column-wise as `[forget | candidate | output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `d_in × 3h`
    pub input: Array,
    /// `h × 3h`
    pub recurrent: Array,
    /// `1 × 3h`
    pub bias: Array,
    /// `1 × h`, diagonal peephole from `c_{t-1}` into the forget gate.
    pub peephole_forget: Array,
    /// `1 × h`, diagonal peephole from `c_t` into the output gate.
    pub peephole_output: Array,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(d_in: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            input: xavier_init(d_in, 3 * hidden, rng)?,
            recurrent: xavier_init(hidden, 3 * hidden, rng)?,
            bias: xavier_init(1, 3 * hidden, rng)?,
            peephole_forget: xavier_init(1, hidden, rng)?,
            peephole_output: xavier_init(1, hidden, rng)?,
        })
    }

    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        Self {
            input: Array::zeros(d_in, 3 * hidden),
            recurrent: Array::zeros(hidden, 3 * hidden),
            bias: Array::zeros(1, 3 * hidden),
            peephole_forget: Array::zeros(1, hidden),
            peephole_output: Array::zeros(1, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.recurrent.rows()
    }

    pub(crate) fn arrays(&self) -> [&Array; 5] {
        [
            &self.input,
            &self.recurrent,
            &self.bias,
            &self.peephole_forget,
            &self.peephole_output,
        ]
    }

    pub(crate) fn arrays_mut(&mut self) -> [&mut Array; 5] {
        [
            &mut self.input,
            &mut self.recurrent,
            &mut self.bias,
            &mut self.peephole_forget,
            &mut self.peephole_output,
        ]
    }

    pub(crate) const NAMES: [&'static str; 5] =
        ["input", "recurrent", "bias", "peephole_forget", "peephole_output"];
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `|vocab| × d_emb`
    pub embedding: Array,
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(vocab: usize, d_emb: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            embedding: xavier_init(vocab, d_emb, rng)?,
            forward: LstmParams::init(d_emb, hidden, rng)?,
            backward: LstmParams::init(d_emb, hidden, rng)?,
        })
    }

    pub fn d_emb(&self) -> usize {
        self.embedding.cols()
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    /// Width of the utterance vector.
    pub fn output_dim(&self) -> usize {
        2 * self.hidden()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub input: Var,
    pub recurrent: Var,
    pub bias: Var,
    pub peephole_forget: Var,
    pub peephole_output: Var,
    pub hidden: usize,
}

impl LstmVars {
    pub fn register(tape: &mut Tape, p: &LstmParams, trainable: bool) -> Self {
        let mut leaf = |a: &Array| {
            if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        Self {
            input: leaf(&p.input),
            recurrent: leaf(&p.recurrent),
            bias: leaf(&p.bias),
            peephole_forget: leaf(&p.peephole_forget),
            peephole_output: leaf(&p.peephole_output),
            hidden: p.hidden(),
        }
    }

    pub fn vars(&self) -> [Var; 5] {
        [
            self.input,
            self.recurrent,
            self.bias,
            self.peephole_forget,
            self.peephole_output,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub embedding: Var,
    pub forward: LstmVars,
    pub backward: LstmVars,
}

impl EncoderVars {
    pub fn register(tape: &mut Tape, p: &EncoderParams, trainable: bool, freeze_embeddings: bool) -> Self {
        let embedding = if trainable && !freeze_embeddings {
            tape.param(p.embedding.clone())
        } else {
            tape.constant(p.embedding.clone())
        };
        Self {
            embedding,
            forward: LstmVars::register(tape, &p.forward, trainable),
            backward: LstmVars::register(tape, &p.backward, trainable),
        }
    }
}

/// Variational dropout masks for one direction of a batch: one row per
/// sequence, entries `0` or `1/(1 − rate)`, reused at every timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    /// `batch × d_emb`
    pub input: Array,
    /// `batch × hidden`
    pub recurrent: Array,
}

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(batch: usize, d_emb: usize, hidden: usize, rate: f64, rng: &mut R) -> Self {
        let keep = 1.0 - rate;
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            Array::from_vec(rows, cols, data).expect("sized buffer")
        };
        let input = draw(batch, d_emb);
        let recurrent = draw(batch, hidden);
        Self { input, recurrent }
    }

    /// Masks for both directions.
    pub fn sample_pair<R: Rng + ?Sized>(
        batch: usize,
        d_emb: usize,
        hidden: usize,
        rate: f64,
        rng: &mut R,
    ) -> [Self; 2] {
        [
            Self::sample(batch, d_emb, hidden, rate, rng),
            Self::sample(batch, d_emb, hidden, rate, rng),
        ]
    }
}

/// Mask constants placed on a tape once per batch.
#[derive(Clone, Copy, Debug)]
pub struct DropoutVars {
    pub input: Var,
    pub recurrent: Var,
}

impl DropoutVars {
    pub fn register(tape: &mut Tape, masks: &[DropoutMask; 2]) -> [Self; 2] {
        masks.each_ref().map(|m| Self {
            input: tape.constant(m.input.clone()),
            recurrent: tape.constant(m.recurrent.clone()),
        })
    }
}

/// Outputs of one recurrence step; gates are kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct CellOutput {
    pub hidden: Var,
    pub cell: Var,
    pub forget: Var,
    pub input: Var,
}

/// One coupled-gate peephole LSTM step over a batch:
///
/// ```text
/// f = σ(W_f x̃ + R_f h̃ + p_f ⊙ c_prev + b_f)
/// i = 1 − f
/// z = tanh(W_z x̃ + R_z h̃ + b_z)
/// c = f ⊙ c_prev + i ⊙ z
/// o = σ(W_o x̃ + R_o h̃ + p_o ⊙ c + b_o)
/// h = o ⊙ tanh(c)
/// ```
pub fn lstm_cell(
    tape: &mut Tape,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmVars,
    dropout: Option<&DropoutVars>,
) -> Result<CellOutput> {
    let (x, h_in) = match dropout {
        Some(m) => (tape.mul(x, m.input)?, tape.mul(h_prev, m.recurrent)?),
        None => (x, h_prev),
    };
    let h = p.hidden;
    let from_x = tape.matmul(x, p.input)?;
    let from_h = tape.matmul(h_in, p.recurrent)?;
    let pre = tape.add(from_x, from_h)?;
    let pre = tape.add_row(pre, p.bias)?;

    let f_pre = tape.slice_cols(pre, 0, h)?;
    let peep_f = tape.mul_row(c_prev, p.peephole_forget)?;
    let f_pre = tape.add(f_pre, peep_f)?;
    let forget = tape.sigmoid(f_pre)?;
    let input = tape.one_minus(forget)?;

    let z_pre = tape.slice_cols(pre, h, h)?;
    let z = tape.tanh(z_pre)?;
    let kept = tape.mul(forget, c_prev)?;
    let written = tape.mul(input, z)?;
    let cell = tape.add(kept, written)?;

    let o_pre = tape.slice_cols(pre, 2 * h, h)?;
    let peep_o = tape.mul_row(cell, p.peephole_output)?;
    let o_pre = tape.add(o_pre, peep_o)?;
    let out_gate = tape.sigmoid(o_pre)?;
    let squashed = tape.tanh(cell)?;
    let hidden = tape.mul(out_gate, squashed)?;
    Ok(CellOutput {
        hidden,
        cell,
        forget,
        input,
    })
}

/// Per-timestep embedding lookups for a padded batch.
fn embed_steps(tape: &mut Tape, embedding: Var, seqs: &[&[usize]]) -> Result<Vec<Var>> {
    let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    (0..steps)
        .map(|t| {
            let ids: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(PAD_ID)).collect();
            Ok(tape.gather_rows(embedding, &ids)?)
        })
        .collect()
}

fn run_direction(
    tape: &mut Tape,
    inputs: &[Var],
    lengths: &[usize],
    p: &LstmVars,
    dropout: Option<&DropoutVars>,
    reverse: bool,
) -> Result<Var> {
    let batch = lengths.len();
    let mut h = tape.constant(Array::zeros(batch, p.hidden));
    let mut c = tape.constant(Array::zeros(batch, p.hidden));
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..inputs.len()).rev())
    } else {
        Box::new(0..inputs.len())
    };
    for t in order {
        let step = lstm_cell(tape, inputs[t], h, c, p, dropout)?;
        let active: Vec<bool> = lengths.iter().map(|&len| t < len).collect();
        if active.iter().all(|&a| a) {
            h = step.hidden;
            c = step.cell;
        } else {
            h = tape.select_rows(step.hidden, h, &active)?;
            c = tape.select_rows(step.cell, c, &active)?;
        }
    }
    Ok(h)
}

/// Encodes a batch of token-id sequences into a `batch × 2h` node.
///
/// `dropout` carries one mask pair per direction in training mode.
pub fn encode_batch(
    tape: &mut Tape,
    vars: &EncoderVars,
    seqs: &[&[usize]],
    dropout: Option<&[DropoutVars; 2]>,
) -> Result<Var> {
    if seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptyUtterance);
    }
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let inputs = embed_steps(tape, vars.embedding, seqs)?;
    let fwd = run_direction(tape, &inputs, &lengths, &vars.forward, dropout.map(|d| &d[0]), false)?;
    let bwd = run_direction(tape, &inputs, &lengths, &vars.backward, dropout.map(|d| &d[1]), true)?;
    Ok(tape.concat(&[fwd, bwd])?)
}

/// Embedding rows for a token sequence.
pub fn embed(tokens: &[usize], params: &EncoderParams) -> Result<Vec<Vec<f64>>> {
    if tokens.is_empty() {
        return Err(Error::EmptyUtterance);
    }
    tokens
        .iter()
        .map(|&id| {
            if id >= params.embedding.rows() {
                Err(Error::Invalid(format!(
                    "token id {id} outside vocabulary of {}",
                    params.embedding.rows()
                )))
            } else {
                Ok(params.embedding.row_slice(id).to_vec())
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Encodes one utterance. Training mode samples fresh variational dropout
/// masks at `dropout` rate from `rng`; evaluation mode is deterministic.
pub fn encode_utterance<R: Rng + ?Sized>(
    tokens: &[usize],
    params: &EncoderParams,
    mode: Mode,
    dropout: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = EncoderVars::register(&mut tape, params, false, true);
    let masks = match mode {
        Mode::Train => {
            let m = DropoutMask::sample_pair(1, params.d_emb(), params.hidden(), dropout, rng);
            Some(DropoutVars::register(&mut tape, &m))
        }
        Mode::Eval => None,
    };
    let u = encode_batch(&mut tape, &vars, &[tokens], masks.as_ref())?;
    Ok(tape.value(u).as_slice().to_vec())
}
