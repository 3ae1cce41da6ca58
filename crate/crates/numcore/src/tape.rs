//! Tape-based reverse-mode differentiation over dense 2-D arrays.
//!
//! Every op appends a node holding its value and the inputs it needs for
//! the backward rule. [`Tape::backward`] walks the nodes in reverse order
//! and accumulates gradients into every leaf created with [`Tape::param`].
//!
//! ```
//! use numcore::{Array, Tape};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Array::row(vec![1.0, 2.0]));
//! let x = tape.constant(Array::row(vec![3.0, 4.0]));
//! let loss = tape.dot(w, x).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap().as_slice(), &[3.0, 4.0]);
//! ```

use std::fmt;
use std::rc::Rc;

use crate::array::{gemm, Array};
use crate::error::{NumError, Result};

/// SeLU scale λ.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SeLU negative-branch α.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
/// Probabilities fed to log terms are clamped to `[ε, 1 − ε]`.
pub const PROB_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied op with its own backward rule.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Array]) -> Result<Array>;
    /// Returns one gradient per input, shaped like that input.
    fn backward(&self, inputs: &[&Array], output: &Array, grad_out: &Array) -> Vec<Array>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Affine(Var, f64),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Var, Vec<bool>),
    Dot(Var, Var),
    Sum(Var),
    Sigmoid(Var),
    Tanh(Var),
    Selu(Var),
    Log(Var),
    Softmax(Var),
    Bce {
        probs: Var,
        targets: Array,
        weights: Array,
    },
    Custom(Rc<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
    grad: Option<Array>,
}

/// Records a computation for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    saturations: u64,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("saturations", &self.saturations)
            .finish()
    }
}

fn mismatch(op: &'static str, a: &Array, b: &Array) -> NumError {
    NumError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of probabilities clamped by cross-entropy ops so far.
    pub fn saturations(&self) -> u64 {
        self.saturations
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Array> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Array, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = Array::zeros(av.rows(), bv.cols());
        gemm(1.0, av, false, bv, false, 0.0, &mut out);
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(mismatch("matmul_nt", av, bv));
        }
        let mut out = Array::zeros(av.rows(), bv.rows());
        gemm(1.0, av, false, bv, true, 0.0, &mut out);
        self.push("matmul_nt", out, Op::MatMulNT(a, b), &[a, b])
    }

    /// Matrix (`r × c`) times a row vector (`1 × c`), giving `1 × r`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let (mv, xv) = (self.value(m), self.value(x));
        if xv.rows() != 1 || mv.cols() != xv.cols() {
            return Err(mismatch("matvec", mv, xv));
        }
        self.matmul_nt(x, m)
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av
            .as_slice()
            .iter()
            .zip(bv.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Array::from_vec(av.rows(), av.cols(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_row(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(mismatch(name, av, rv));
        }
        let mut out = av.clone();
        let r = rv.as_slice();
        for i in 0..out.rows() {
            for (x, &y) in out.row_slice_mut(i).iter_mut().zip(r) {
                *x = f(*x, y);
            }
        }
        self.push(name, out, op, &[a, row])
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.zip_row("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.zip_row("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    /// `a · s` for a `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        let Some(k) = sv.item() else {
            return Err(mismatch("mul_scalar", av, sv));
        };
        let out = av.map(|x| x * k);
        self.push("mul_scalar", out, Op::MulScalar(a, s), &[a, s])
    }

    /// `k · a + shift`.
    pub fn affine(&mut self, a: Var, k: f64, shift: f64) -> Result<Var> {
        let out = self.value(a).map(|x| k * x + shift);
        self.push("affine", out, Op::Affine(a, k), &[a])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.affine(a, k, 0.0)
    }

    /// `1 − a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 1.0)
    }

    /// Concatenates along columns; all parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(NumError::InvalidArgument("concat of zero parts".into()));
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(mismatch("concat", self.value(first), pv));
            }
            cols += pv.cols();
        }
        let mut out = Array::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            for r in 0..rows {
                out.row_slice_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row_slice(r));
            }
            offset += pv.cols();
        }
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(NumError::ShapeMismatch {
                op: "slice_cols",
                left: av.shape(),
                right: (start, len),
            });
        }
        let mut out = Array::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_slice_mut(r)
                .copy_from_slice(&av.row_slice(r)[start..start + len]);
        }
        self.push("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut out = Array::zeros(ids.len(), tv.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(NumError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    len: tv.rows(),
                });
            }
            out.row_slice_mut(i).copy_from_slice(tv.row_slice(id));
        }
        self.push("gather_rows", out, Op::Gather(table, ids.to_vec()), &[table])
    }

    /// Row `r` of the result comes from `new` when `take_new[r]`, else from `old`.
    pub fn select_rows(&mut self, new: Var, old: Var, take_new: &[bool]) -> Result<Var> {
        let (nv, ov) = (self.value(new), self.value(old));
        if nv.shape() != ov.shape() || take_new.len() != nv.rows() {
            return Err(mismatch("select_rows", nv, ov));
        }
        let mut out = ov.clone();
        for (r, &t) in take_new.iter().enumerate() {
            if t {
                out.row_slice_mut(r).copy_from_slice(nv.row_slice(r));
            }
        }
        self.push(
            "select_rows",
            out,
            Op::SelectRows(new, old, take_new.to_vec()),
            &[new, old],
        )
    }

    /// Sum of the elementwise product, as a `1 × 1` node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("dot", av, bv));
        }
        let s: f64 = av.as_slice().iter().zip(bv.as_slice()).map(|(x, y)| x * y).sum();
        self.push("dot", Array::scalar(s), Op::Dot(a, b), &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Array::scalar(s), Op::Sum(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn selu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(selu);
        self.push("selu", out, Op::Selu(a), &[a])
    }

    /// Natural log; non-positive inputs are a numerical failure.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("log", out, Op::Log(a), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = masked_softmax(av, None);
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Row-wise softmax restricted to entries where `mask` is non-zero.
    /// Masked entries are exactly 0; an all-masked row yields all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &Array) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != mask.shape() {
            return Err(mismatch("masked_softmax", av, mask));
        }
        let out = masked_softmax(av, Some(mask));
        self.push("masked_softmax", out, Op::Softmax(a), &[a])
    }

    /// Weighted binary cross-entropy summed over all entries:
    /// `−Σ w·(y·ln p + (1 − y)·ln(1 − p))` with `p` clamped to `[ε, 1 − ε]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &Array, weights: &Array) -> Result<Var> {
        let pv = self.value(probs);
        if pv.shape() != targets.shape() {
            return Err(mismatch("binary_cross_entropy", pv, targets));
        }
        if pv.shape() != weights.shape() {
            return Err(mismatch("binary_cross_entropy", pv, weights));
        }
        let mut total = 0.0;
        let mut saturated = 0;
        for ((&p, &y), &w) in pv.as_slice().iter().zip(targets.as_slice()).zip(weights.as_slice()) {
            if w == 0.0 {
                continue;
            }
            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                saturated += 1;
            }
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            total -= w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        self.saturations += saturated;
        self.push(
            "binary_cross_entropy",
            Array::scalar(total),
            Op::Bce {
                probs,
                targets: targets.clone(),
                weights: weights.clone(),
            },
            &[probs],
        )
    }

    pub fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Array> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = op.forward(&values)?;
        let name = op.name();
        self.push(name, out, Op::Custom(op, inputs.to_vec()), inputs)
    }

    /// Back-propagates from a scalar node. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(NumError::NonScalarLoss(shape));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Array>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(Array::scalar(1.0));

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                match &mut self.nodes[idx].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Adds `delta` into the pending gradient of `v`.
        fn acc(grads: &mut [Option<Array>], v: Var, delta: Array) {
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        }
        fn slot(grads: &mut [Option<Array>], v: Var, shape: (usize, usize)) -> &mut Array {
            grads[v.0].get_or_insert_with(|| Array::zeros(shape.0, shape.1))
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    let s = slot(grads, *a, val(*a).shape());
                    gemm(1.0, g, false, val(*b), true, 1.0, s);
                }
                if wants(*b) {
                    let s = slot(grads, *b, val(*b).shape());
                    gemm(1.0, val(*a), true, g, false, 1.0, s);
                }
            }
            Op::MatMulNT(a, b) => {
                if wants(*a) {
                    let s = slot(grads, *a, val(*a).shape());
                    gemm(1.0, g, false, val(*b), false, 1.0, s);
                }
                if wants(*b) {
                    let s = slot(grads, *b, val(*b).shape());
                    gemm(1.0, g, true, val(*a), false, 1.0, s);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if wants(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if wants(*b) {
                    acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(grads, *a, zip(g, val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    acc(grads, *b, zip(g, val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if wants(*row) {
                    acc(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                if wants(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        for (x, &y) in d.row_slice_mut(r).iter_mut().zip(rv.as_slice()) {
                            *x *= y;
                        }
                    }
                    acc(grads, *a, d);
                }
                if wants(*row) {
                    acc(grads, *row, column_sums(&zip(g, val(*a), |x, y| x * y)));
                }
            }
            Op::MulScalar(a, s) => {
                let k = val(*s).as_slice()[0];
                if wants(*a) {
                    acc(grads, *a, g.map(|x| x * k));
                }
                if wants(*s) {
                    let d: f64 = g.as_slice().iter().zip(val(*a).as_slice()).map(|(x, y)| x * y).sum();
                    acc(grads, *s, Array::scalar(d));
                }
            }
            Op::Affine(a, k) => {
                if wants(*a) {
                    let k = *k;
                    acc(grads, *a, g.map(|x| x * k));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if wants(p) {
                        let mut d = Array::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            d.row_slice_mut(r)
                                .copy_from_slice(&g.row_slice(r)[offset..offset + cols]);
                        }
                        acc(grads, p, d);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(a, start) => {
                if wants(*a) {
                    let s = slot(grads, *a, val(*a).shape());
                    for r in 0..g.rows() {
                        for (x, &y) in s.row_slice_mut(r)[*start..*start + g.cols()]
                            .iter_mut()
                            .zip(g.row_slice(r))
                        {
                            *x += y;
                        }
                    }
                }
            }
            Op::Gather(table, ids) => {
                if wants(*table) {
                    let s = slot(grads, *table, val(*table).shape());
                    for (i, &id) in ids.iter().enumerate() {
                        for (x, &y) in s.row_slice_mut(id).iter_mut().zip(g.row_slice(i)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::SelectRows(new, old, take_new) => {
                for (v, want_new) in [(*new, true), (*old, false)] {
                    if !wants(v) {
                        continue;
                    }
                    let mut d = Array::zeros(g.rows(), g.cols());
                    for (r, &t) in take_new.iter().enumerate() {
                        if t == want_new {
                            d.row_slice_mut(r).copy_from_slice(g.row_slice(r));
                        }
                    }
                    acc(grads, v, d);
                }
            }
            Op::Dot(a, b) => {
                let k = g.as_slice()[0];
                if wants(*a) {
                    acc(grads, *a, val(*b).map(|x| x * k));
                }
                if wants(*b) {
                    acc(grads, *b, val(*a).map(|x| x * k));
                }
            }
            Op::Sum(a) => {
                let k = g.as_slice()[0];
                let (r, c) = val(*a).shape();
                acc(grads, *a, Array::filled(r, c, k));
            }
            Op::Sigmoid(a) => acc(grads, *a, zip(g, out, |d, y| d * y * (1.0 - y))),
            Op::Tanh(a) => acc(grads, *a, zip(g, out, |d, y| d * (1.0 - y * y))),
            Op::Selu(a) => acc(
                grads,
                *a,
                zip(g, val(*a), |d, x| {
                    if x > 0.0 {
                        d * SELU_LAMBDA
                    } else {
                        d * SELU_LAMBDA * SELU_ALPHA * x.exp()
                    }
                }),
            ),
            Op::Log(a) => acc(grads, *a, zip(g, val(*a), |d, x| d / x)),
            Op::Softmax(a) => {
                let mut d = Array::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let y = out.row_slice(r);
                    let gy = g.row_slice(r);
                    let inner: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((x, &yi), &gi) in d.row_slice_mut(r).iter_mut().zip(y).zip(gy) {
                        *x = yi * (gi - inner);
                    }
                }
                acc(grads, *a, d);
            }
            Op::Bce {
                probs,
                targets,
                weights,
            } => {
                let k = g.as_slice()[0];
                let pv = val(*probs);
                let data = pv
                    .as_slice()
                    .iter()
                    .zip(targets.as_slice())
                    .zip(weights.as_slice())
                    .map(|((&p, &y), &w)| {
                        if w == 0.0 {
                            return 0.0;
                        }
                        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        k * w * (pc - y) / (pc * (1.0 - pc))
                    })
                    .collect();
                acc(
                    grads,
                    *probs,
                    Array::from_vec(pv.rows(), pv.cols(), data).expect("shape preserved"),
                );
            }
            Op::Custom(op, inputs) => {
                let values: Vec<&Array> = inputs.iter().map(|&v| val(v)).collect();
                let deltas = op.backward(&values, out, g);
                for (&v, d) in inputs.iter().zip(deltas) {
                    if wants(v) {
                        acc(grads, v, d);
                    }
                }
            }
        }
    }
}

fn zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Array::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn column_sums(a: &Array) -> Array {
    let mut out = Array::zeros(1, a.cols());
    for r in 0..a.rows() {
        for (x, &y) in out.as_mut_slice().iter_mut().zip(a.row_slice(r)) {
            *x += y;
        }
    }
    out
}

fn masked_softmax(a: &Array, mask: Option<&Array>) -> Array {
    let mut out = Array::zeros(a.rows(), a.cols());
    let on = |r: usize, c: usize| mask.is_none_or(|m| m.get(r, c) != 0.0);
    for r in 0..a.rows() {
        let row = a.row_slice(r);
        let max = (0..a.cols())
            .filter(|&c| on(r, c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for c in 0..a.cols() {
            if on(r, c) {
                let e = (row[c] - max).exp();
                out.set(r, c, e);
                total += e;
            }
        }
        out.row_slice_mut(r).iter_mut().for_each(|v| *v /= total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations_at_reference_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(selu(0.0), 0.0);
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((sigmoid(1.0) - expect).abs() < 1e-15);
        assert!((sigmoid(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((sigmoid(-800.0)).is_finite());
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn linear_loss_gradient_is_the_input() {
        let mut t = Tape::new();
        let w = t.param(Array::row(vec![0.3, -1.0, 2.0]));
        let x = t.constant(Array::row(vec![1.5, 2.5, -0.5]));
        let l = t.dot(w, x).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().as_slice(), &[1.5, 2.5, -0.5]);
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn sigmoid_sum_gradient_at_zero_is_quarter() {
        let mut t = Tape::new();
        let w = t.param(Array::zeros(1, 4));
        let s = t.sigmoid(w).unwrap();
        let l = t.sum(s).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(w).unwrap().as_slice().iter().all(|&g| g == 0.25));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let w = t.param(Array::row(vec![1.0, 2.0]));
        let sq = t.mul(w, w).unwrap();
        let l = t.sum(sq).unwrap();
        t.backward(l).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().as_slice(), &[4.0, 8.0]);
        t.zero_grad();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates_additively() {
        let mut t = Tape::new();
        let w = t.param(Array::scalar(3.0));
        let a = t.add(w, w).unwrap();
        let b = t.mul(a, w).unwrap();
        t.backward(b).unwrap();
        // b = 2w²
        assert_eq!(t.grad(w).unwrap().as_slice(), &[12.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let w = t.param(Array::zeros(2, 2));
        assert_eq!(t.backward(w), Err(NumError::NonScalarLoss((2, 2))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.param(Array::zeros(2, 3));
        let b = t.param(Array::zeros(3, 2));
        match t.add(a, b) {
            Err(NumError::ShapeMismatch { op, left, right }) => {
                assert_eq!(op, "add");
                assert_eq!(left, (2, 3));
                assert_eq!(right, (3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(t.matmul(a, a).is_err());
        assert!(t.matvec(a, b).is_err());
    }

    #[test]
    fn log_of_zero_is_a_numerical_error() {
        let mut t = Tape::new();
        let a = t.param(Array::row(vec![1.0, 0.0]));
        assert_eq!(t.log(a), Err(NumError::NonFinite { op: "log" }));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask_is_exact_zero() {
        let mut t = Tape::new();
        let a = t.param(Array::from_rows(&[vec![1.0, 2.0, 3.0], vec![5.0, -1.0, 0.5]]).unwrap());
        let s = t.softmax(a).unwrap();
        for r in 0..2 {
            assert!((t.value(s).row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mask = Array::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let m = t.masked_softmax(a, &mask).unwrap();
        let v = t.value(m);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.get(0, 0) + v.get(0, 2) - 1.0).abs() < 1e-12);
        assert!(v.row_slice(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bce_counts_saturation_and_stays_finite() {
        let mut t = Tape::new();
        let p = t.param(Array::row(vec![1.0, 0.0, 0.5]));
        let y = Array::row(vec![0.0, 0.0, 1.0]);
        let w = Array::row(vec![1.0, 1.0, 1.0]);
        let l = t.binary_cross_entropy(p, &y, &w).unwrap();
        assert_eq!(t.saturations(), 2);
        assert!(t.value(l).item().unwrap().is_finite());
        t.backward(l).unwrap();
        assert!(t.grad(p).unwrap().is_finite());
    }
}
