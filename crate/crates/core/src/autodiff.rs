//! Reverse-mode differentiation over a per-sample tape.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles together with
//! its forward value. [`Tape::backward`] walks the records in reverse and
//! accumulates adjoints; a node consumed several times (a shared weight
//! matrix, a child embedding reused by gates) sums the contributions of all
//! its consumers.
//!
//! ```
//! use jetrec::autodiff::{ParamId, Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(ParamId(0), &Tensor::matrix(1, 2, vec![3.0, -1.0]));
//! let x = tape.input(Tensor::vector(vec![2.0, 5.0]));
//! let y = tape.matvec(w, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(tape.value(loss).data(), &[1.0]);
//! assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0, 5.0]);
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward seed must be a scalar, got shape {0}x{1}")]
    NonScalarSeed(usize, usize),
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

/// Row-major dense matrix; vectors are `n x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Self { rows, cols, data }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { rows: data.len(), cols: 1, data }
    }

    pub fn scalar(x: f64) -> Self {
        Self::vector(vec![x])
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }
}

/// Dot product with a fixed left-to-right summation order. Every forward
/// path (taped, per-tree, batched) goes through this so their results agree
/// bit for bit.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `out = W x + b`, written into `out`.
pub fn affine_into(w: &Tensor, b: &[f64], x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.cols, x.len());
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(w.row(i), x) + b[i];
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
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Softmax taken across `n_blocks` equal blocks, separately for every
/// component: `out[b][c] = exp(x[b][c]) / sum_b' exp(x[b'][c])`.
pub fn blockwise_softmax(x: &[f64], n_blocks: usize) -> Vec<f64> {
    let width = x.len() / n_blocks;
    let mut out = vec![0.0; x.len()];
    for c in 0..width {
        let max = (0..n_blocks).map(|b| x[b * width + c]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for b in 0..n_blocks {
            let e = (x[b * width + c] - max).exp();
            out[b * width + c] = e;
            z += e;
        }
        for b in 0..n_blocks {
            out[b * width + c] /= z;
        }
    }
    out
}

/// Clamp bound applied to probabilities inside the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

pub fn bce(p: f64, y: f64) -> f64 {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

/// A fixed, ordered collection of named parameter tensors.
///
/// The order of [`Parameters::tensors`] is the canonical parameter order: it
/// assigns [`ParamId`]s on a tape, lays out optimizer state and names the
/// arrays in a checkpoint.
pub trait Parameters {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)>;

    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn n_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor on `tape` with ids `base, base + 1, ...`.
    fn register(&self, tape: &mut Tape, base: usize) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .enumerate()
            .map(|(k, (_, t))| tape.param(ParamId(base + k), t))
            .collect()
    }
}

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Position of a parameter tensor in a model's canonical parameter order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    BlockSoftmax(Var, usize),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Bce(Var, f64),
}

#[derive(Debug, Clone)]
struct Record {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    records: Vec<Record>,
    n_params: usize,
    relu_margin: f64,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// All parameter gradients in id order; ids never registered are `None`.
    pub fn into_vec(self) -> Vec<Option<Tensor>> {
        self.grads
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { records: Vec::new(), n_params: 0, relu_margin: f64::INFINITY }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.0].value
    }

    /// Smallest `|x|` seen by any relu so far; a gradient check is only
    /// meaningful when this stays clear of the finite-difference step.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.records.push(Record { op, value });
        Var(self.records.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.records[v.0].value.shape()
    }

    fn vec_len(&self, op: &'static str, v: Var) -> Result<usize, AutodiffError> {
        match self.shape(v) {
            (n, 1) => Ok(n),
            (r, c) => Err(mismatch(op, format!("expected a vector, got {r}x{c}"))),
        }
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    /// Registers a parameter leaf. Registering the same id twice is allowed;
    /// the gradients of both leaves are summed.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        self.n_params = self.n_params.max(id.0 + 1);
        self.push(Op::Param(id), value.clone())
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, AutodiffError> {
        let n = self.vec_len("matvec", x)?;
        let (rows, cols) = self.shape(w);
        if cols != n {
            return Err(mismatch("matvec", format!("{rows}x{cols} times {n}")));
        }
        let wt = &self.records[w.0].value;
        let xs = self.records[x.0].value.data();
        let out: Vec<f64> = (0..rows).map(|i| dot(wt.row(i), xs)).collect();
        Ok(self.push(Op::MatVec(w, x), Tensor::vector(out)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (rows, cols) = self.shape(a);
        let (x, y) = (self.records[a.0].value.data(), self.records[b.0].value.data());
        let out = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
        Ok(self.push(op, Tensor::matrix(rows, cols, out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("hadamard", a, b, Op::Hadamard(a, b), |x, y| x * y)
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let mut out = Vec::new();
        for &p in parts {
            self.vec_len("concat", p)?;
            out.extend_from_slice(self.records[p.0].value.data());
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(out)))
    }

    /// Elements `start..start + len` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let n = self.vec_len("slice", x)?;
        if start + len > n {
            return Err(mismatch("slice", format!("{start}..{} of length {n}", start + len)));
        }
        let out = self.records[x.0].value.data()[start..start + len].to_vec();
        Ok(self.push(Op::Slice(x, start), Tensor::vector(out)))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.records[x.0].value;
        let out = Tensor::matrix(t.rows, t.cols, t.data.iter().map(|&v| f(v)).collect());
        self.push(op, out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let margin = self.records[x.0].value.data.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.relu_margin = self.relu_margin.min(margin);
        self.unary(x, Op::Relu(x), relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn blockwise_softmax(&mut self, x: Var, n_blocks: usize) -> Result<Var, AutodiffError> {
        let n = self.vec_len("blockwise_softmax", x)?;
        if n_blocks == 0 || n % n_blocks != 0 {
            return Err(mismatch("blockwise_softmax", format!("length {n} into {n_blocks} blocks")));
        }
        let out = blockwise_softmax(self.records[x.0].value.data(), n_blocks);
        Ok(self.push(Op::BlockSoftmax(x, n_blocks), Tensor::vector(out)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.records[x.0].value.data.iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Binary cross-entropy of a scalar probability against label `y`,
    /// with the probability clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce(&mut self, p: Var, y: f64) -> Result<Var, AutodiffError> {
        if self.shape(p) != (1, 1) {
            return Err(mismatch("bce", format!("expected a scalar, got {:?}", self.shape(p))));
        }
        let loss = bce(self.records[p.0].value.data[0], y);
        Ok(self.push(Op::Bce(p, y), Tensor::scalar(loss)))
    }

    /// Adjoints of `seed` with respect to every registered parameter.
    /// Unused parameters get zero gradients.
    pub fn backward(&self, seed: Var) -> Result<Gradients, AutodiffError> {
        let (r, c) = self.shape(seed);
        if (r, c) != (1, 1) {
            return Err(AutodiffError::NonScalarSeed(r, c));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; seed.0 + 1];
        adj[seed.0] = Some(vec![1.0]);
        let mut grads: Vec<Option<Tensor>> = vec![None; self.n_params];

        fn acc(adj: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
            let slot = &mut adj[v.0];
            f(slot.get_or_insert_with(Vec::new).as_mut_slice());
        }
        fn ensure(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) {
            let slot = &mut adj[v.0];
            if slot.is_none() {
                *slot = Some(vec![0.0; len]);
            }
        }

        for idx in (0..=seed.0).rev() {
            let rec = &self.records[idx];
            if let Op::Param(id) = rec.op {
                let g = grads[id.0].get_or_insert_with(|| Tensor::zeros(rec.value.rows, rec.value.cols));
                if let Some(a) = &adj[idx] {
                    for (x, y) in g.data.iter_mut().zip(a) {
                        *x += y;
                    }
                }
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            let out = &rec.value.data;
            let val = |v: Var| &self.records[v.0].value;
            match &rec.op {
                Op::Input | Op::Param(_) => {}
                Op::MatVec(w, x) => {
                    let (wt, xs) = (val(*w), val(*x));
                    ensure(&mut adj, *w, wt.len());
                    acc(&mut adj, *w, |dw| {
                        for i in 0..wt.rows {
                            let gi = g[i];
                            if gi != 0.0 {
                                for (d, xv) in dw[i * wt.cols..(i + 1) * wt.cols].iter_mut().zip(&xs.data) {
                                    *d += gi * xv;
                                }
                            }
                        }
                    });
                    ensure(&mut adj, *x, xs.len());
                    acc(&mut adj, *x, |dx| {
                        for i in 0..wt.rows {
                            let gi = g[i];
                            if gi != 0.0 {
                                for (d, wv) in dx.iter_mut().zip(wt.row(i)) {
                                    *d += gi * wv;
                                }
                            }
                        }
                    });
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(rec.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    ensure(&mut adj, *a, g.len());
                    acc(&mut adj, *a, |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d += g));
                    ensure(&mut adj, *b, g.len());
                    acc(&mut adj, *b, |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d += sign * g));
                }
                Op::Hadamard(a, b) => {
                    let (av, bv) = (&val(*a).data, &val(*b).data);
                    ensure(&mut adj, *a, g.len());
                    acc(&mut adj, *a, |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * bv[i];
                        }
                    });
                    ensure(&mut adj, *b, g.len());
                    acc(&mut adj, *b, |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * av[i];
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        ensure(&mut adj, p, n);
                        acc(&mut adj, p, |d| {
                            d.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, g)| *d += g)
                        });
                        offset += n;
                    }
                }
                Op::Slice(x, start) => {
                    let n = val(*x).len();
                    ensure(&mut adj, *x, n);
                    acc(&mut adj, *x, |d| {
                        d[*start..*start + g.len()].iter_mut().zip(&g).for_each(|(d, g)| *d += g)
                    });
                }
                Op::Sigmoid(x) => {
                    ensure(&mut adj, *x, g.len());
                    acc(&mut adj, *x, |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * out[i] * (1.0 - out[i]);
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = &val(*x).data;
                    ensure(&mut adj, *x, g.len());
                    acc(&mut adj, *x, |d| {
                        for i in 0..g.len() {
                            if xv[i] > 0.0 {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                Op::Tanh(x) => {
                    ensure(&mut adj, *x, g.len());
                    acc(&mut adj, *x, |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * (1.0 - out[i] * out[i]);
                        }
                    });
                }
                Op::BlockSoftmax(x, n_blocks) => {
                    let width = g.len() / n_blocks;
                    ensure(&mut adj, *x, g.len());
                    acc(&mut adj, *x, |d| {
                        for c in 0..width {
                            let inner: f64 = (0..*n_blocks).map(|b| g[b * width + c] * out[b * width + c]).sum();
                            for b in 0..*n_blocks {
                                let k = b * width + c;
                                d[k] += out[k] * (g[k] - inner);
                            }
                        }
                    });
                }
                Op::Scale(x, c) => {
                    ensure(&mut adj, *x, g.len());
                    acc(&mut adj, *x, |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d += c * g));
                }
                Op::AddScalar(x) => {
                    ensure(&mut adj, *x, g.len());
                    acc(&mut adj, *x, |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d += g));
                }
                Op::Sum(x) => {
                    let n = val(*x).len();
                    ensure(&mut adj, *x, n);
                    acc(&mut adj, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
                }
                Op::Bce(p, y) => {
                    let pv = val(*p).data[0];
                    let local = if pv < PROB_CLAMP || pv > 1.0 - PROB_CLAMP {
                        0.0
                    } else {
                        -y / pv + (1.0 - y) / (1.0 - pv)
                    };
                    ensure(&mut adj, *p, 1);
                    acc(&mut adj, *p, |d| d[0] += g[0] * local);
                }
            }
        }
        // parameters registered after the seed was recorded still get zeros
        for rec in &self.records[seed.0 + 1..] {
            if let Op::Param(id) = rec.op {
                grads[id.0].get_or_insert_with(|| Tensor::zeros(rec.value.rows, rec.value.cols));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Finite-difference step for [`grad_check`]. The extrapolated stencil has
/// `O(eps^4)` truncation error, while rounding in a loss of order one leaves
/// roughly `1e-12 / eps` absolute noise. The relu margin required of a base
/// point must stay well above `2 * eps` so no probe crosses a kink.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Denominator floor of the relative error. Entries whose analytic and
/// numeric magnitudes sum to less than this are compared in absolute terms,
/// since finite differences cannot resolve them relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|a - b| / max(REL_FLOOR, |a| + |b|)` over all parameter entries.
    pub max_rel_error: f64,
    /// Smallest relu input magnitude at the base point.
    pub relu_margin: f64,
    pub n_checked: usize,
    /// `(param, entry, analytic, numeric)` of the worst entry.
    pub worst: Option<(ParamId, usize, f64, f64)>,
}

/// Compares tape gradients of a scalar function against finite differences,
/// entry by entry. The numeric derivative combines central differences at
/// steps `eps` and `2 eps` as `(4 D(eps) - D(2 eps)) / 3`.
///
/// `f` must register `params[k]` under `ParamId(k)` (the slice it receives
/// holds the corresponding [`Var`]s) and return a scalar.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |ps: &[Tensor]| -> Result<(Tape, Var), AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().enumerate().map(|(k, p)| tape.param(ParamId(k), p)).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, out))
    };
    let (tape, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    let mut worst_at = None;
    let mut n_checked = 0;
    for k in 0..params.len() {
        let analytic = grads.get(ParamId(k)).cloned().unwrap_or_else(|| Tensor::zeros(params[k].rows, params[k].cols));
        for e in 0..params[k].len() {
            let orig = work[k].data[e];
            let mut probe = |h: f64| -> Result<f64, AutodiffError> {
                let (hi, lo) = (orig + h, orig - h);
                work[k].data[e] = hi;
                let (t, o) = eval(&work)?;
                let plus = t.value(o).data[0];
                work[k].data[e] = lo;
                let (t, o) = eval(&work)?;
                let minus = t.value(o).data[0];
                work[k].data[e] = orig;
                // the step actually taken, after rounding theta +- h
                Ok((plus - minus) / (hi - lo))
            };
            let near = probe(eps)?;
            let far = probe(2.0 * eps)?;
            // Richardson extrapolation cancels the eps^2 term
            let numeric = (4.0 * near - far) / 3.0;
            let a = analytic.data[e];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(REL_FLOOR);
            if rel > worst || worst_at.is_none() {
                worst = worst.max(rel);
                worst_at = Some((ParamId(k), e, a, numeric));
            }
            n_checked += 1;
        }
    }
    Ok(GradCheck { max_rel_error: worst, relu_margin: tape.relu_margin(), n_checked, worst: worst_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Derivative of a scalar input through one primitive, by tape and by
    /// central differences.
    fn scalar_derivative(x0: f64, prim: impl Fn(&mut Tape, Var) -> Var) -> (f64, f64) {
        let run = |x: f64| {
            let mut tape = Tape::new();
            let v = tape.param(ParamId(0), &Tensor::scalar(x));
            let y = prim(&mut tape, v);
            let s = tape.sum(y);
            (tape.value(s).data()[0], tape.backward(s).unwrap().get(ParamId(0)).unwrap().data()[0])
        };
        let eps = 1e-6;
        ((run(x0 + eps).0 - run(x0 - eps).0) / (2.0 * eps), run(x0).1)
    }

    #[test]
    fn local_derivatives() {
        assert_eq!(scalar_derivative(0.0, |t, v| t.sigmoid(v)).1, 0.25);
        assert_eq!(scalar_derivative(-1.0, |t, v| t.relu(v)).1, 0.0);
        assert_eq!(scalar_derivative(2.0, |t, v| t.relu(v)).1, 1.0);
        assert_eq!(scalar_derivative(0.0, |t, v| t.relu(v)).1, 0.0);
        let (fd, an) = scalar_derivative(0.3, |t, v| t.tanh(v));
        assert!((fd - an).abs() < 1e-9);
    }

    #[test]
    fn softmax_of_equal_blocks() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(12, 1));
        let y = tape.blockwise_softmax(x, 4).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
        assert!(tape.blockwise_softmax(x, 5).is_err());
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x: Vec<f64> = (0..20).map(|_| rng.random_range(-30.0..30.0)).collect();
            let out = blockwise_softmax(&x, 4);
            for c in 0..5 {
                let s: f64 = (0..4).map(|b| out[b * 5 + c]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matvec_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&mut rng, 3, 4);
        let x = random(&mut rng, 4, 1);
        let mut tape = Tape::new();
        let wv = tape.param(ParamId(0), &w);
        let xv = tape.input(x.clone());
        let y = tape.matvec(wv, xv).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        let dw = g.get(ParamId(0)).unwrap();
        for i in 0..3 {
            assert_eq!(dw.row(i), x.data());
        }
    }

    #[test]
    fn unused_and_late_params_get_zeros() {
        let mut tape = Tape::new();
        let a = tape.param(ParamId(0), &Tensor::scalar(2.0));
        let _unused = tape.param(ParamId(1), &Tensor::zeros(2, 3));
        let y = tape.scale(a, 3.0);
        let _late = tape.param(ParamId(2), &Tensor::scalar(1.0));
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[3.0]);
        assert_eq!(g.get(ParamId(1)).unwrap(), &Tensor::zeros(2, 3));
        assert_eq!(g.get(ParamId(2)).unwrap().data(), &[0.0]);
    }

    #[test]
    fn shared_weight_accumulates() {
        // y = w * (w * x): dy/dw = 2 w x
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), &Tensor::matrix(1, 1, vec![3.0]));
        let x = tape.input(Tensor::scalar(2.0));
        let h = tape.matvec(w, x).unwrap();
        let y = tape.matvec(w, h).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[12.0]);
        assert_eq!(tape.backward(y).unwrap(), g);
    }

    #[test]
    fn errors() {
        let mut tape = Tape::new();
        let v = tape.input(Tensor::zeros(3, 1));
        let w = tape.input(Tensor::zeros(2, 2));
        assert!(matches!(tape.matvec(w, v), Err(AutodiffError::ShapeMismatch { .. })));
        assert!(tape.add(v, w).is_err());
        assert!(tape.slice(v, 2, 2).is_err());
        assert_eq!(tape.backward(v), Err(AutodiffError::NonScalarSeed(3, 1)));
    }

    #[test]
    fn bce_values() {
        assert!((bce(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce(1.0 - 1e-12, 1.0) < 1.1e-12);
        assert!(bce(1.0, 0.0).is_finite());
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 3, 5);
        let x = random(&mut rng, 5, 1);
        // no truncation error for a linear map, so a wide step only shrinks rounding
        let check = grad_check(&[w], 1e-2, |tape, vars| {
            let xv = tape.input(x.clone());
            let y = tape.matvec(vars[0], xv)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-10, "{check:?}");
        assert_eq!(check.n_checked, 15);
    }

    type Prim = fn(&mut Tape, Var, Var) -> Result<Var, AutodiffError>;

    #[test]
    fn every_primitive_matches_finite_differences() {
        let prims: [(&str, Prim); 11] = [
            ("add", |t, a, b| t.add(a, b)),
            ("sub", |t, a, b| t.sub(a, b)),
            ("hadamard", |t, a, b| t.hadamard(a, b)),
            ("concat", |t, a, b| t.concat(&[b, a])),
            ("slice", |t, a, _| t.slice(a, 2, 4)),
            ("sigmoid", |t, a, _| Ok(t.sigmoid(a))),
            ("relu", |t, a, _| Ok(t.relu(a))),
            ("tanh", |t, a, _| Ok(t.tanh(a))),
            ("blockwise_softmax", |t, a, _| t.blockwise_softmax(a, 4)),
            ("scale", |t, a, _| Ok(t.scale(a, -1.3))),
            ("one_minus", |t, a, _| Ok(t.one_minus(a))),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (name, prim) in prims {
            for _ in 0..20 {
                let a = random(&mut rng, 8, 1);
                let b = random(&mut rng, 8, 1);
                // a fixed random linear read-out turns the output into a scalar
                let probe: Vec<f64> = (0..16).map(|_| rng.random_range(0.5..1.5)).collect();
                let check = grad_check(&[a, b], 1e-5, |t, v| {
                    let y = prim(t, v[0], v[1])?;
                    let n = t.value(y).len();
                    let r = t.input(Tensor::matrix(1, n, probe[..n].to_vec()));
                    t.matvec(r, y)
                })
                .unwrap();
                if name == "relu" && check.relu_margin < 1e-3 {
                    continue;
                }
                assert!(check.max_rel_error < 1e-7, "{name}: {check:?}");
            }
        }
        // matvec on its own, differentiating through both operands
        for _ in 0..20 {
            let w = random(&mut rng, 6, 8);
            let x = random(&mut rng, 8, 1);
            let probe: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
            let check = grad_check(&[w, x], 1e-5, |t, v| {
                let y = t.matvec(v[0], v[1])?;
                let r = t.input(Tensor::matrix(1, 6, probe.clone()));
                t.matvec(r, y)
            })
            .unwrap();
            assert!(check.max_rel_error < 1e-7, "matvec: {check:?}");
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        for (p, y) in [(0.3, 1.0), (0.8, 0.0), (0.55, 1.0)] {
            let check = grad_check(&[Tensor::scalar(p)], 1e-7, |t, v| t.bce(v[0], y)).unwrap();
            assert!(check.max_rel_error < 1e-7, "{check:?}");
        }
    }
}
