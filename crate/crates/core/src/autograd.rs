//! Tape-based reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! Every value in a [`Graph`] is an `Array2`. Sequences of `T` steps for a
//! batch of `B` samples are stored batch-major as `(B*T, C)` matrices, and the
//! grouped ops ([`Graph::group_mean`], [`Graph::unfold`], [`Graph::attention`])
//! take the sequence length explicitly. The fused recurrent cells and the
//! attention op carry their own backward rules; everything else is composed
//! from elementwise, broadcast and matrix primitives.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{s, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::Float;

/// Floating point element type usable in a [`Graph`].
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            frozen: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Panics on duplicate names, which is always a
    /// model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value.as_standard_layout().into_owned());
        self.frozen.push(false);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Converts every entry to another float type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| G::lit(x.as_f64())))
                .collect(),
            frozen: self.frozen.clone(),
            index: self.index.clone(),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, rstd: Vec<F> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    GroupMean(Var, usize),
    GroupSum(Var, usize),
    Unfold { x: Var, seq_len: usize, kernel: usize },
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    Attention { q: Var, k: Var, v: Var, seq_len: usize, heads: usize, probs: Vec<Array2<F>> },
    LstmCell { pre: Var, c_prev: Var, gates: Array2<F> },
    GruCell { xp: Var, hp: Var, h_prev: Var, gates: Array2<F> },
}

#[derive(Debug)]
struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// A single forward pass recorded for differentiation.
#[derive(Debug)]
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    param_nodes: HashMap<usize, Var>,
}

/// Parameter gradients produced by [`Graph::backward`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Global L2 norm over all present gradients.
    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Adds another gradient set into this one.
    pub fn accumulate(&mut self, other: &Gradients<F>) {
        for (mine, theirs) in self.grads.iter_mut().zip(other.grads.iter()) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }
}

fn reduce_to<F: Real>(g: Array2<F>, shape: (usize, usize)) -> Array2<F> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softmax_rows<F: Real>(x: &Array2<F>) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> F {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id.0) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id.0), &[]);
        self.nodes[v.0].needs_grad = !store.is_frozen(id);
        self.param_nodes.insert(id.0, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        self.push(value, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let value = self.value(a).mapv(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, shift: F) -> Var {
        let value = self.value(a).mapv(|x| x + shift);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(F::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.exp());
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.ln());
        self.push(value, Op::Log(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(value, Op::LogSoftmaxRows(a), &[a])
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: F) -> Var {
        let x = self.value(a);
        let c = F::lit(x.ncols() as f64);
        let mut value = x.clone();
        let mut rstd = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / c;
            let r = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        self.push(value, Op::LayerNorm { x: a, rstd }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start), &[a])
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), idx);
        self.push(value, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Places input row `i` at output row `idx[i]` of an `n_rows` zero matrix.
    /// `idx` must not contain duplicates.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Var {
        let x = self.value(a);
        let mut value = Array2::zeros((n_rows, x.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            value.row_mut(r).assign(&x.row(i));
        }
        self.push(value, Op::ScatterRows(a, idx.to_vec()), &[a])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        let value = Array2::from_shape_vec((rows, cols), x.iter().copied().collect())
            .expect("reshape size mismatch");
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        self.push(value, Op::Transpose(a), &[a])
    }

    /// Mean over consecutive groups of `group` rows: `(N*group, C) -> (N, C)`.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Var {
        let value = group_reduce(self.value(a), group, true);
        self.push(value, Op::GroupMean(a, group), &[a])
    }

    /// Sum over consecutive groups of `group` rows.
    pub fn group_sum(&mut self, a: Var, group: usize) -> Var {
        let value = group_reduce(self.value(a), group, false);
        self.push(value, Op::GroupSum(a, group), &[a])
    }

    /// Same-padded sliding patches for a 1-D convolution with an odd kernel:
    /// `(N*T, C) -> (N*T, kernel*C)`, zero padding at each sequence boundary.
    pub fn unfold(&mut self, a: Var, seq_len: usize, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let x = self.value(a);
        let c = x.ncols();
        let n = x.nrows() / seq_len;
        let half = kernel / 2;
        let mut value = Array2::zeros((x.nrows(), kernel * c));
        for b in 0..n {
            for t in 0..seq_len {
                let row = b * seq_len + t;
                for j in 0..kernel {
                    let src = t as isize + j as isize - half as isize;
                    if src >= 0 && (src as usize) < seq_len {
                        value
                            .slice_mut(s![row, j * c..(j + 1) * c])
                            .assign(&x.row(b * seq_len + src as usize));
                    }
                }
            }
        }
        self.push(
            value,
            Op::Unfold {
                x: a,
                seq_len,
                kernel,
            },
            &[a],
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Array2::from_elem((1, 1), x.sum() / F::lit(x.len() as f64));
        self.push(value, Op::MeanAll(a), &[a])
    }

    /// Row sums as a column: `(R, C) -> (R, 1)`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(a), &[a])
    }

    /// Scaled dot-product multi-head self-attention within each sequence.
    /// `q`, `k`, `v` are `(N*T, d)` with `d` divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let (rows, d) = self.shape(q);
        let dh = d / heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let n = rows / seq_len;
        let mut out = Array2::zeros((rows, d));
        let mut probs = Vec::with_capacity(n * heads);
        {
            let (qa, ka, va) = (self.value(q), self.value(k), self.value(v));
            for b in 0..n {
                let r = b * seq_len..(b + 1) * seq_len;
                for h in 0..heads {
                    let c = h * dh..(h + 1) * dh;
                    let qb = qa.slice(s![r.clone(), c.clone()]);
                    let kb = ka.slice(s![r.clone(), c.clone()]);
                    let vb = va.slice(s![r.clone(), c.clone()]);
                    let scores = qb.dot(&kb.t()).mapv(|x| x * scale);
                    let p = softmax_rows(&scores);
                    out.slice_mut(s![r.clone(), c.clone()]).assign(&p.dot(&vb));
                    probs.push(p);
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Fused LSTM cell. `pre` holds gate pre-activations `(B, 4H)` in
    /// `[input, forget, cell, output]` order. Returns `(B, 2H)` = `[h | c]`.
    pub fn lstm_cell(&mut self, pre: Var, c_prev: Var) -> Var {
        let p = self.value(pre);
        let cp = self.value(c_prev);
        let hdim = cp.ncols();
        let mut gates = p.clone();
        let mut out = Array2::zeros((p.nrows(), 2 * hdim));
        for r in 0..p.nrows() {
            for j in 0..hdim {
                let i = sigmoid(p[[r, j]]);
                let f = sigmoid(p[[r, hdim + j]]);
                let g = p[[r, 2 * hdim + j]].tanh();
                let o = sigmoid(p[[r, 3 * hdim + j]]);
                let c = f * cp[[r, j]] + i * g;
                gates[[r, j]] = i;
                gates[[r, hdim + j]] = f;
                gates[[r, 2 * hdim + j]] = g;
                gates[[r, 3 * hdim + j]] = o;
                out[[r, j]] = o * c.tanh();
                out[[r, hdim + j]] = c;
            }
        }
        self.push(out, Op::LstmCell { pre, c_prev, gates }, &[pre, c_prev])
    }

    /// Fused GRU cell. `xp` and `hp` are the input and recurrent projections
    /// `(B, 3H)` in `[reset, update, new]` order, both including their biases.
    pub fn gru_cell(&mut self, xp: Var, hp: Var, h_prev: Var) -> Var {
        let xa = self.value(xp);
        let ha = self.value(hp);
        let hprev = self.value(h_prev);
        let hdim = hprev.ncols();
        let mut gates = Array2::zeros((xa.nrows(), 3 * hdim));
        let mut out = Array2::zeros((xa.nrows(), hdim));
        for r in 0..xa.nrows() {
            for j in 0..hdim {
                let rg = sigmoid(xa[[r, j]] + ha[[r, j]]);
                let z = sigmoid(xa[[r, hdim + j]] + ha[[r, hdim + j]]);
                let nn = (xa[[r, 2 * hdim + j]] + rg * ha[[r, 2 * hdim + j]]).tanh();
                gates[[r, j]] = rg;
                gates[[r, hdim + j]] = z;
                gates[[r, 2 * hdim + j]] = nn;
                out[[r, j]] = (F::one() - z) * nn + z * hprev[[r, j]];
            }
        }
        self.push(
            out,
            Op::GruCell {
                xp,
                hp,
                h_prev,
                gates,
            },
            &[xp, hp, h_prev],
        )
    }

    /// Reverse pass from a `1x1` loss node.
    pub fn backward(&self, loss: Var, store_len: usize) -> Gradients<F> {
        assert_eq!(self.shape(loss), (1, 1), "loss must be a scalar node");
        let mut grads: Vec<Option<Array2<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));
        let mut out = Gradients {
            grads: vec![None; store_len],
        };

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => match &mut out.grads[*pid] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let ga = g.dot(&self.value(*b).t());
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = self.value(*a).t().dot(&g);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        self.acc(&mut grads, *a, reduce_to(g.clone(), self.shape(*a)));
                    }
                    if self.nodes[b.0].needs_grad {
                        self.acc(&mut grads, *b, reduce_to(g, self.shape(*b)));
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        self.acc(&mut grads, *a, reduce_to(g.clone(), self.shape(*a)));
                    }
                    if self.nodes[b.0].needs_grad {
                        self.acc(&mut grads, *b, reduce_to(-g, self.shape(*b)));
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let ga = &g * self.value(*b);
                        self.acc(&mut grads, *a, reduce_to(ga, self.shape(*a)));
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = &g * self.value(*a);
                        self.acc(&mut grads, *b, reduce_to(gb, self.shape(*b)));
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if self.nodes[a.0].needs_grad {
                        let ga = &g / bv;
                        self.acc(&mut grads, *a, reduce_to(ga, self.shape(*a)));
                    }
                    if self.nodes[b.0].needs_grad {
                        // d(a/b)/db = -out / b
                        let gb = -(&g * &node.value) / bv;
                        self.acc(&mut grads, *b, reduce_to(gb, self.shape(*b)));
                    }
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    self.acc(&mut grads, *a, g.mapv(|x| x * f));
                }
                Op::AddScalar(a) => self.acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|d, &y| *d = *d * (F::one() - y * y));
                    self.acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|d, &y| *d = *d * y * (F::one() - y));
                    self.acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|d, &y| {
                        if y <= F::zero() {
                            *d = F::zero();
                        }
                    });
                    self.acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g * &node.value;
                    self.acc(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g / self.value(*a);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(x)
                        .for_each(|d, &xv| *d = *d * (xv + xv));
                    self.acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let mut ga = g;
                    for (mut grow, prow) in ga.rows_mut().into_iter().zip(p.rows()) {
                        let dot: F = grow.iter().zip(prow.iter()).map(|(&x, &y)| x * y).sum();
                        Zip::from(&mut grow)
                            .and(&prow)
                            .for_each(|d, &pv| *d = pv * (*d - dot));
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = g;
                    for (mut grow, lrow) in ga.rows_mut().into_iter().zip(node.value.rows()) {
                        let total = grow.sum();
                        Zip::from(&mut grow)
                            .and(&lrow)
                            .for_each(|d, &l| *d = *d - l.exp() * total);
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, rstd } => {
                    let y = &node.value;
                    let c = F::lit(y.ncols() as f64);
                    let mut ga = g;
                    for ((mut grow, yrow), &r) in
                        ga.rows_mut().into_iter().zip(y.rows()).zip(rstd.iter())
                    {
                        let mg = grow.sum() / c;
                        let mgy: F =
                            grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum::<F>() / c;
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|d, &yv| *d = r * (*d - mg - yv * mgy));
                    }
                    self.acc(&mut grads, *x, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if self.nodes[p.0].needs_grad {
                            let gp = g.slice(s![.., start..start + w]).to_owned();
                            self.acc(&mut grads, *p, gp);
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        if self.nodes[p.0].needs_grad {
                            let gp = g.slice(s![start..start + h, ..]).to_owned();
                            self.acc(&mut grads, *p, gp);
                        }
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    self.acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    self.acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (i, &r) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(i);
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::ScatterRows(a, idx) => {
                    let ga = g.select(Axis(0), idx);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a);
                    let ga = Array2::from_shape_vec(shape, g.iter().copied().collect())
                        .expect("reshape grad");
                    self.acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    let ga = g.t().as_standard_layout().into_owned();
                    self.acc(&mut grads, *a, ga);
                }
                Op::GroupMean(a, group) | Op::GroupSum(a, group) => {
                    let scale = if matches!(node.op, Op::GroupMean(..)) {
                        F::one() / F::lit(*group as f64)
                    } else {
                        F::one()
                    };
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Array2::zeros((rows, cols));
                    for (n, grow) in g.rows().into_iter().enumerate() {
                        let scaled = grow.mapv(|v| v * scale);
                        for r in n * group..(n + 1) * group {
                            ga.row_mut(r).assign(&scaled);
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::Unfold { x, seq_len, kernel } => {
                    let (rows, c) = self.shape(*x);
                    let n = rows / seq_len;
                    let half = kernel / 2;
                    let mut ga = Array2::zeros((rows, c));
                    for b in 0..n {
                        for t in 0..*seq_len {
                            let row = b * seq_len + t;
                            for j in 0..*kernel {
                                let src = t as isize + j as isize - half as isize;
                                if src >= 0 && (src as usize) < *seq_len {
                                    let mut dst = ga.row_mut(b * seq_len + src as usize);
                                    dst += &g.slice(s![row, j * c..(j + 1) * c]);
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, *x, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    self.acc(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let shape = self.shape(*a);
                    let v = g[[0, 0]] / F::lit((shape.0 * shape.1) as f64);
                    self.acc(&mut grads, *a, Array2::from_elem(shape, v));
                }
                Op::SumCols(a) => {
                    let shape = self.shape(*a);
                    let ga = g
                        .broadcast(shape)
                        .expect("sum_cols broadcast")
                        .to_owned();
                    self.acc(&mut grads, *a, ga);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    seq_len,
                    heads,
                    probs,
                } => {
                    let (rows, d) = self.shape(*q);
                    let dh = d / heads;
                    let scale = F::lit(1.0 / (dh as f64).sqrt());
                    let n = rows / seq_len;
                    let (qa, ka, va) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut gq = Array2::zeros((rows, d));
                    let mut gk = Array2::zeros((rows, d));
                    let mut gv = Array2::zeros((rows, d));
                    for b in 0..n {
                        let r = b * seq_len..(b + 1) * seq_len;
                        for h in 0..*heads {
                            let c = h * dh..(h + 1) * dh;
                            let p = &probs[b * heads + h];
                            let go = g.slice(s![r.clone(), c.clone()]);
                            let vb = va.slice(s![r.clone(), c.clone()]);
                            gv.slice_mut(s![r.clone(), c.clone()])
                                .assign(&p.t().dot(&go));
                            let gp = go.dot(&vb.t());
                            let mut gs = gp;
                            for (mut grow, prow) in gs.rows_mut().into_iter().zip(p.rows()) {
                                let dot: F =
                                    grow.iter().zip(prow.iter()).map(|(&x, &y)| x * y).sum();
                                Zip::from(&mut grow)
                                    .and(&prow)
                                    .for_each(|dd, &pv| *dd = pv * (*dd - dot) * scale);
                            }
                            let qb = qa.slice(s![r.clone(), c.clone()]);
                            let kb = ka.slice(s![r.clone(), c.clone()]);
                            gq.slice_mut(s![r.clone(), c.clone()]).assign(&gs.dot(&kb));
                            gk.slice_mut(s![r.clone(), c.clone()])
                                .assign(&gs.t().dot(&qb));
                        }
                    }
                    if self.nodes[q.0].needs_grad {
                        self.acc(&mut grads, *q, gq);
                    }
                    if self.nodes[k.0].needs_grad {
                        self.acc(&mut grads, *k, gk);
                    }
                    if self.nodes[v.0].needs_grad {
                        self.acc(&mut grads, *v, gv);
                    }
                }
                Op::LstmCell { pre, c_prev, gates } => {
                    let cp = self.value(*c_prev);
                    let hdim = cp.ncols();
                    let out = &node.value;
                    let mut gpre = Array2::zeros(gates.dim());
                    let mut gc_prev = Array2::zeros(cp.dim());
                    for r in 0..gates.nrows() {
                        for j in 0..hdim {
                            let i = gates[[r, j]];
                            let f = gates[[r, hdim + j]];
                            let gg = gates[[r, 2 * hdim + j]];
                            let o = gates[[r, 3 * hdim + j]];
                            let c = out[[r, hdim + j]];
                            let tc = c.tanh();
                            let dh = g[[r, j]];
                            let dc = g[[r, hdim + j]] + dh * o * (F::one() - tc * tc);
                            gpre[[r, j]] = dc * gg * i * (F::one() - i);
                            gpre[[r, hdim + j]] = dc * cp[[r, j]] * f * (F::one() - f);
                            gpre[[r, 2 * hdim + j]] = dc * i * (F::one() - gg * gg);
                            gpre[[r, 3 * hdim + j]] = dh * tc * o * (F::one() - o);
                            gc_prev[[r, j]] = dc * f;
                        }
                    }
                    if self.nodes[pre.0].needs_grad {
                        self.acc(&mut grads, *pre, gpre);
                    }
                    if self.nodes[c_prev.0].needs_grad {
                        self.acc(&mut grads, *c_prev, gc_prev);
                    }
                }
                Op::GruCell {
                    xp,
                    hp,
                    h_prev,
                    gates,
                } => {
                    let ha = self.value(*hp);
                    let hprev = self.value(*h_prev);
                    let hdim = hprev.ncols();
                    let mut gx = Array2::zeros((hprev.nrows(), 3 * hdim));
                    let mut gh = Array2::zeros((hprev.nrows(), 3 * hdim));
                    let mut ghp = Array2::zeros(hprev.dim());
                    for r in 0..hprev.nrows() {
                        for j in 0..hdim {
                            let rg = gates[[r, j]];
                            let z = gates[[r, hdim + j]];
                            let nn = gates[[r, 2 * hdim + j]];
                            let d = g[[r, j]];
                            let dn = d * (F::one() - z) * (F::one() - nn * nn);
                            let dz = d * (hprev[[r, j]] - nn) * z * (F::one() - z);
                            let dr = dn * ha[[r, 2 * hdim + j]] * rg * (F::one() - rg);
                            gx[[r, j]] = dr;
                            gx[[r, hdim + j]] = dz;
                            gx[[r, 2 * hdim + j]] = dn;
                            gh[[r, j]] = dr;
                            gh[[r, hdim + j]] = dz;
                            gh[[r, 2 * hdim + j]] = dn * rg;
                            ghp[[r, j]] = d * z;
                        }
                    }
                    if self.nodes[xp.0].needs_grad {
                        self.acc(&mut grads, *xp, gx);
                    }
                    if self.nodes[hp.0].needs_grad {
                        self.acc(&mut grads, *hp, gh);
                    }
                    if self.nodes[h_prev.0].needs_grad {
                        self.acc(&mut grads, *h_prev, ghp);
                    }
                }
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }
}

fn group_reduce<F: Real>(x: &Array2<F>, group: usize, mean: bool) -> Array2<F> {
    let n = x.nrows() / group;
    let mut out = Array2::zeros((n, x.ncols()));
    for b in 0..n {
        let mut row = out.row_mut(b);
        for r in b * group..(b + 1) * group {
            row += &x.row(r);
        }
    }
    if mean {
        let inv = F::one() / F::lit(group as f64);
        out.mapv_inplace(|v| v * inv);
    }
    out
}
