//! Reverse-mode differentiation over batched matrices.
//!
//! Operations are appended to a [`GradTape`] in evaluation order; `backward`
//! walks them once in reverse, skipping anything that does not lead to a
//! trainable leaf.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::gemm::{gemm, MatRef};
use super::layer::{affine, Activation};
use super::{NnError, Tensor};
use crate::par::Exec;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Lower/upper clamp applied to probabilities before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: usize },
    Act { x: usize, act: Activation },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Tanh(usize),
    Gather { x: usize, cols: Vec<usize> },
    Scatter { a: usize, a_cols: Vec<usize>, b: usize, b_cols: Vec<usize> },
    RowSum(usize),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    Bce { p: usize, t: usize },
    BceLogits { z: usize, t: usize },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation with cached activations.
pub struct GradTape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for GradTape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> GradTape<'a> {
    pub fn new() -> Self {
        GradTape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, id: NodeId) -> Result<usize, NnError> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(NnError::DetachedNode);
        }
        Ok(id.index)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Owned leaf that receives a gradient (used for input gradients).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Borrowed trainable parameter.
    pub fn param(&mut self, value: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor, NnError> {
        Ok(self.val(self.idx(id)?))
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64, NnError> {
        let v = self.value(id)?;
        if v.len() != 1 {
            return Err(NnError::NotScalar(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (x, w, b) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let y = affine(self.val(x), self.val(w), self.val(b))?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Cow::Owned(y), Op::Linear { x, w, b }, ng))
    }

    pub fn activation(&mut self, x: NodeId, act: Activation) -> Result<NodeId, NnError> {
        if act == Activation::Linear {
            return Ok(x);
        }
        let x = self.idx(x)?;
        let mut y = self.val(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(y), Op::Act { x, act }, ng))
    }

    fn zip_with(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(usize, usize, Tensor), NnError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.val(a).same_shape(self.val(b))?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((a, b, Tensor::from_parts(self.val(a).shape().to_vec(), data)))
    }

    fn map(&self, a: usize, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.val(a);
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (a, b, y) = self.zip_with(a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(y), Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (a, b, y) = self.zip_with(a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(y), Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (a, b, y) = self.zip_with(a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(y), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, NnError> {
        let a = self.idx(a)?;
        let y = self.map(a, |x| c * x);
        let ng = self.ng(a);
        Ok(self.push(Cow::Owned(y), Op::Scale(a, c), ng))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId, NnError> {
        let a = self.idx(a)?;
        let y = self.map(a, |x| x + c);
        let ng = self.ng(a);
        Ok(self.push(Cow::Owned(y), Op::Offset(a), ng))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let a = self.idx(a)?;
        let y = self.map(a, f64::exp);
        let ng = self.ng(a);
        Ok(self.push(Cow::Owned(y), Op::Exp(a), ng))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let a = self.idx(a)?;
        let y = self.map(a, f64::tanh);
        let ng = self.ng(a);
        Ok(self.push(Cow::Owned(y), Op::Tanh(a), ng))
    }

    /// Selects columns `cols` of a `[n, d]` matrix.
    pub fn gather_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId, NnError> {
        let x = self.idx(x)?;
        let v = self.val(x);
        let d = v.cols();
        if let Some(&bad) = cols.iter().find(|&&c| c >= d) {
            return Err(NnError::ShapeMismatch {
                expected: vec![d],
                found: vec![bad + 1],
            });
        }
        let n = v.rows();
        let mut data = Vec::with_capacity(n * cols.len());
        for r in v.row_vectors() {
            data.extend(cols.iter().map(|&c| r[c]));
        }
        let y = Tensor::from_parts(vec![n, cols.len()], data);
        let ng = self.ng(x);
        Ok(self.push(
            Cow::Owned(y),
            Op::Gather {
                x,
                cols: cols.to_vec(),
            },
            ng,
        ))
    }

    /// Interleaves the columns of `a` and `b` into positions `a_cols` and `b_cols`.
    pub fn scatter_cols(
        &mut self,
        a: NodeId,
        a_cols: &[usize],
        b: NodeId,
        b_cols: &[usize],
    ) -> Result<NodeId, NnError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (self.val(a), self.val(b));
        let width = a_cols.len() + b_cols.len();
        if va.cols() != a_cols.len() || vb.cols() != b_cols.len() || va.rows() != vb.rows() {
            return Err(NnError::ShapeMismatch {
                expected: va.shape().to_vec(),
                found: vb.shape().to_vec(),
            });
        }
        let n = va.rows();
        let mut data = vec![0.0; n * width];
        for i in 0..n {
            let out = &mut data[i * width..(i + 1) * width];
            for (j, &c) in a_cols.iter().enumerate() {
                out[c] = va.row(i)[j];
            }
            for (j, &c) in b_cols.iter().enumerate() {
                out[c] = vb.row(i)[j];
            }
        }
        let y = Tensor::from_parts(vec![n, width], data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Cow::Owned(y),
            Op::Scatter {
                a,
                a_cols: a_cols.to_vec(),
                b,
                b_cols: b_cols.to_vec(),
            },
            ng,
        ))
    }

    /// Sums each row: `[n, d] -> [n, 1]`.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let a = self.idx(a)?;
        let v = self.val(a);
        let data: Vec<f64> = v.row_vectors().map(|r| r.iter().sum()).collect();
        let y = Tensor::from_parts(vec![data.len(), 1], data);
        let ng = self.ng(a);
        Ok(self.push(Cow::Owned(y), Op::RowSum(a), ng))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let a = self.idx(a)?;
        let s = self.val(a).data().iter().sum();
        let ng = self.ng(a);
        Ok(self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let a = self.idx(a)?;
        let v = self.val(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        Ok(self.push(Cow::Owned(Tensor::scalar(s)), Op::Mean(a), ng))
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let s = super::mse(self.val(a), self.val(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(Tensor::scalar(s)), Op::Mse(a, b), ng))
    }

    /// Mean binary cross-entropy of predictions `p` against fixed targets `t`.
    pub fn bce(&mut self, p: NodeId, t: NodeId) -> Result<NodeId, NnError> {
        let (p, t) = (self.idx(p)?, self.idx(t)?);
        let s = super::bce(self.val(p), self.val(t))?;
        let ng = self.ng(p);
        Ok(self.push(Cow::Owned(Tensor::scalar(s)), Op::Bce { p, t }, ng))
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against fixed targets `t`.
    pub fn bce_with_logits(&mut self, z: NodeId, t: NodeId) -> Result<NodeId, NnError> {
        let (z, t) = (self.idx(z)?, self.idx(t)?);
        let s = super::bce_with_logits(self.val(z), self.val(t))?;
        let ng = self.ng(z);
        Ok(self.push(Cow::Owned(Tensor::scalar(s)), Op::BceLogits { z, t }, ng))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NnError> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(NnError::DetachedLoss);
        }
        let root = loss.index;
        if self.val(root).len() != 1 {
            return Err(NnError::NotScalar(self.val(root).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::filled(self.val(root).shape(), 1.0));

        for i in (0..=root).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = self.val(i);
        let like = |a: usize, data: Vec<f64>| Tensor::from_parts(self.val(a).shape().to_vec(), data);
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Linear { x, w, b } => {
                let (vx, vw) = (self.val(x), self.val(w));
                let (out, inp) = (vw.shape()[0], vw.cols());
                let n = vx.rows();
                if self.ng(x) {
                    let mut dx = vec![0.0; n * inp];
                    gemm(
                        Exec::default(),
                        n,
                        out,
                        inp,
                        MatRef::row_major(g.data(), out),
                        MatRef::row_major(vw.data(), inp),
                        &mut dx,
                        false,
                    );
                    accumulate(grads, x, like(x, dx));
                }
                if self.ng(w) {
                    let mut dw = vec![0.0; out * inp];
                    gemm(
                        Exec::default(),
                        out,
                        n,
                        inp,
                        MatRef::transposed(g.data(), out),
                        MatRef::row_major(vx.data(), inp),
                        &mut dw,
                        false,
                    );
                    accumulate(grads, w, like(w, dw));
                }
                if self.ng(b) {
                    let mut db = vec![0.0; out];
                    for r in g.row_vectors() {
                        for (d, v) in db.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    accumulate(grads, b, like(b, db));
                }
            }
            &Op::Act { x, act } => {
                if self.ng(x) {
                    let dx = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * act.derivative_from_output(yv))
                        .collect();
                    accumulate(grads, x, like(x, dx));
                }
            }
            &Op::Add(a, b) => {
                for p in [a, b] {
                    if self.ng(p) {
                        accumulate(grads, p, g.clone());
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.ng(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.ng(b) {
                    accumulate(grads, b, like(b, g.data().iter().map(|v| -v).collect()));
                }
            }
            &Op::Mul(a, b) => {
                for (p, q) in [(a, b), (b, a)] {
                    if self.ng(p) {
                        let d = g.data().iter().zip(self.val(q).data()).map(|(x, y)| x * y).collect();
                        accumulate(grads, p, like(p, d));
                    }
                }
            }
            &Op::Scale(a, c) => {
                if self.ng(a) {
                    accumulate(grads, a, like(a, g.data().iter().map(|v| c * v).collect()));
                }
            }
            &Op::Offset(a) => {
                if self.ng(a) {
                    accumulate(grads, a, g.clone());
                }
            }
            &Op::Exp(a) => {
                if self.ng(a) {
                    let d = g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv).collect();
                    accumulate(grads, a, like(a, d));
                }
            }
            &Op::Tanh(a) => {
                if self.ng(a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    accumulate(grads, a, like(a, d));
                }
            }
            Op::Gather { x, cols } => {
                let x = *x;
                if self.ng(x) {
                    let d = self.val(x).cols();
                    let mut dx = vec![0.0; self.val(x).len()];
                    for (r, gr) in g.row_vectors().enumerate() {
                        for (j, &c) in cols.iter().enumerate() {
                            dx[r * d + c] += gr[j];
                        }
                    }
                    accumulate(grads, x, like(x, dx));
                }
            }
            Op::Scatter { a, a_cols, b, b_cols } => {
                for (p, cols) in [(*a, a_cols), (*b, b_cols)] {
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(self.val(p).len());
                        for gr in g.row_vectors() {
                            d.extend(cols.iter().map(|&c| gr[c]));
                        }
                        accumulate(grads, p, like(p, d));
                    }
                }
            }
            &Op::RowSum(a) => {
                if self.ng(a) {
                    let d = self.val(a).cols();
                    let dx = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect();
                    accumulate(grads, a, like(a, dx));
                }
            }
            &Op::Sum(a) => {
                if self.ng(a) {
                    accumulate(grads, a, Tensor::filled(self.val(a).shape(), g.data()[0]));
                }
            }
            &Op::Mean(a) => {
                if self.ng(a) {
                    let n = self.val(a).len() as f64;
                    accumulate(grads, a, Tensor::filled(self.val(a).shape(), g.data()[0] / n));
                }
            }
            &Op::Mse(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                let k = 2.0 * g.data()[0] / va.len() as f64;
                let d: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| k * (x - y)).collect();
                if self.ng(b) {
                    accumulate(grads, b, like(b, d.iter().map(|v| -v).collect()));
                }
                if self.ng(a) {
                    accumulate(grads, a, like(a, d));
                }
            }
            &Op::Bce { p, t } => {
                if self.ng(p) {
                    let (vp, vt) = (self.val(p), self.val(t));
                    let k = g.data()[0] / vp.len() as f64;
                    let d = vp
                        .data()
                        .iter()
                        .zip(vt.data())
                        .map(|(&pv, &tv)| {
                            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pv) {
                                0.0
                            } else {
                                k * (pv - tv) / (pv * (1.0 - pv))
                            }
                        })
                        .collect();
                    accumulate(grads, p, like(p, d));
                }
            }
            &Op::BceLogits { z, t } => {
                if self.ng(z) {
                    let (vz, vt) = (self.val(z), self.val(t));
                    let k = g.data()[0] / vz.len() as f64;
                    let d = vz
                        .data()
                        .iter()
                        .zip(vt.data())
                        .map(|(&zv, &tv)| k * (Activation::Sigmoid.apply(zv) - tv))
                        .collect();
                    accumulate(grads, z, like(z, d));
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`GradTape::backward`].
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`; zeros when the node does not influence the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        assert_eq!(id.tape, self.tape, "node belongs to a different tape");
        match &self.grads[id.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.index]),
        }
    }
}
