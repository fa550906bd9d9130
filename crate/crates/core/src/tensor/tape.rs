//! Reverse-mode differentiation over a linear record of operations.

use std::collections::HashMap;

use super::kernels::{self, BmmDims, ChannelDims, ConvDims, GroupNormParts};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ChannelAdd(Var, Var, ChannelDims),
    ChannelMul(Var, Var, ChannelDims),
    AddLast(Var, Var),
    Matmul(Var, Var),
    Bmm(Var, Var, BmmDims),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    GroupNorm(Var, GroupNormParts<T>),
    Silu(Var),
    Softmax(Var),
    Upsample2(Var),
    AvgPool2(Var),
    Reshape(Var),
    TransposeLast2(Var),
    Concat(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    HardGather {
        v: Var,
        idx: Vec<usize>,
        batch: usize,
        n: usize,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for a single forward pass.
///
/// Built with [`Tape::new`] it keeps what backward needs; built with
/// [`Tape::inference`] every result is a constant and nothing is saved.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T: Float> {
    grads: HashMap<Var, Tensor<T>>,
    shapes: HashMap<Var, Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient for `var`; zero when the leaf has no path to the loss.
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        if let Some(g) = self.grads.get(&var) {
            return Some(g.clone());
        }
        self.shapes.get(&var).map(|s| Tensor::zeros(s))
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: impl FnOnce() -> Op<T>) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, &[a, b], || Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(y, &[a, b], || Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, &[a, b], || Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let y = self.value(a).scale(s);
        self.push(y, &[a], || Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let y = self.value(a).map(|v| v + s);
        self.push(y, &[a], || Op::AddScalar(a))
    }

    /// `x: [N, C, ..] + b` with `b: [C]` or `[N, C]`.
    pub fn channel_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let dims = ChannelDims::new(self.value(x), self.value(b))?;
        let y = kernels::channel_add(self.value(x), self.value(b))?;
        Ok(self.push(y, &[x, b], || Op::ChannelAdd(x, b, dims)))
    }

    /// `x: [N, C, ..] * s` with `s: [C]` or `[N, C]`.
    pub fn channel_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        let dims = ChannelDims::new(self.value(x), self.value(s))?;
        let y = kernels::channel_mul(self.value(x), self.value(s))?;
        Ok(self.push(y, &[x, s], || Op::ChannelMul(x, s, dims)))
    }

    /// Bias over the last axis.
    pub fn add_last(&mut self, x: Var, b: Var) -> Result<Var> {
        let y = kernels::add_last(self.value(x), self.value(b))?;
        Ok(self.push(y, &[x, b], || Op::AddLast(x, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, &[a, b], || Op::Matmul(a, b)))
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let dims = BmmDims::new(self.value(a), self.value(b), trans_a, trans_b)?;
        let y = kernels::bmm(self.value(a), self.value(b), trans_a, trans_b)?;
        Ok(self.push(y, &[a, b], || Op::Bmm(a, b, dims)))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let dims = ConvDims::new(self.value(x), self.value(w), stride, pad)?;
        let y = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, &inputs, || Op::Conv2d { x, w, b, dims }))
    }

    /// Group normalization without affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Result<Var> {
        let parts = kernels::group_norm_parts(self.value(x), groups, kernels::GROUP_NORM_EPS)?;
        let y = Tensor::from_vec(self.value(x).shape(), parts.xhat.clone())?;
        Ok(self.push(y, &[x], || Op::GroupNorm(x, parts)))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).silu();
        self.push(y, &[x], || Op::Silu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let y = kernels::softmax_rows(self.value(x))?;
        Ok(self.push(y, &[x], || Op::Softmax(x)))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let y = kernels::nearest_upsample2(self.value(x))?;
        Ok(self.push(y, &[x], || Op::Upsample2(x)))
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let y = kernels::avgpool2(self.value(x))?;
        Ok(self.push(y, &[x], || Op::AvgPool2(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, &[x], || Op::Reshape(x)))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let y = kernels::transpose_last2(self.value(x))?;
        Ok(self.push(y, &[x], || Op::TransposeLast2(x)))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = kernels::concat_channels(&values)?;
        Ok(self.push(y, xs, || Op::Concat(xs.to_vec())))
    }

    /// Rows `idx` of a 2-d `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(Error::shape(format!("gather_rows on {:?}", t.shape())));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::invalid(format!("row {i} out of range 0..{rows}")));
            }
            out.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let y = Tensor::from_vec(&[idx.len(), cols], out)?;
        Ok(self.push(y, &[table], || Op::GatherRows(table, idx.to_vec())))
    }

    /// Hard attention: each query row takes the value row of its arg-max
    /// logit. `logits: [B, n, n']`, `v: [1 or B, n', d]`. Only `v` receives
    /// gradient; the selection itself is piecewise constant.
    pub fn hard_attend(&mut self, logits: Var, v: Var) -> Result<Var> {
        let l = self.value(logits);
        if l.ndim() != 3 {
            return Err(Error::shape(format!("hard_attend logits {:?}", l.shape())));
        }
        let (batch, n, nk) = (l.shape()[0], l.shape()[1], l.shape()[2]);
        let vv = self.value(v);
        if vv.ndim() != 3 || vv.shape()[1] != nk || (vv.shape()[0] != 1 && vv.shape()[0] != batch) {
            return Err(Error::shape(format!(
                "hard_attend: logits {:?} with values {:?}",
                l.shape(),
                vv.shape()
            )));
        }
        let idx = kernels::argmax_rows(l.data(), nk);
        let y = kernels::gather_rows_batched(vv, &idx, batch, n)?;
        Ok(self.push(y, &[v], || Op::HardGather { v, idx, batch, n }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, &[x], || Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).mean());
        self.push(y, &[x], || Op::Mean(x))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::invalid(
                "backward on a detached graph: loss does not depend on any parameter",
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        let mut out = HashMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                out.insert(Var(i), Tensor::from_vec(node.value.shape(), g)?);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads)?;
        }

        let shapes = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, n)| (Var(i), n.value.shape().to_vec()))
            .collect();
        Ok(Gradients { grads: out, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) || v.0 >= grads.len() {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op<T>,
        value: &Tensor<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.into_iter().map(|v| v * s).collect());
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::ChannelAdd(x, b, dims) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, kernels::channel_reduce(*dims, &g, None));
                }
                self.accumulate(grads, *x, g);
            }
            Op::ChannelMul(x, s, dims) => {
                if self.needs(*s) {
                    let xv = self.value(*x).data();
                    self.accumulate(grads, *s, kernels::channel_reduce(*dims, &g, Some(xv)));
                }
                if self.needs(*x) {
                    let gt = Tensor::from_vec(value.shape(), g)?;
                    let dx = kernels::channel_mul(&gt, self.value(*s))?;
                    self.accumulate(grads, *x, dx.into_vec());
                }
            }
            Op::AddLast(x, b) => {
                if self.needs(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![0.0f64; n];
                    for row in g.chunks_exact(n) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v.to_f64();
                        }
                    }
                    self.accumulate(grads, *b, db.into_iter().map(T::from_f64).collect());
                }
                self.accumulate(grads, *x, g);
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let m = av.numel() / k;
                if self.needs(*a) {
                    let mut da = vec![T::ZERO; av.numel()];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::ONE,
                        &g,
                        (n as isize, 1),
                        bv.data(),
                        (1, n as isize),
                        T::ZERO,
                        &mut da,
                        (k as isize, 1),
                    );
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::ZERO; bv.numel()];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::ONE,
                        av.data(),
                        (1, k as isize),
                        &g,
                        (n as isize, 1),
                        T::ZERO,
                        &mut db,
                        (n as isize, 1),
                    );
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Bmm(a, b, dims) => {
                let (da, db) = kernels::bmm_backward(
                    self.value(*a),
                    self.value(*b),
                    &g,
                    *dims,
                    self.needs(*a),
                    self.needs(*b),
                );
                if let Some(da) = da {
                    self.accumulate(grads, *a, da);
                }
                if let Some(db) = db {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let need_b = b.is_some_and(|b| self.needs(b));
                let cg = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    *dims,
                    (self.needs(*x), self.needs(*w), need_b),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::GroupNorm(x, parts) => {
                self.accumulate(grads, *x, kernels::group_norm_backward(parts, &g));
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| gi * kernels::silu_grad_scalar(xi))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let n = *value.shape().last().unwrap();
                self.accumulate(
                    grads,
                    *x,
                    kernels::softmax_rows_backward(value.data(), &g, n),
                );
            }
            Op::Upsample2(x) => {
                let s = self.value(*x).shape();
                let dx = kernels::nearest_upsample2_backward(&g, s[0] * s[1], s[2], s[3]);
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool2(x) => {
                let s = self.value(*x).shape();
                let dx = kernels::avgpool2_backward(&g, s[0] * s[1], s[2], s[3]);
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g),
            Op::TransposeLast2(x) => {
                let gt = Tensor::from_vec(value.shape(), g)?;
                let dx = kernels::transpose_last2(&gt)?;
                self.accumulate(grads, *x, dx.into_vec());
            }
            Op::Concat(xs) => {
                let n = value.shape()[0];
                let spatial: usize = value.shape()[2..].iter().product();
                let total = value.shape()[1] * spatial;
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).shape()[1] * spatial;
                    if self.needs(x) {
                        let mut dx = Vec::with_capacity(n * len);
                        for b in 0..n {
                            dx.extend_from_slice(&g[b * total + offset..b * total + offset + len]);
                        }
                        self.accumulate(grads, x, dx);
                    }
                    offset += len;
                }
            }
            Op::GatherRows(table, idx) => {
                let t = self.value(*table);
                let cols = t.shape()[1];
                let mut dt = vec![T::ZERO; t.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dt[i * cols + c] += g[r * cols + c];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::HardGather { v, idx, batch, n } => {
                let vv = self.value(*v);
                let (bv, nk, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
                let mut dv = vec![T::ZERO; vv.numel()];
                for b in 0..*batch {
                    let vb = if bv == 1 { 0 } else { b };
                    for (q, &j) in idx[b * n..(b + 1) * n].iter().enumerate() {
                        let src = ((b * n) + q) * d;
                        let dst = (vb * nk + j) * d;
                        for c in 0..d {
                            dv[dst + c] += g[src + c];
                        }
                    }
                }
                self.accumulate(grads, *v, dv);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / T::from_f64(n as f64); n]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let unused = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0; 4]).unwrap(), true);
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(unused).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn detached_graph_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        let loss = tape.sum(x);
        assert!(matches!(
            tape.backward(loss),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        let loss = tape.sum(x);
        assert!(tape.backward(loss).is_err());
    }
}
