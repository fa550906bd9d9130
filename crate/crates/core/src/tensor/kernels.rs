//! Forward kernels and their vector-Jacobian products.
//!
//! Every reduction runs in a fixed sequential order, so results are
//! bitwise reproducible run to run.

use super::{Float, Tensor};
use crate::error::{Error, Result};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Sum with an `f64` accumulator in index order.
pub fn sum<T: Float>(xs: &[T]) -> T {
    T::from_f64(xs.iter().fold(0.0, |acc, v| acc + v.to_f64()))
}

fn expect_ndim<T: Float>(t: &Tensor<T>, ndim: usize, op: &str) -> Result<()> {
    if t.ndim() != ndim {
        return Err(Error::shape(format!(
            "{op}: expected {ndim}-d tensor, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `a: [.., m, k]` times `b: [k, n]`; leading axes of `a` are flattened into rows.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() < 2 || b.ndim() != 2 {
        return Err(Error::shape(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let k = *a.shape().last().unwrap();
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if k != kb {
        return Err(Error::shape(format!(
            "matmul inner dimension: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let m = a.numel() / k;
    let mut out = vec![T::ZERO; m * n];
    T::gemm(
        m,
        k,
        n,
        T::ONE,
        a.data(),
        (k as isize, 1),
        b.data(),
        (n as isize, 1),
        T::ZERO,
        &mut out,
        (n as isize, 1),
    );
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::from_vec(&shape, out)
}

/// Geometry of a batched product `op(a)·op(b)` where `op` optionally transposes
/// the trailing two axes. `b` may have batch extent 1 and is then broadcast.
#[derive(Clone, Copy, Debug)]
pub struct BmmDims {
    pub batch: usize,
    pub b_batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub trans_a: bool,
    pub trans_b: bool,
}

impl BmmDims {
    pub fn new<T: Float>(
        a: &Tensor<T>,
        b: &Tensor<T>,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<Self> {
        expect_ndim(a, 3, "bmm")?;
        expect_ndim(b, 3, "bmm")?;
        let (batch, a0, a1) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (b_batch, b0, b1) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if k != kb || (b_batch != batch && b_batch != 1) {
            return Err(Error::shape(format!(
                "bmm: {:?}{} x {:?}{}",
                a.shape(),
                if trans_a { "ᵀ" } else { "" },
                b.shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        Ok(Self {
            batch,
            b_batch,
            m,
            k,
            n,
            trans_a,
            trans_b,
        })
    }

    fn a_strides(&self) -> (isize, isize) {
        // stored as [m,k] or [k,m]
        if self.trans_a {
            (1, self.m as isize)
        } else {
            (self.k as isize, 1)
        }
    }

    fn b_strides(&self) -> (isize, isize) {
        if self.trans_b {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }
}

/// Batched matrix product over 3-d tensors.
pub fn bmm<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let d = BmmDims::new(a, b, trans_a, trans_b)?;
    let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
    let mut out = vec![T::ZERO; d.batch * sc];
    for i in 0..d.batch {
        let bi = if d.b_batch == 1 { 0 } else { i };
        T::gemm(
            d.m,
            d.k,
            d.n,
            T::ONE,
            &a.data()[i * sa..(i + 1) * sa],
            d.a_strides(),
            &b.data()[bi * sb..(bi + 1) * sb],
            d.b_strides(),
            T::ZERO,
            &mut out[i * sc..(i + 1) * sc],
            (d.n as isize, 1),
        );
    }
    Tensor::from_vec(&[d.batch, d.m, d.n], out)
}

/// Gradients of [`bmm`] with respect to both operands.
pub fn bmm_backward<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &[T],
    d: BmmDims,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
    let mut da = need_a.then(|| vec![T::ZERO; a.numel()]);
    let mut db = need_b.then(|| vec![T::ZERO; b.numel()]);
    for i in 0..d.batch {
        let bi = if d.b_batch == 1 { 0 } else { i };
        let dyi = &dy[i * sc..(i + 1) * sc];
        let ai = &a.data()[i * sa..(i + 1) * sa];
        let bmat = &b.data()[bi * sb..(bi + 1) * sb];
        if let Some(da) = da.as_mut() {
            // d op(a) = dy · op(b)ᵀ, written through op's strides.
            let (bs0, bs1) = d.b_strides();
            let da_strides = if d.trans_a {
                (1, d.m as isize)
            } else {
                (d.k as isize, 1)
            };
            T::gemm(
                d.m,
                d.n,
                d.k,
                T::ONE,
                dyi,
                (d.n as isize, 1),
                bmat,
                (bs1, bs0),
                T::ONE,
                &mut da[i * sa..(i + 1) * sa],
                da_strides,
            );
        }
        if let Some(db) = db.as_mut() {
            // d op(b) = op(a)ᵀ · dy
            let (as0, as1) = d.a_strides();
            let db_strides = if d.trans_b {
                (1, d.k as isize)
            } else {
                (d.n as isize, 1)
            };
            T::gemm(
                d.k,
                d.m,
                d.n,
                T::ONE,
                ai,
                (as1, as0),
                dyi,
                (d.n as isize, 1),
                T::ONE,
                &mut db[bi * sb..(bi + 1) * sb],
                db_strides,
            );
        }
    }
    (da, db)
}

/// Geometry of a 2-d convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn new<T: Float>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        expect_ndim(x, 4, "conv2d input")?;
        expect_ndim(weight, 4, "conv2d weight")?;
        let [n, c_in, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [c_out, wc, kh, kw] = [
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        ];
        if wc != c_in {
            return Err(Error::shape(format!(
                "conv2d: input {:?} vs weight {:?}",
                x.shape(),
                weight.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col<T: Float>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let hw_out = d.out_len();
    for ci in 0..d.c_in {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (ci * d.kh + i) * d.kw + j;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + i) as isize - d.pad as isize;
                    let line = &mut dst[oy * d.w_out..(oy + 1) * d.w_out];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * d.stride + j) as isize - d.pad as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Float>(cols: &[T], d: &ConvDims, dx: &mut [T]) {
    let hw_out = d.out_len();
    for ci in 0..d.c_in {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (ci * d.kh + i) * d.kw + j;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + i) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.w_out {
                        let ix = (ox * d.stride + j) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [N, C_in, H, W]` with `weight: [C_out, C_in, kh, kw]`.
pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let d = ConvDims::new(x, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [d.c_out] {
            return Err(Error::shape(format!(
                "conv2d bias {:?} for {} output channels",
                b.shape(),
                d.c_out
            )));
        }
    }
    let (in_len, out_len, patch) = (d.c_in * d.h * d.w, d.out_len(), d.patch_len());
    let mut out = vec![T::ZERO; d.n * d.c_out * out_len];
    let mut cols = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; patch * out_len]
    };
    for b in 0..d.n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let yb = &mut out[b * d.c_out * out_len..(b + 1) * d.c_out * out_len];
        if let Some(bias) = bias {
            for (co, row) in yb.chunks_exact_mut(out_len).enumerate() {
                row.fill(bias.data()[co]);
            }
        }
        let src: &[T] = if d.is_pointwise() {
            xb
        } else {
            im2col(xb, &d, &mut cols);
            &cols
        };
        T::gemm(
            d.c_out,
            patch,
            out_len,
            T::ONE,
            weight.data(),
            (patch as isize, 1),
            src,
            (out_len as isize, 1),
            if bias.is_some() { T::ONE } else { T::ZERO },
            yb,
            (out_len as isize, 1),
        );
    }
    Tensor::from_vec(&[d.n, d.c_out, d.h_out, d.w_out], out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &[T],
    d: ConvDims,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (in_len, out_len, patch) = (d.c_in * d.h * d.w, d.out_len(), d.patch_len());
    let mut dx = need.0.then(|| vec![T::ZERO; x.numel()]);
    let mut dw = need.1.then(|| vec![T::ZERO; weight.numel()]);
    let mut db = need.2.then(|| vec![T::ZERO; d.c_out]);
    let mut cols = vec![T::ZERO; if d.is_pointwise() { 0 } else { patch * out_len }];
    let mut dcols = vec![T::ZERO; if dx.is_some() { patch * out_len } else { 0 }];
    for b in 0..d.n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * d.c_out * out_len..(b + 1) * d.c_out * out_len];
        if let Some(db) = db.as_mut() {
            for (co, row) in dyb.chunks_exact(out_len).enumerate() {
                db[co] += sum(row);
            }
        }
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if d.is_pointwise() {
                xb
            } else {
                im2col(xb, &d, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            T::gemm(
                d.c_out,
                out_len,
                patch,
                T::ONE,
                dyb,
                (out_len as isize, 1),
                src,
                (1, out_len as isize),
                T::ONE,
                dw,
                (patch as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            // dcols = Wᵀ · dY
            if d.is_pointwise() {
                T::gemm(
                    patch,
                    d.c_out,
                    out_len,
                    T::ONE,
                    weight.data(),
                    (1, patch as isize),
                    dyb,
                    (out_len as isize, 1),
                    T::ONE,
                    dxb,
                    (out_len as isize, 1),
                );
            } else {
                T::gemm(
                    patch,
                    d.c_out,
                    out_len,
                    T::ONE,
                    weight.data(),
                    (1, patch as isize),
                    dyb,
                    (out_len as isize, 1),
                    T::ZERO,
                    &mut dcols,
                    (out_len as isize, 1),
                );
                col2im_add(&dcols, &d, dxb);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Normalized values and per-(sample, group) reciprocal standard deviations.
pub struct GroupNormParts<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

fn group_geometry<T: Float>(x: &Tensor<T>, groups: usize) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::shape(format!("group_norm on {:?}", x.shape())));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(format!(
            "group_norm: {groups} groups do not divide {c} channels"
        )));
    }
    let spatial = x.numel() / (n * c);
    Ok((n, groups, (c / groups) * spatial))
}

pub fn group_norm_parts<T: Float>(
    x: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<GroupNormParts<T>> {
    let (n, g, len) = group_geometry(x, groups)?;
    let mut xhat = vec![T::ZERO; x.numel()];
    let mut rstd = Vec::with_capacity(n * g);
    for (chunk, out) in x.data().chunks_exact(len).zip(xhat.chunks_exact_mut(len)) {
        let mean = chunk.iter().map(|v| v.to_f64()).sum::<f64>() / len as f64;
        let var = chunk
            .iter()
            .map(|v| {
                let d = v.to_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / len as f64;
        let r = 1.0 / (var + eps).sqrt();
        let (mean_t, r_t) = (T::from_f64(mean), T::from_f64(r));
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = (v - mean_t) * r_t;
        }
        rstd.push(r_t);
    }
    Ok(GroupNormParts { xhat, rstd })
}

pub fn group_norm_backward<T: Float>(parts: &GroupNormParts<T>, dy: &[T]) -> Vec<T> {
    let len = parts.xhat.len() / parts.rstd.len();
    let mut dx = vec![T::ZERO; dy.len()];
    for (((xh, g), out), &r) in parts
        .xhat
        .chunks_exact(len)
        .zip(dy.chunks_exact(len))
        .zip(dx.chunks_exact_mut(len))
        .zip(&parts.rstd)
    {
        let mean_g = g.iter().map(|v| v.to_f64()).sum::<f64>() / len as f64;
        let mean_gx = g
            .iter()
            .zip(xh)
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum::<f64>()
            / len as f64;
        let (mg, mgx) = (T::from_f64(mean_g), T::from_f64(mean_gx));
        for ((o, &gi), &xi) in out.iter_mut().zip(g).zip(xh) {
            *o = r * (gi - mg - xi * mgx);
        }
    }
    dx
}

/// Group normalization over `[N, C, ..]` with optional per-channel affine.
pub fn group_norm<T: Float>(
    x: &Tensor<T>,
    groups: usize,
    scale: Option<&Tensor<T>>,
    shift: Option<&Tensor<T>>,
    eps: f64,
) -> Result<Tensor<T>> {
    let parts = group_norm_parts(x, groups, eps)?;
    let mut y = Tensor::from_vec(x.shape(), parts.xhat)?;
    if let Some(s) = scale {
        y = channel_mul(&y, s)?;
    }
    if let Some(b) = shift {
        y = channel_add(&y, b)?;
    }
    Ok(y)
}

/// Layout of a per-channel operand `[C]` or `[N, C]` broadcast over `[N, C, ..]`.
#[derive(Clone, Copy, Debug)]
pub struct ChannelDims {
    pub n: usize,
    pub c: usize,
    pub spatial: usize,
    pub per_sample: bool,
}

impl ChannelDims {
    pub fn new<T: Float>(x: &Tensor<T>, p: &Tensor<T>) -> Result<Self> {
        if x.ndim() < 2 {
            return Err(Error::shape(format!("channel op on {:?}", x.shape())));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let per_sample = match p.shape() {
            [pc] if *pc == c => false,
            [pn, pc] if *pn == n && *pc == c => true,
            other => {
                return Err(Error::shape(format!(
                    "channel operand {other:?} for input {:?}",
                    x.shape()
                )))
            }
        };
        Ok(Self {
            n,
            c,
            spatial: x.numel() / (n * c),
            per_sample,
        })
    }

    #[inline]
    fn param_index(&self, b: usize, ch: usize) -> usize {
        if self.per_sample {
            b * self.c + ch
        } else {
            ch
        }
    }
}

fn channel_apply<T: Float>(
    x: &Tensor<T>,
    p: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let d = ChannelDims::new(x, p)?;
    let mut out = x.to_vec();
    for (i, plane) in out.chunks_exact_mut(d.spatial).enumerate() {
        let pv = p.data()[d.param_index(i / d.c, i % d.c)];
        for v in plane {
            *v = f(*v, pv);
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub fn channel_add<T: Float>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    channel_apply(x, bias, |a, b| a + b)
}

pub fn channel_mul<T: Float>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    channel_apply(x, scale, |a, b| a * b)
}

/// Reduces `dy` to the per-channel operand's shape, optionally weighting by `w`.
pub fn channel_reduce<T: Float>(d: ChannelDims, dy: &[T], w: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::ZERO; if d.per_sample { d.n * d.c } else { d.c }];
    for (i, plane) in dy.chunks_exact(d.spatial).enumerate() {
        let s = match w {
            Some(w) => plane
                .iter()
                .zip(&w[i * d.spatial..(i + 1) * d.spatial])
                .map(|(a, b)| a.to_f64() * b.to_f64())
                .sum::<f64>(),
            None => plane.iter().map(|v| v.to_f64()).sum::<f64>(),
        };
        out[d.param_index(i / d.c, i % d.c)] += T::from_f64(s);
    }
    out
}

/// Bias over the last axis: `x: [.., n] + b: [n]`.
pub fn add_last<T: Float>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("add_last on a scalar"))?;
    if b.shape() != [n] {
        return Err(Error::shape(format!(
            "add_last: {:?} + {:?}",
            x.shape(),
            b.shape()
        )));
    }
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(n) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Row-wise softmax over the last axis, stabilized by subtracting the row max.
pub fn softmax_rows<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax_rows on a scalar"))?;
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(row[0], |a, b| a.max(b));
        let mut total = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += v.to_f64();
        }
        let inv = T::from_f64(1.0 / total);
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub fn softmax_rows_backward<T: Float>(y: &[T], dy: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; y.len()];
    for ((yr, gr), out) in y
        .chunks_exact(n)
        .zip(dy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot = T::from_f64(
            yr.iter()
                .zip(gr)
                .map(|(a, b)| a.to_f64() * b.to_f64())
                .sum::<f64>(),
        );
        for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
            *o = yi * (gi - dot);
        }
    }
    dx
}

#[inline]
pub fn sigmoid_scalar<T: Float>(v: T) -> T {
    T::ONE / (T::ONE + (-v).exp())
}

#[inline]
pub fn silu_scalar<T: Float>(v: T) -> T {
    v * sigmoid_scalar(v)
}

#[inline]
pub fn silu_grad_scalar<T: Float>(v: T) -> T {
    let s = sigmoid_scalar(v);
    s * (T::ONE + v * (T::ONE - s))
}

fn spatial4<T: Float>(x: &Tensor<T>, op: &str) -> Result<(usize, usize, usize)> {
    expect_ndim(x, 4, op)?;
    let s = x.shape();
    Ok((s[0] * s[1], s[2], s[3]))
}

/// Doubles both spatial extents by repetition.
pub fn nearest_upsample2<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = spatial4(x, "nearest_upsample")?;
    let mut out = vec![T::ZERO; planes * 4 * h * w];
    for (src, dst) in x
        .data()
        .chunks_exact(h * w)
        .zip(out.chunks_exact_mut(4 * h * w))
    {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                dst[y * 2 * w + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    }
    let s = x.shape();
    Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out)
}

pub fn nearest_upsample2_backward<T: Float>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; planes * h * w];
    for (g, dst) in dy.chunks_exact(4 * h * w).zip(dx.chunks_exact_mut(h * w)) {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                dst[(y / 2) * w + xo / 2] += g[y * 2 * w + xo];
            }
        }
    }
    dx
}

/// 2×2 mean pooling with stride 2; spatial extents must be even.
pub fn avgpool2<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = spatial4(x, "avgpool_downsample")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "avgpool_downsample needs even extents, got {:?}",
            x.shape()
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::ZERO; planes * ho * wo];
    for (src, dst) in x
        .data()
        .chunks_exact(h * w)
        .zip(out.chunks_exact_mut(ho * wo))
    {
        for y in 0..ho {
            for xo in 0..wo {
                let i = 2 * y * w + 2 * xo;
                dst[y * wo + xo] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    let s = x.shape();
    Tensor::from_vec(&[s[0], s[1], ho, wo], out)
}

pub fn avgpool2_backward<T: Float>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::ZERO; planes * h * w];
    for (g, dst) in dy.chunks_exact(ho * wo).zip(dx.chunks_exact_mut(h * w)) {
        for y in 0..h {
            for xo in 0..w {
                dst[y * w + xo] = g[(y / 2) * wo + xo / 2] * quarter;
            }
        }
    }
    dx
}

/// `[B, M, N] -> [B, N, M]`.
pub fn transpose_last2<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_ndim(x, 3, "transpose_last2")?;
    let (b, m, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![T::ZERO; x.numel()];
    for (src, dst) in x
        .data()
        .chunks_exact(m * n)
        .zip(out.chunks_exact_mut(m * n))
    {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    Tensor::from_vec(&[b, n, m], out)
}

/// Concatenates `[N, C_i, ..]` tensors along the channel axis.
pub fn concat_channels<T: Float>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?;
    if first.ndim() < 2 {
        return Err(Error::shape("concat_channels needs at least 2 axes"));
    }
    let n = first.shape()[0];
    let rest = &first.shape()[2..];
    let spatial: usize = rest.iter().product();
    let mut channels = 0;
    for x in xs {
        if x.ndim() != first.ndim() || x.shape()[0] != n || &x.shape()[2..] != rest {
            return Err(Error::shape(format!(
                "concat_channels: {:?} vs {:?}",
                x.shape(),
                first.shape()
            )));
        }
        channels += x.shape()[1];
    }
    let mut out = Vec::with_capacity(n * channels * spatial);
    for b in 0..n {
        for x in xs {
            let len = x.shape()[1] * spatial;
            out.extend_from_slice(&x.data()[b * len..(b + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = channels;
    Tensor::from_vec(&shape, out)
}

/// For each query row, the index of the key with the largest logit; ties go
/// to the lowest index.
pub fn argmax_rows<T: Float>(logits: &[T], n: usize) -> Vec<usize> {
    logits
        .chunks_exact(n)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Gathers rows of `v: [Bv, n', d]` by per-query indices into `[B, n, d]`.
pub fn gather_rows_batched<T: Float>(
    v: &Tensor<T>,
    idx: &[usize],
    batch: usize,
    n: usize,
) -> Result<Tensor<T>> {
    expect_ndim(v, 3, "gather_rows")?;
    let (bv, nk, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let mut out = Vec::with_capacity(batch * n * d);
    for b in 0..batch {
        let vb = if bv == 1 { 0 } else { b };
        for &j in &idx[b * n..(b + 1) * n] {
            let off = (vb * nk + j) * d;
            out.extend_from_slice(&v.data()[off..off + d]);
        }
    }
    Tensor::from_vec(&[batch, n, d], out)
}
