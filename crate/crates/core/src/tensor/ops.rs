//! Forward definitions and adjoints of every primitive the models compose.

use super::kernels::{self, ConvGeom};
use super::tape::{Node, Tape, Var};
use super::{broadcast_shape, broadcast_strides, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Unary {
    Neg,
    Exp,
    Ln,
    Sigmoid,
    Relu,
    Softplus,
    Gelu,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    AddScalar(Var),
    Swish { x: Var, beta: Var },
    Sum(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPoolToOne(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Interp { x: Var, src_len: usize, dst_len: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    FocalLoss { logits: Var, targets: Vec<T>, alpha: T, gamma: T },
    IouLoss { pred: Var, target: Vec<T>, weight: Vec<T> },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Binary(_, a, b) | MatMul(a, b) => vec![*a, *b],
            Unary(_, x) | Scale(x, _) | AddScalar(x) | Sum(x) | Reshape(x) | Permute(x, _) | AvgPoolToOne(x)
            | Softmax(x) => vec![*x],
            Swish { x, beta } => vec![*x, *beta],
            Linear { x, w, b } | Conv1d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            MaxPool { x, .. } | Interp { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            FocalLoss { logits, .. } => vec![*logits],
            IouLoss { pred, .. } => vec![*pred],
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn unary_fwd<T: Scalar>(u: Unary, x: T) -> T {
    match u {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Sigmoid => scalar::sigmoid(x),
        Unary::Relu => x.max(T::zero()),
        Unary::Softplus => scalar::softplus(x),
        Unary::Gelu => {
            let inner = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
            T::c(0.5) * x * (T::one() + inner.tanh())
        }
    }
}

/// Derivative of a unary map given its input `x` and output `y`.
fn unary_deriv<T: Scalar>(u: Unary, x: T, y: T) -> T {
    match u {
        Unary::Neg => -T::one(),
        Unary::Exp => y,
        Unary::Ln => T::one() / x,
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Softplus => scalar::sigmoid(x),
        Unary::Gelu => {
            let inner = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
            let th = inner.tanh();
            let dinner = T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * x * x);
            T::c(0.5) * (T::one() + th) + T::c(0.5) * x * (T::one() - th * th) * dinner
        }
    }
}

/// Walks the broadcast output index space, yielding `(out, a_offset, b_offset)`.
fn broadcast_walk(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn binary_fwd<T: Scalar>(op: Binary, a: T, b: T) -> T {
    match op {
        Binary::Add => a + b,
        Binary::Sub => a - b,
        Binary::Mul => a * b,
        Binary::Div => a / b,
    }
}

fn binary_partials<T: Scalar>(op: Binary, a: T, b: T) -> (T, T) {
    match op {
        Binary::Add => (T::one(), T::one()),
        Binary::Sub => (T::one(), -T::one()),
        Binary::Mul => (b, a),
        Binary::Div => (T::one() / b, -a / (b * b)),
    }
}

fn check_rank<T: Scalar>(t: &Tensor<T>, rank: usize, op: &'static str, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(op, format!("{what} must have rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| binary_fwd(op, x, y)).collect();
            Tensor::new(ta.shape(), data)?
        } else {
            let out = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                Error::dim("broadcast", format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()))
            })?;
            let sa = broadcast_strides(ta.shape(), &out);
            let sb = broadcast_strides(tb.shape(), &out);
            let mut data = vec![T::zero(); out.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            broadcast_walk(&out, &sa, &sb, |i, ia, ib| data[i] = binary_fwd(op, da[ia], db[ib]));
            Tensor::new(&out, data)?
        };
        Ok(self.push(value, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, u: Unary, x: Var) -> Var {
        let value = self.value(x).map(|v| unary_fwd(u, v));
        self.push(value, Op::Unary(u, x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Ln, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x))
    }

    /// `x · sigmoid(beta · x)` with a one-element `beta` that may itself be learnable.
    pub fn swish(&mut self, x: Var, beta: Var) -> Result<Var> {
        if self.value(beta).numel() != 1 {
            return Err(Error::dim("swish", format!("beta must be a scalar, got {:?}", self.shape(beta))));
        }
        let b = self.value(beta).item();
        let value = self.value(x).map(|v| v * scalar::sigmoid(b * v));
        Ok(self.push(value, Op::Swish { x, beta }))
    }

    /// Swish with a fixed `beta`.
    pub fn swish_fixed(&mut self, x: Var, beta: T) -> Var {
        let b = self.constant(Tensor::scalar(beta));
        self.swish(x, b).expect("scalar beta")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::usize(n))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        Ok(self.push(value, Op::Permute(x, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::dim("transpose", "rank must be at least 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, rb) = (ta.rank(), tb.rank());
        if ra < 2 || ra != rb || ta.shape()[..ra - 2] != tb.shape()[..rb - 2] || ta.dim(-1) != tb.dim(-2) {
            return Err(Error::dim("matmul", format!("incompatible shapes {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.dim(-2), ta.dim(-1), tb.dim(-1));
        let batch: usize = ta.shape()[..ra - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            kernels::gemm(
                &ta.data()[bi * m * k..(bi + 1) * m * k],
                false,
                &tb.data()[bi * k * n..(bi + 1) * k * n],
                false,
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = ta.shape()[..ra - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b)))
    }

    /// Affine map over the last axis: `x · wᵀ + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        check_rank(tw, 2, "linear", "weight")?;
        let (dout, din) = (tw.shape()[0], tw.shape()[1]);
        if tx.dim(-1) != din {
            return Err(Error::dim(
                "linear",
                format!("input {:?} does not match weight {:?}", tx.shape(), tw.shape()),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(Error::dim("linear", format!("bias shape {:?} != [{dout}]", self.shape(b))));
            }
        }
        let rows = tx.numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            out.chunks_mut(dout).for_each(|r| r.copy_from_slice(bd));
        }
        kernels::gemm(tx.data(), false, tw.data(), true, &mut out, rows, din, dout);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }))
    }

    /// 1-D convolution over `[B, Cin, T]` with weight `[Cout, Cin, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv1d_grouped(x, w, b, stride, padding, 1)
    }

    /// Per-channel convolution; weight `[C, 1, K]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let c = self.value(x).dim(1);
        self.conv1d_grouped(x, w, b, stride, padding, c)
    }

    pub fn conv1d_grouped(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        check_rank(tx, 3, "conv1d", "input")?;
        check_rank(tw, 3, "conv1d", "weight")?;
        let (batch, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, cin_g, kernel) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::dim(
                "conv1d",
                format!("input {:?} incompatible with weight {:?} (groups {groups})", tx.shape(), tw.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv1d stride must be at least 1".into()));
        }
        if len + 2 * padding < kernel {
            return Err(Error::dim(
                "conv1d",
                format!("kernel {kernel} longer than padded input {} ", len + 2 * padding),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::dim("conv1d", format!("bias shape {:?} != [{cout}]", self.shape(b))));
            }
        }
        let out_len = (len + 2 * padding - kernel) / stride + 1;
        let geom = ConvGeom { batch, cin, cout, len, out_len, kernel, stride, padding, groups };
        let mut out = vec![T::zero(); batch * cout * out_len];
        kernels::conv1d_forward(&geom, tx.data(), tw.data(), b.map(|b| self.value(b).data()), &mut out);
        let value = Tensor::new(&[batch, cout, out_len], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, geom }))
    }

    /// Mean over time: `[B, C, T] -> [B, C, 1]`.
    pub fn adaptive_avg_pool1d_to_one(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        check_rank(tx, 3, "adaptive_avg_pool1d", "input")?;
        let (b, c, t) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if t == 0 {
            return Err(Error::EmptySequence { op: "adaptive_avg_pool1d" });
        }
        let inv = T::one() / T::usize(t);
        let data = tx.data().chunks(t).map(|row| row.iter().copied().sum::<T>() * inv).collect();
        Ok(self.push(Tensor::new(&[b, c, 1], data)?, Op::AvgPoolToOne(x)))
    }

    /// Window maximum with no padding: `T' = floor((T - k) / s) + 1`.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.max_pool1d_impl(x, kernel, stride, false)
    }

    /// Window maximum keeping a final truncated window: `T' = ceil((T - k) / s) + 1`,
    /// or a single window when `k > T`.
    pub fn max_pool1d_ceil(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.max_pool1d_impl(x, kernel, stride, true)
    }

    fn max_pool1d_impl(&mut self, x: Var, kernel: usize, stride: usize, ceil: bool) -> Result<Var> {
        let tx = self.value(x);
        check_rank(tx, 3, "max_pool1d", "input")?;
        let (b, c, t) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if kernel == 0 || stride == 0 {
            return Err(Error::Parameter("max_pool1d kernel and stride must be at least 1".into()));
        }
        let out_len = if kernel > t {
            if !ceil {
                return Err(Error::WindowExceedsSequence { kernel, len: t });
            }
            1
        } else if ceil {
            (t - kernel).div_ceil(stride) + 1
        } else {
            (t - kernel) / stride + 1
        };
        let mut data = Vec::with_capacity(b * c * out_len);
        let mut argmax = Vec::with_capacity(b * c * out_len);
        for (r, row) in tx.data().chunks(t).enumerate() {
            for o in 0..out_len {
                let start = o * stride;
                let end = (start + kernel).min(t);
                let mut best = start;
                for i in start + 1..end {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                data.push(row[best]);
                argmax.push(r * t + best);
            }
        }
        Ok(self.push(Tensor::new(&[b, c, out_len], data)?, Op::MaxPool { x, argmax }))
    }

    /// Piecewise-linear resampling of the last axis with endpoints aligned.
    pub fn linear_interpolate(&mut self, x: Var, target_len: usize) -> Result<Var> {
        let tx = self.value(x);
        check_rank(tx, 3, "linear_interpolate", "input")?;
        if target_len == 0 {
            return Err(Error::Parameter("interpolation target length must be at least 1".into()));
        }
        let (b, c, l) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let mut data = Vec::with_capacity(b * c * target_len);
        for row in tx.data().chunks(l) {
            for i in 0..target_len {
                let (i0, frac) = interp_coord::<T>(i, l, target_len);
                let v = if frac == T::zero() { row[i0] } else { row[i0] + (row[i0 + 1] - row[i0]) * frac };
                data.push(v);
            }
        }
        let value = Tensor::new(&[b, c, target_len], data)?;
        Ok(self.push(value, Op::Interp { x, src_len: l, dst_len: target_len }))
    }

    /// Normalization over the last axis followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.dim(-1);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!("affine shapes {:?}/{:?} do not match feature size {d}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let inv_d = T::one() / T::usize(d);
        let mut out = Vec::with_capacity(tx.numel());
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(tx.numel() / d);
        for row in tx.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + bt[j]);
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Softmax over the last axis. Entries equal to `-inf` receive zero weight.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = tx.dim(-1);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let start = out.len();
            let mut s = T::zero();
            for &v in row {
                let e = (v - m).exp();
                s += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= s);
        }
        let value = Tensor::new(tx.shape(), out).expect("same shape");
        self.push(value, Op::Softmax(x))
    }

    /// Sum of sigmoid focal losses between `logits` and same-shape `targets` in `[0, 1]`.
    pub fn sigmoid_focal_loss(&mut self, logits: Var, targets: &Tensor<T>, alpha: T, gamma: T) -> Result<Var> {
        let tz = self.value(logits);
        if tz.shape() != targets.shape() {
            return Err(Error::dim(
                "focal_loss",
                format!("logits {:?} vs targets {:?}", tz.shape(), targets.shape()),
            ));
        }
        let total = tz
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| focal_term(z, y, alpha, gamma).0)
            .sum();
        let op = Op::FocalLoss { logits, targets: targets.data().to_vec(), alpha, gamma };
        Ok(self.push(Tensor::scalar(total), op))
    }

    /// Weighted sum of `1 - tIoU` between predicted and target (onset, offset)
    /// distances laid out as `[B, 2, T]`, with `weight: [B, T]`.
    /// Positions with zero weight are skipped entirely.
    pub fn iou_loss_1d(&mut self, pred: Var, target: &Tensor<T>, weight: &Tensor<T>) -> Result<Var> {
        let tp = self.value(pred);
        check_rank(tp, 3, "iou_loss", "prediction")?;
        let (b, two, t) = (tp.shape()[0], tp.shape()[1], tp.shape()[2]);
        if two != 2 || target.shape() != tp.shape() || weight.shape() != [b, t] {
            return Err(Error::dim(
                "iou_loss",
                format!("pred {:?}, target {:?}, weight {:?}", tp.shape(), target.shape(), weight.shape()),
            ));
        }
        let (p, q, w) = (tp.data(), target.data(), weight.data());
        let mut total = T::zero();
        for bi in 0..b {
            for ti in 0..t {
                let wv = w[bi * t + ti];
                if wv == T::zero() {
                    continue;
                }
                let (l, r) = (bi * 2 * t + ti, bi * 2 * t + t + ti);
                total += wv * (T::one() - iou_1d(p[l], p[r], q[l], q[r]).0);
            }
        }
        let op = Op::IouLoss { pred, target: target.data().to_vec(), weight: weight.data().to_vec() };
        Ok(self.push(Tensor::scalar(total), op))
    }
}

/// Source coordinate for output sample `i`: `(floor index, fractional part)`.
fn interp_coord<T: Scalar>(i: usize, src: usize, dst: usize) -> (usize, T) {
    if src == 1 || dst == 1 {
        return (0, T::zero());
    }
    let num = i * (src - 1);
    let den = dst - 1;
    let i0 = num / den;
    let rem = num % den;
    if rem == 0 {
        (i0, T::zero())
    } else {
        (i0, T::usize(rem) / T::usize(den))
    }
}

/// Focal loss of one logit and its derivative with respect to the logit.
pub(crate) fn focal_term<T: Scalar>(z: T, y: T, alpha: T, gamma: T) -> (T, T) {
    let one = T::one();
    let p = scalar::sigmoid(z);
    // binary cross-entropy in logit form
    let ce = scalar::softplus(z) - y * z;
    let p_t = p * y + (one - p) * (one - y);
    let alpha_t = alpha * y + (one - alpha) * (one - y);
    let q = one - p_t;
    let m = q.powf(gamma);
    let dpt = (y + y - one) * p * (one - p);
    let dm = if gamma == T::zero() || q == T::zero() { T::zero() } else { -gamma * q.powf(gamma - one) * dpt };
    (alpha_t * m * ce, alpha_t * (dm * ce + m * (p - y)))
}

/// tIoU of two (left, right) distance pairs around a shared anchor, plus the
/// partials of the IoU with respect to the first pair.
pub(crate) fn iou_1d<T: Scalar>(lp: T, rp: T, lt: T, rt: T) -> (T, T, T) {
    let dl = if lp < lt { T::one() } else { T::zero() };
    let dr = if rp < rt { T::one() } else { T::zero() };
    let inter = lp.min(lt) + rp.min(rt);
    let union = lp + rp + lt + rt - inter;
    let iou = inter / union;
    let u2 = union * union;
    let d_l = (dl * union - inter * (T::one() - dl)) / u2;
    let d_r = (dr * union - inter * (T::one() - dr)) / u2;
    (iou, d_l, d_r)
}

fn grad_buf<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Tensor<T>>],
    v: Var,
) -> Option<&'g mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[v.0].value.shape()));
    }
    slot.as_mut().map(|t| t.data_mut())
}

/// Pushes the adjoint `g` of node `i` into the adjoints of its inputs.
pub(crate) fn backprop<T: Scalar>(nodes: &[Node<T>], i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let node = &nodes[i];
    let gd = g.data();
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(op, a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let out = node.value.shape();
            if ta.shape() == tb.shape() {
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    for j in 0..gd.len() {
                        ga[j] += gd[j] * binary_partials(*op, ta.data()[j], tb.data()[j]).0;
                    }
                }
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    for j in 0..gd.len() {
                        gb[j] += gd[j] * binary_partials(*op, ta.data()[j], tb.data()[j]).1;
                    }
                }
            } else {
                let sa = broadcast_strides(ta.shape(), out);
                let sb = broadcast_strides(tb.shape(), out);
                let (da, db) = (ta.data(), tb.data());
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    broadcast_walk(out, &sa, &sb, |j, ia, ib| ga[ia] += gd[j] * binary_partials(*op, da[ia], db[ib]).0);
                }
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    broadcast_walk(out, &sa, &sb, |j, ia, ib| gb[ib] += gd[j] * binary_partials(*op, da[ia], db[ib]).1);
                }
            }
        }
        Op::Unary(u, x) => {
            let tx = val(*x);
            let y = node.value.data();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for j in 0..gd.len() {
                    gx[j] += gd[j] * unary_deriv(*u, tx.data()[j], y[j]);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().zip(gd).for_each(|(a, &d)| *a += d * *c);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().zip(gd).for_each(|(a, &d)| *a += d);
            }
        }
        Op::Swish { x, beta } => {
            let b = val(*beta).item();
            let xs = val(*x).data();
            let mut dbeta = T::zero();
            let want_x = nodes[x.0].requires_grad;
            if let Some(gx) = grad_buf(nodes, grads, *x).filter(|_| want_x) {
                for j in 0..gd.len() {
                    let s = scalar::sigmoid(b * xs[j]);
                    gx[j] += gd[j] * (s + b * xs[j] * s * (T::one() - s));
                }
            }
            if nodes[beta.0].requires_grad {
                for j in 0..gd.len() {
                    let s = scalar::sigmoid(b * xs[j]);
                    dbeta += gd[j] * xs[j] * xs[j] * s * (T::one() - s);
                }
                if let Some(gb) = grad_buf(nodes, grads, *beta) {
                    gb[0] += dbeta;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let d = gd[0];
                gx.iter_mut().for_each(|a| *a += d);
            }
        }
        Op::Permute(x, axes) => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let mut inverse = vec![0; axes.len()];
                for (k, &a) in axes.iter().enumerate() {
                    inverse[a] = k;
                }
                let back = g.permute(&inverse).expect("valid inverse permutation");
                gx.iter_mut().zip(back.data()).for_each(|(a, &d)| *a += d);
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.dim(-2), ta.dim(-1), tb.dim(-1));
            let batch = ta.numel() / (m * k);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for bi in 0..batch {
                    kernels::gemm(
                        &gd[bi * m * n..(bi + 1) * m * n],
                        false,
                        &tb.data()[bi * k * n..(bi + 1) * k * n],
                        true,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for bi in 0..batch {
                    kernels::gemm(
                        &ta.data()[bi * m * k..(bi + 1) * m * k],
                        true,
                        &gd[bi * m * n..(bi + 1) * m * n],
                        false,
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (tx, tw) = (val(*x), val(*w));
            let (dout, din) = (tw.shape()[0], tw.shape()[1]);
            let rows = tx.numel() / din;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                kernels::gemm(gd, false, tw.data(), false, gx, rows, dout, din);
            }
            if let Some(gw) = grad_buf(nodes, grads, *w) {
                kernels::gemm(gd, true, tx.data(), false, gw, dout, rows, din);
            }
            if let Some(b) = b {
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    for row in gd.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, &d)| *a += d);
                    }
                }
            }
        }
        Op::Conv1d { x, w, b, geom } => {
            let (tx, tw) = (val(*x), val(*w));
            // Buffers are taken out of `grads` so that several can be borrowed mutably.
            let mut take = |v: Var| -> Option<Tensor<T>> {
                if nodes[v.0].requires_grad {
                    Some(grads[v.0].take().unwrap_or_else(|| Tensor::zeros(nodes[v.0].value.shape())))
                } else {
                    None
                }
            };
            let mut gx = take(*x);
            let mut gw = take(*w);
            let mut gb = b.and_then(&mut take);
            kernels::conv1d_backward(
                geom,
                tx.data(),
                tw.data(),
                gd,
                gx.as_mut().map(|t| t.data_mut()),
                gw.as_mut().map(|t| t.data_mut()),
                gb.as_mut().map(|t| t.data_mut()),
            );
            if let Some(t) = gx {
                grads[x.0] = Some(t);
            }
            if let Some(t) = gw {
                grads[w.0] = Some(t);
            }
            if let (Some(b), Some(t)) = (b, gb) {
                grads[b.0] = Some(t);
            }
        }
        Op::AvgPoolToOne(x) => {
            let t = val(*x).dim(-1);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let inv = T::one() / T::usize(t);
                for (row, &d) in gx.chunks_mut(t).zip(gd) {
                    row.iter_mut().for_each(|a| *a += d * inv);
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (&src, &d) in argmax.iter().zip(gd) {
                    gx[src] += d;
                }
            }
        }
        Op::Interp { x, src_len, dst_len } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (row, grow) in gx.chunks_mut(*src_len).zip(gd.chunks(*dst_len)) {
                    for (i, &d) in grow.iter().enumerate() {
                        let (i0, frac) = interp_coord::<T>(i, *src_len, *dst_len);
                        if frac == T::zero() {
                            row[i0] += d;
                        } else {
                            row[i0] += d * (T::one() - frac);
                            row[i0 + 1] += d * frac;
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = val(*gamma).numel();
            let gm = val(*gamma).data();
            if let Some(gg) = grad_buf(nodes, grads, *gamma) {
                for (hrow, grow) in xhat.chunks(d).zip(gd.chunks(d)) {
                    for j in 0..d {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *beta) {
                for grow in gd.chunks(d) {
                    gb.iter_mut().zip(grow).for_each(|(a, &v)| *a += v);
                }
            }
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let inv_d = T::one() / T::usize(d);
                for (r, ((xrow, hrow), grow)) in gx.chunks_mut(d).zip(xhat.chunks(d)).zip(gd.chunks(d)).enumerate() {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let dh = grow[j] * gm[j];
                        m1 += dh;
                        m2 += dh * hrow[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        let dh = grow[j] * gm[j];
                        xrow[j] += rstd[r] * (dh - m1 - hrow[j] * m2);
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let d = node.value.dim(-1);
            let y = node.value.data();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((xrow, yrow), grow) in gx.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)) {
                    let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        xrow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::FocalLoss { logits, targets, alpha, gamma } => {
            let z = val(*logits).data();
            if let Some(gz) = grad_buf(nodes, grads, *logits) {
                let d = gd[0];
                for j in 0..z.len() {
                    gz[j] += d * focal_term(z[j], targets[j], *alpha, *gamma).1;
                }
            }
        }
        Op::IouLoss { pred, target, weight } => {
            let tp = val(*pred);
            let (b, t) = (tp.shape()[0], tp.shape()[2]);
            let p = tp.data();
            if let Some(gp) = grad_buf(nodes, grads, *pred) {
                let d = gd[0];
                for bi in 0..b {
                    for ti in 0..t {
                        let wv = weight[bi * t + ti];
                        if wv == T::zero() {
                            continue;
                        }
                        let (l, r) = (bi * 2 * t + ti, bi * 2 * t + t + ti);
                        let (_, dl, dr) = iou_1d(p[l], p[r], target[l], target[r]);
                        gp[l] -= d * wv * dl;
                        gp[r] -= d * wv * dr;
                    }
                }
            }
        }
    }
}
