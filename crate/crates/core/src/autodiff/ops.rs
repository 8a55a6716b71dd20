//! Differentiable operators. Every operator records one tape node.
//!
//! Broadcasting: operands are right-aligned and size-1 axes stretch, with one
//! extra rule for feature maps: a rank-1 operand of length `C` combined with
//! a rank-4 `(B, C, H, W)` operand is read as a per-channel vector
//! `(1, C, 1, 1)`.

use std::rc::Rc;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    Silu,
    Softplus,
    Relu,
    LeakyRelu(f64),
    Exp,
    Neg,
    Abs,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Exp => x.exp(),
            Unary::Neg => -x,
            Unary::Abs => x.abs(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Softplus => sigmoid(x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Exp => x.exp(),
            Unary::Neg => -1.0,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    #[inline]
    fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    #[inline]
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b, a),
            Binary::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

/// Broadcast result shape plus both operand shapes padded to its rank.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if a == b {
        return Some((a.to_vec(), a.to_vec(), b.to_vec()));
    }
    let channel_vec = |v: &[usize]| vec![1, v[0], 1, 1];
    let (a, b) = match (a.len(), b.len()) {
        (1, 4) if a[0] == b[1] => (channel_vec(a), b.to_vec()),
        (4, 1) if b[0] == a[1] => (a.to_vec(), channel_vec(b)),
        _ => (a.to_vec(), b.to_vec()),
    };
    let rank = a.len().max(b.len());
    let pad = |v: &[usize]| {
        let mut p = vec![1; rank - v.len()];
        p.extend_from_slice(v);
        p
    };
    let (pa, pb) = (pad(&a), pad(&b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        out.push(match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => return None,
        });
    }
    Some((out, pa, pb))
}

/// For each flat output index, the flat index into a broadcast operand.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { s };
        s *= src[d];
    }
    let n = numel(out);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        idx.push(cur);
        for d in (0..rank).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out[d] {
                break;
            }
            cur -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

fn out_dims(h: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = h + 2 * padding;
    if padded < span {
        None
    } else {
        Some((padded - span) / stride + 1)
    }
}

/// Convolution hyper-parameters. Cross-correlation convention, zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvOpts {
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpMode {
    Nearest,
    Bilinear,
}

/// Source taps for one output coordinate along one axis.
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn interp_taps(input: usize, output: usize, mode: InterpMode) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| match mode {
            InterpMode::Nearest => {
                let i = ((o as f64 * scale).floor() as usize).min(input - 1);
                Tap { i0: i, i1: i, w1: 0.0 }
            }
            InterpMode::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
                Tap { i0, i1, w1 }
            }
        })
        .collect()
}

/// Zero-padding column window: output columns `lo..hi` read input column
/// `ow * stride + offset`.
fn col_window(w: usize, ow_n: usize, stride: usize, offset: isize) -> (usize, usize) {
    let mut lo = 0;
    while lo < ow_n && (lo as isize * stride as isize + offset) < 0 {
        lo += 1;
    }
    let mut hi = lo;
    while hi < ow_n && ((hi as isize * stride as isize + offset) as usize) < w {
        hi += 1;
    }
    (lo, hi)
}

impl<'t> Var<'t> {
    pub fn unary(self, kind: Unary) -> Var<'t> {
        let x = self.value();
        let out: Vec<f64> = x.data().iter().map(|&v| kind.eval(v)).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.tape().push(value, &[self], move |g| {
            let gx = g
                .iter()
                .zip(x.data())
                .map(|(&gi, &xi)| gi * kind.derivative(xi))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }
    pub fn silu(self) -> Var<'t> {
        self.unary(Unary::Silu)
    }
    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }
    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(Unary::LeakyRelu(slope))
    }
    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }
    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }
    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    /// Elementwise op with a caller-supplied derivative. Used for test
    /// fixtures and one-off nonlinearities.
    pub fn map_custom(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let value = x.map(f);
        self.tape().push(value, &[self], move |g| {
            vec![Some(
                g.iter().zip(x.data()).map(|(&gi, &xi)| gi * df(xi)).collect(),
            )]
        })
    }

    /// `alpha * x + beta`.
    pub fn affine(self, alpha: f64, beta: f64) -> Var<'t> {
        let x = self.value();
        let value = x.map(|v| alpha * v + beta);
        self.tape().push(value, &[self], move |g| {
            vec![Some(g.iter().map(|&gi| alpha * gi).collect())]
        })
    }

    pub fn scale(self, alpha: f64) -> Var<'t> {
        self.affine(alpha, 0.0)
    }

    pub fn add_scalar(self, beta: f64) -> Var<'t> {
        self.affine(1.0, beta)
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t> {
        self.affine(-1.0, 1.0)
    }

    pub fn binary(self, kind: Binary, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.shape() == b.shape() {
            let out = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| kind.eval(x, y))
                .collect();
            let value = Tensor::from_parts(a.shape().to_vec(), out);
            return Ok(self.tape().push(value, &[self, other], move |g| {
                let n = g.len();
                let (mut ga, mut gb) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for i in 0..n {
                    let (da, db) = kind.partials(a.data()[i], b.data()[i]);
                    ga.push(g[i] * da);
                    gb.push(g[i] * db);
                }
                vec![Some(ga), Some(gb)]
            }));
        }
        let (out_shape, pa, pb) = broadcast_shapes(a.shape(), b.shape())
            .ok_or_else(|| Error::shape("binary broadcast", a.shape(), b.shape()))?;
        let ia = Rc::new(broadcast_index(&pa, &out_shape));
        let ib = Rc::new(broadcast_index(&pb, &out_shape));
        let out = ia
            .iter()
            .zip(ib.iter())
            .map(|(&i, &j)| kind.eval(a.data()[i], b.data()[j]))
            .collect();
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.tape().push(value, &[self, other], move |g| {
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            for (t, &gt) in g.iter().enumerate() {
                let (i, j) = (ia[t], ib[t]);
                let (da, db) = kind.partials(a.data()[i], b.data()[j]);
                ga[i] += gt * da;
                gb[j] += gt * db;
            }
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Add, other)
    }
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Sub, other)
    }
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Mul, other)
    }
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Div, other)
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let n = x.numel();
        self.tape()
            .push(Tensor::scalar(x.sum()), &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if numel(shape) != x.numel() {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        let value = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        Ok(self
            .tape()
            .push(value, &[self], move |g| vec![Some(g.to_vec())]))
    }

    /// Channel slice `[start, start + len)` of a rank-4 var.
    pub fn narrow_channels(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        let value = x.narrow_channels(start, len)?;
        let plane = h * w;
        Ok(self.tape().push(value, &[self], move |g| {
            let mut gx = vec![0.0; b * c * plane];
            for bi in 0..b {
                let dst = (bi * c + start) * plane;
                let src = bi * len * plane;
                gx[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
            }
            vec![Some(gx)]
        }))
    }

    /// Global average pool `(B, C, H, W) -> (B, C, 1, 1)`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        let plane = h * w;
        let out = x
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::from_parts(vec![b, c, 1, 1], out);
        Ok(self.tape().push(value, &[self], move |g| {
            let mut gx = Vec::with_capacity(b * c * plane);
            for &gi in g {
                gx.extend(std::iter::repeat(gi / plane as f64).take(plane));
            }
            vec![Some(gx)]
        }))
    }

    /// Permutation-style gather: `out[t] = x[index[t]]`.
    pub fn gather(self, out_shape: &[usize], index: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        if index.len() != numel(out_shape) || index.iter().any(|&i| i >= x.numel()) {
            return Err(Error::shape("gather", x.shape(), out_shape));
        }
        let out = index.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::from_parts(out_shape.to_vec(), out);
        let n = x.numel();
        Ok(self.tape().push(value, &[self], move |g| {
            let mut gx = vec![0.0; n];
            for (t, &i) in index.iter().enumerate() {
                gx[i] += g[t];
            }
            vec![Some(gx)]
        }))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        matmul(self, other)
    }
}

/// Channel concatenation of rank-4 vars with equal batch and spatial extents.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of no tensors".into()))?;
    let tape = first.tape();
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let (b, _, h, w) = values[0].dims4()?;
    let mut chans = Vec::with_capacity(parts.len());
    for v in &values {
        let (vb, vc, vh, vw) = v.dims4()?;
        if (vb, vh, vw) != (b, h, w) {
            return Err(Error::shape("concat_channels", values[0].shape(), v.shape()));
        }
        chans.push(vc);
    }
    let total: usize = chans.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(b * total * plane);
    for bi in 0..b {
        for (v, &c) in values.iter().zip(&chans) {
            let base = bi * c * plane;
            out.extend_from_slice(&v.data()[base..base + c * plane]);
        }
    }
    let value = Tensor::from_parts(vec![b, total, h, w], out);
    Ok(tape.push(value, parts, move |g| {
        let mut grads: Vec<Vec<f64>> = chans.iter().map(|&c| Vec::with_capacity(b * c * plane)).collect();
        let mut off = 0;
        for _ in 0..b {
            for (k, &c) in chans.iter().enumerate() {
                grads[k].extend_from_slice(&g[off..off + c * plane]);
                off += c * plane;
            }
        }
        grads.into_iter().map(Some).collect()
    }))
}

/// Rank-2 matrix product.
pub fn matmul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let av = a.value();
    let bv = b.value();
    let (m, k, n) = match (av.shape(), bv.shape()) {
        ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
        _ => return Err(Error::shape("matmul", av.shape(), bv.shape())),
    };
    let out = matmul_raw(av.data(), bv.data(), m, k, n);
    let value = Tensor::from_parts(vec![m, n], out);
    Ok(a.tape().push(value, &[a, b], move |g| {
        // dA = G B^T, dB = A^T G
        let mut ga = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                let mut s = 0.0;
                for j in 0..n {
                    s += g[i * n + j] * bv.data()[p * n + j];
                }
                ga[i * k + p] = s;
            }
        }
        let mut gb = vec![0.0; k * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av.data()[i * k + p];
                let row = &mut gb[p * n..(p + 1) * n];
                for (r, &gij) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                    *r += aip * gij;
                }
            }
        }
        vec![Some(ga), Some(gb)]
    }))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, &bpj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
    out
}

/// 2-D cross-correlation. `weight` is `(out, in / groups, kh, kw)`.
pub fn conv2d<'t>(
    x: Var<'t>,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
    opts: ConvOpts,
) -> Result<Var<'t>> {
    let xv = x.value();
    let wv = weight.value();
    let (b, cin, h, w) = xv.dims4()?;
    let (cout, cin_g, kh, kw) = wv.dims4()?;
    let groups = opts.groups;
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::InvalidGroups(format!(
            "in {cin}, out {cout}, groups {groups}"
        )));
    }
    if cin / groups != cin_g {
        return Err(Error::shape("conv2d weight", xv.shape(), wv.shape()));
    }
    if opts.stride == 0 || opts.dilation == 0 {
        return Err(Error::InvalidArgument("stride and dilation must be positive".into()));
    }
    let oh = out_dims(h, kh, opts.stride, opts.padding, opts.dilation)
        .ok_or_else(|| Error::shape("conv2d kernel exceeds input", xv.shape(), wv.shape()))?;
    let ow = out_dims(w, kw, opts.stride, opts.padding, opts.dilation)
        .ok_or_else(|| Error::shape("conv2d kernel exceeds input", xv.shape(), wv.shape()))?;
    let bv = match bias {
        Some(bvar) => {
            let t = bvar.value();
            if t.numel() != cout {
                return Err(Error::shape("conv2d bias", t.shape(), &[cout]));
            }
            Some(t)
        }
        None => None,
    };
    let geom = ConvGeom {
        b,
        cin,
        h,
        w,
        cout,
        cin_g,
        kh,
        kw,
        oh,
        ow,
        opts,
    };
    let mut out = vec![0.0; b * cout * oh * ow];
    geom.forward(xv.data(), wv.data(), bv.as_ref().map(|t| t.data()), &mut out);
    let value = Tensor::from_parts(vec![b, cout, oh, ow], out);
    let mut parents = vec![x, weight];
    if let Some(bvar) = bias {
        parents.push(bvar);
    }
    let has_bias = bias.is_some();
    Ok(x.tape().push(value, &parents, move |g| {
        let mut gx = vec![0.0; xv.numel()];
        let mut gw = vec![0.0; wv.numel()];
        geom.backward(xv.data(), wv.data(), g, &mut gx, &mut gw);
        let mut grads = vec![Some(gx), Some(gw)];
        if has_bias {
            let plane = geom.oh * geom.ow;
            let mut gb = vec![0.0; geom.cout];
            for bi in 0..geom.b {
                for (oc, gbo) in gb.iter_mut().enumerate() {
                    let base = (bi * geom.cout + oc) * plane;
                    *gbo += g[base..base + plane].iter().sum::<f64>();
                }
            }
            grads.push(Some(gb));
        }
        grads
    }))
}

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    opts: ConvOpts,
}

impl ConvGeom {
    fn row_of(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.opts.stride + ky * self.opts.dilation) as isize - self.opts.padding as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    fn col_offset(&self, kx: usize) -> isize {
        (kx * self.opts.dilation) as isize - self.opts.padding as isize
    }

    fn forward(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
        let cout_g = self.cout / self.opts.groups;
        let (plane_in, plane_out) = (self.h * self.w, self.oh * self.ow);
        let s = self.opts.stride;
        let windows: Vec<(usize, usize, isize)> = (0..self.kw)
            .map(|kx| {
                let off = self.col_offset(kx);
                let (lo, hi) = col_window(self.w, self.ow, s, off);
                (lo, hi, off)
            })
            .collect();
        for bi in 0..self.b {
            for oc in 0..self.cout {
                let g = oc / cout_g;
                let obase = (bi * self.cout + oc) * plane_out;
                let oplane = &mut out[obase..obase + plane_out];
                if let Some(bias) = bias {
                    oplane.iter_mut().for_each(|v| *v = bias[oc]);
                }
                for icl in 0..self.cin_g {
                    let ic = g * self.cin_g + icl;
                    let xplane = &x[(bi * self.cin + ic) * plane_in..][..plane_in];
                    for ky in 0..self.kh {
                        for (kx, &(lo, hi, off)) in windows.iter().enumerate() {
                            let wv = w[((oc * self.cin_g + icl) * self.kh + ky) * self.kw + kx];
                            for oy in 0..self.oh {
                                let Some(iy) = self.row_of(oy, ky) else { continue };
                                let xrow = &xplane[iy * self.w..(iy + 1) * self.w];
                                let orow = &mut oplane[oy * self.ow..(oy + 1) * self.ow];
                                if s == 1 {
                                    let start = (lo as isize + off) as usize;
                                    for (o, &xv) in orow[lo..hi].iter_mut().zip(&xrow[start..start + (hi - lo)]) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for ox in lo..hi {
                                        orow[ox] += wv * xrow[(ox as isize * s as isize + off) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward(&self, x: &[f64], w: &[f64], g: &[f64], gx: &mut [f64], gw: &mut [f64]) {
        let cout_g = self.cout / self.opts.groups;
        let (plane_in, plane_out) = (self.h * self.w, self.oh * self.ow);
        let s = self.opts.stride;
        let windows: Vec<(usize, usize, isize)> = (0..self.kw)
            .map(|kx| {
                let off = self.col_offset(kx);
                let (lo, hi) = col_window(self.w, self.ow, s, off);
                (lo, hi, off)
            })
            .collect();
        for bi in 0..self.b {
            for oc in 0..self.cout {
                let grp = oc / cout_g;
                let gplane = &g[(bi * self.cout + oc) * plane_out..][..plane_out];
                for icl in 0..self.cin_g {
                    let ic = grp * self.cin_g + icl;
                    let xoff = (bi * self.cin + ic) * plane_in;
                    for ky in 0..self.kh {
                        for (kx, &(lo, hi, off)) in windows.iter().enumerate() {
                            let widx = ((oc * self.cin_g + icl) * self.kh + ky) * self.kw + kx;
                            let wv = w[widx];
                            let mut acc = 0.0;
                            for oy in 0..self.oh {
                                let Some(iy) = self.row_of(oy, ky) else { continue };
                                let grow = &gplane[oy * self.ow..(oy + 1) * self.ow];
                                let rbase = xoff + iy * self.w;
                                if s == 1 {
                                    let start = rbase + (lo as isize + off) as usize;
                                    let xr = &x[start..start + (hi - lo)];
                                    let gxr = &mut gx[start..start + (hi - lo)];
                                    for ((gxv, &xv), &gv) in gxr.iter_mut().zip(xr).zip(&grow[lo..hi]) {
                                        acc += gv * xv;
                                        *gxv += wv * gv;
                                    }
                                } else {
                                    for ox in lo..hi {
                                        let ix = rbase + (ox as isize * s as isize + off) as usize;
                                        acc += grow[ox] * x[ix];
                                        gx[ix] += wv * grow[ox];
                                    }
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Edge-replicating spatial padding of a rank-4 var.
pub fn pad_replicate<'t>(x: Var<'t>, pad: usize) -> Result<Var<'t>> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut index = Vec::with_capacity(b * c * ph * pw);
    for plane in 0..b * c {
        for y in 0..ph {
            let sy = clamp(y as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = clamp(xx as isize - pad as isize, w);
                index.push(plane * h * w + sy * w + sx);
            }
        }
    }
    x.gather(&[b, c, ph, pw], Rc::new(index))
}

/// Normalizes over axis 1 (the channel axis of a feature map, the feature
/// axis of a `(rows, features)` matrix, or the whole of a vector).
pub fn layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    let (outer, c, inner) = match shape.len() {
        0 => return Err(Error::InvalidArgument("layer_norm of a scalar".into())),
        1 => (1, shape[0], 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    };
    let gv = gamma.value();
    let bv = beta.value();
    if gv.numel() != c || bv.numel() != c {
        return Err(Error::shape("layer_norm affine", &shape, gv.shape()));
    }
    let n = xv.numel();
    let mut xhat = vec![0.0; n];
    let mut inv_std = vec![0.0; outer * inner];
    let mut out = vec![0.0; n];
    let xd = xv.data();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |ch: usize| (o * c + ch) * inner + i;
            let mean = (0..c).map(|ch| xd[idx(ch)]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (xd[idx(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[o * inner + i] = is;
            for ch in 0..c {
                let k = idx(ch);
                xhat[k] = (xd[k] - mean) * is;
                out[k] = xhat[k] * gv.data()[ch] + bv.data()[ch];
            }
        }
    }
    let value = Tensor::from_parts(shape, out);
    Ok(x.tape().push(value, &[x, gamma, beta], move |g| {
        let mut gx = vec![0.0; n];
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |ch: usize| (o * c + ch) * inner + i;
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for ch in 0..c {
                    let k = idx(ch);
                    let dxhat = g[k] * gv.data()[ch];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat[k];
                    gg[ch] += g[k] * xhat[k];
                    gb[ch] += g[k];
                }
                mean_dxhat /= c as f64;
                mean_dxhat_xhat /= c as f64;
                let is = inv_std[o * inner + i];
                for ch in 0..c {
                    let k = idx(ch);
                    let dxhat = g[k] * gv.data()[ch];
                    gx[k] = is * (dxhat - mean_dxhat - xhat[k] * mean_dxhat_xhat);
                }
            }
        }
        vec![Some(gx), Some(gg), Some(gb)]
    }))
}

/// Batch statistics of a feature map: per-channel mean and biased variance.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Training-mode batch normalization over `(B, H, W)` per channel.
pub fn batch_norm_train<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    eps: f64,
) -> Result<(Var<'t>, BatchStats)> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    let gv = gamma.value();
    let bv = beta.value();
    if gv.numel() != c || bv.numel() != c {
        return Err(Error::shape("batch_norm affine", xv.shape(), gv.shape()));
    }
    let plane = h * w;
    let count = b * plane;
    let xd = xv.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += xd[(bi * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for bi in 0..b {
            v += xd[(bi * c + ch) * plane..][..plane]
                .iter()
                .map(|&t| (t - m).powi(2))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xv.numel()];
    let mut out = vec![0.0; xv.numel()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            for k in base..base + plane {
                xhat[k] = (xd[k] - mean[ch]) * inv_std[ch];
                out[k] = xhat[k] * gv.data()[ch] + bv.data()[ch];
            }
        }
    }
    let value = Tensor::from_parts(xv.shape().to_vec(), out);
    let stats = BatchStats {
        mean,
        var,
        count,
    };
    let var_node = x.tape().push(value, &[x, gamma, beta], move |g| {
        let mut gx = vec![0.0; xhat.len()];
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        for ch in 0..c {
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * plane;
                for k in base..base + plane {
                    let dxhat = g[k] * gv.data()[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat[k];
                    gg[ch] += g[k] * xhat[k];
                    gb[ch] += g[k];
                }
            }
            let (m1, m2) = (sum_dxhat / count as f64, sum_dxhat_xhat / count as f64);
            for bi in 0..b {
                let base = (bi * c + ch) * plane;
                for k in base..base + plane {
                    let dxhat = g[k] * gv.data()[ch];
                    gx[k] = inv_std[ch] * (dxhat - m1 - xhat[k] * m2);
                }
            }
        }
        vec![Some(gx), Some(gg), Some(gb)]
    });
    Ok((var_node, stats))
}

/// Inference-mode batch normalization with fixed running statistics.
pub fn batch_norm_eval<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Var<'t>> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    let gv = gamma.value();
    let bv = beta.value();
    if gv.numel() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape("batch_norm affine", xv.shape(), gv.shape()));
    }
    let plane = h * w;
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mean = running_mean.to_vec();
    let mut out = vec![0.0; xv.numel()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            for k in base..base + plane {
                out[k] = (xv.data()[k] - mean[ch]) * inv_std[ch] * gv.data()[ch] + bv.data()[ch];
            }
        }
    }
    let value = Tensor::from_parts(xv.shape().to_vec(), out);
    Ok(x.tape().push(value, &[x, gamma, beta], move |g| {
        let mut gx = vec![0.0; xv.numel()];
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for k in base..base + plane {
                    let xhat = (xv.data()[k] - mean[ch]) * inv_std[ch];
                    gx[k] = g[k] * gv.data()[ch] * inv_std[ch];
                    gg[ch] += g[k] * xhat;
                    gb[ch] += g[k];
                }
            }
        }
        vec![Some(gx), Some(gg), Some(gb)]
    }))
}

/// Spatial resampling of a feature map. Bilinear uses half-pixel centers
/// (`align_corners = false`); nearest picks `floor(dst * in / out)`.
pub fn interpolate<'t>(x: Var<'t>, out_h: usize, out_w: usize, mode: InterpMode) -> Result<Var<'t>> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidDimensions(format!("interpolate to {out_h}x{out_w}")));
    }
    let ty = interp_taps(h, out_h, mode);
    let tx = interp_taps(w, out_w, mode);
    let out = interp_forward(xv.data(), b * c, h, w, &ty, &tx);
    let value = Tensor::from_parts(vec![b, c, out_h, out_w], out);
    Ok(x.tape().push(value, &[x], move |g| {
        let mut gx = vec![0.0; b * c * h * w];
        let oplane = out_h * out_w;
        for p in 0..b * c {
            let src = &mut gx[p * h * w..(p + 1) * h * w];
            let gp = &g[p * oplane..(p + 1) * oplane];
            for (oy, ay) in ty.iter().enumerate() {
                for (ox, ax) in tx.iter().enumerate() {
                    let gv = gp[oy * out_w + ox];
                    let (wy0, wx0) = (1.0 - ay.w1, 1.0 - ax.w1);
                    src[ay.i0 * w + ax.i0] += gv * wy0 * wx0;
                    src[ay.i0 * w + ax.i1] += gv * wy0 * ax.w1;
                    src[ay.i1 * w + ax.i0] += gv * ay.w1 * wx0;
                    src[ay.i1 * w + ax.i1] += gv * ay.w1 * ax.w1;
                }
            }
        }
        vec![Some(gx)]
    }))
}

fn interp_forward(x: &[f64], planes: usize, h: usize, w: usize, ty: &[Tap], tx: &[Tap]) -> Vec<f64> {
    let (oh, ow) = (ty.len(), tx.len());
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for ay in ty {
            for ax in tx {
                let (wy0, wx0) = (1.0 - ay.w1, 1.0 - ax.w1);
                let v = src[ay.i0 * w + ax.i0] * wy0 * wx0
                    + src[ay.i0 * w + ax.i1] * wy0 * ax.w1
                    + src[ay.i1 * w + ax.i0] * ay.w1 * wx0
                    + src[ay.i1 * w + ax.i1] * ay.w1 * ax.w1;
                out.push(v);
            }
        }
    }
    out
}

/// Non-differentiable resampling for data preparation.
pub fn resize_tensor(x: &Tensor, out_h: usize, out_w: usize, mode: InterpMode) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidDimensions(format!("resize to {out_h}x{out_w}")));
    }
    let ty = interp_taps(h, out_h, mode);
    let tx = interp_taps(w, out_w, mode);
    Ok(Tensor::from_parts(
        vec![b, c, out_h, out_w],
        interp_forward(x.data(), b * c, h, w, &ty, &tx),
    ))
}

/// Convenience for building constants on a tape.
pub fn constant_like<'t>(tape: &'t Tape, shape: &[usize], value: f64) -> Var<'t> {
    tape.constant(Tensor::full(shape, value))
}
