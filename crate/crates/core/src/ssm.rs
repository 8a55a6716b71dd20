//! Diagonal state space models: discretization, reference scans and the
//! fused differentiable selective scan.
//!
//! Layout used by the differentiable operator: the scanned stream and the
//! timescale are `(B, D, P)`, the per-step input/output matrices are
//! `(B, N, P)` and the state matrix is `(D, N)`. `P` counts positions; an
//! ordering over positions decides the traversal, which lets the 2-D
//! directional scans run without materializing permuted copies.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_raw, softplus, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this `|delta * a|` the zero-order-hold input gain uses its limit `delta`.
pub const ZOH_LIMIT: f64 = 1e-8;

/// How `B` is discretized. `A` always uses the exact exponential.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// First-order `B̄ = ΔB`.
    #[default]
    Taylor,
    /// Exact `B̄ = (ΔA)⁻¹(exp(ΔA) − I)ΔB`.
    Zoh,
}

/// Continuous diagonal system for one scalar channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// Diagonal of `A`, length `N`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

/// `(Ā, B̄ / B)` for one diagonal entry.
#[inline]
pub fn discretize_entry(delta: f64, a: f64, disc: Discretization) -> (f64, f64) {
    let x = delta * a;
    let a_bar = x.exp();
    let gain = match disc {
        Discretization::Taylor => delta,
        Discretization::Zoh if x.abs() < ZOH_LIMIT => delta,
        Discretization::Zoh => delta * x.exp_m1() / x,
    };
    (a_bar, gain)
}

/// Partial derivatives of the input gain with respect to `delta` and `a`.
#[inline]
fn gain_partials(delta: f64, a: f64, disc: Discretization) -> (f64, f64) {
    match disc {
        Discretization::Taylor => (1.0, 0.0),
        Discretization::Zoh => {
            let x = delta * a;
            if x.abs() < ZOH_LIMIT {
                return (1.0, 0.5 * delta * delta);
            }
            // d/da [(e^{δa} − 1)/a] = δ²·(x eˣ − (eˣ − 1))/x²
            let ratio = if x.abs() < 1e-3 {
                0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0
            } else {
                (x * x.exp() - x.exp_m1()) / (x * x)
            };
            (x.exp(), delta * delta * ratio)
        }
    }
}

fn discretize(p: &SsmParams, disc: Discretization) -> Result<DiscreteSsm> {
    if !(p.delta > 0.0) {
        return Err(Error::NonPositiveDelta(p.delta));
    }
    if p.a.len() != p.b.len() {
        return Err(Error::shape("discretize", &[p.a.len()], &[p.b.len()]));
    }
    let (a_bar, b_bar) = p
        .a
        .iter()
        .zip(&p.b)
        .map(|(&a, &b)| {
            let (ab, gain) = discretize_entry(p.delta, a, disc);
            (ab, gain * b)
        })
        .unzip();
    Ok(DiscreteSsm { a_bar, b_bar })
}

pub fn zoh_discretize(p: &SsmParams) -> Result<DiscreteSsm> {
    discretize(p, Discretization::Zoh)
}

pub fn taylor_discretize(p: &SsmParams) -> Result<DiscreteSsm> {
    discretize(p, Discretization::Taylor)
}

/// Time-invariant recurrence from a zero state.
pub fn ssm_scan(d: &DiscreteSsm, c: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let n = d.a_bar.len();
    if d.b_bar.len() != n || c.len() != n {
        return Err(Error::shape("ssm_scan", &[n], &[d.b_bar.len(), c.len()]));
    }
    let mut h = vec![0.0; n];
    Ok(x
        .iter()
        .map(|&xk| {
            let mut y = 0.0;
            for i in 0..n {
                h[i] = d.a_bar[i] * h[i] + d.b_bar[i] * xk;
                y += c[i] * h[i];
            }
            y
        })
        .collect())
}

/// Learned maps producing per-step `B`, `C` and `Δ` from a `(L, d)` sequence.
#[derive(Clone, Debug)]
pub struct SelectiveProjections {
    /// `(d, N)`
    pub w_b: Tensor,
    /// `(d, N)`
    pub w_c: Tensor,
    /// `(d, r)`, the rank-reduced first half of the timescale map.
    pub w_dt_down: Tensor,
    /// `(r, d)`
    pub w_dt_up: Tensor,
    /// `(d)`
    pub delta_bias: Tensor,
}

/// Per-step parameters: `b`, `c` are `(L, N)`, `delta` is `(L, d)`.
#[derive(Clone, Debug)]
pub struct StepParams {
    pub b: Tensor,
    pub c: Tensor,
    pub delta: Tensor,
}

/// Rank of the timescale projection for `d` channels.
pub fn delta_rank(d: usize) -> usize {
    d.div_ceil(16).max(1)
}

/// Diagonal state matrix `A[d, n] = −(n + 1)`.
pub fn init_state_matrix(d: usize, n: usize) -> Tensor {
    let data = (0..d).flat_map(|_| (0..n).map(|i| -((i + 1) as f64))).collect();
    Tensor::from_parts(vec![d, n], data)
}

/// Bias whose softplus is log-uniform in `[1e-3, 1e-1]`.
pub fn init_delta_bias<R: Rng>(d: usize, rng: &mut R) -> Tensor {
    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    let data = (0..d)
        .map(|_| inverse_softplus(rng.gen_range(lo..hi).exp()))
        .collect();
    Tensor::from_parts(vec![d], data)
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SelectiveProjections {
    pub fn new<R: Rng>(d: usize, n: usize, rng: &mut R) -> Self {
        let r = delta_rank(d);
        let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Self {
            w_b: Tensor::uniform(&[d, n], -bound(d), bound(d), rng),
            w_c: Tensor::uniform(&[d, n], -bound(d), bound(d), rng),
            w_dt_down: Tensor::uniform(&[d, r], -bound(d), bound(d), rng),
            w_dt_up: Tensor::uniform(&[r, d], -bound(r), bound(r), rng),
            delta_bias: init_delta_bias(d, rng),
        }
    }
}

pub fn selective_params(x_seq: &Tensor, proj: &SelectiveProjections) -> Result<StepParams> {
    let (l, d) = match x_seq.shape() {
        [l, d] => (*l, *d),
        s => return Err(Error::shape("selective_params", s, &[0, proj.w_b.shape()[0]])),
    };
    let check = |w: &Tensor, rows: usize| -> Result<usize> {
        match w.shape() {
            [r, c] if *r == rows => Ok(*c),
            s => Err(Error::shape("selective_params", s, &[rows, 0])),
        }
    };
    let n = check(&proj.w_b, d)?;
    if check(&proj.w_c, d)? != n {
        return Err(Error::shape("selective_params", proj.w_c.shape(), proj.w_b.shape()));
    }
    let r = check(&proj.w_dt_down, d)?;
    if check(&proj.w_dt_up, r)? != d || proj.delta_bias.shape() != [d] {
        return Err(Error::shape("selective_params", proj.w_dt_up.shape(), &[r, d]));
    }
    let x = x_seq.data();
    let b = matmul_raw(x, proj.w_b.data(), l, d, n);
    let c = matmul_raw(x, proj.w_c.data(), l, d, n);
    let low = matmul_raw(x, proj.w_dt_down.data(), l, d, r);
    let mut dt = matmul_raw(&low, proj.w_dt_up.data(), l, r, d);
    for row in dt.chunks_mut(d) {
        for (v, bias) in row.iter_mut().zip(proj.delta_bias.data()) {
            *v = softplus(*v + bias);
        }
    }
    Ok(StepParams {
        b: Tensor::from_parts(vec![l, n], b),
        c: Tensor::from_parts(vec![l, n], c),
        delta: Tensor::from_parts(vec![l, d], dt),
    })
}

#[derive(Clone, Copy)]
struct ScanDims {
    batch: usize,
    channels: usize,
    state: usize,
    positions: usize,
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn check_step_params(x_seq: &Tensor, a: &Tensor, p: &StepParams) -> Result<(usize, usize, usize)> {
    let (l, d) = match x_seq.shape() {
        [l, d] if *l >= 1 => (*l, *d),
        s => return Err(Error::shape("selective_scan", s, &[1, 0])),
    };
    let n = match a.shape() {
        [ad, n] if *ad == d => *n,
        s => return Err(Error::shape("selective_scan", s, &[d, 0])),
    };
    if p.b.shape() != [l, n] || p.c.shape() != [l, n] {
        return Err(Error::shape("selective_scan", p.b.shape(), &[l, n]));
    }
    if p.delta.shape() != [l, d] {
        return Err(Error::shape("selective_scan", p.delta.shape(), &[l, d]));
    }
    if let Some(&bad) = p.delta.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NonPositiveDelta(bad));
    }
    Ok((l, d, n))
}

/// Sequential selective scan of a `(L, d)` sequence with state matrix `(d, N)`.
pub fn selective_scan(
    x_seq: &Tensor,
    a: &Tensor,
    p: &StepParams,
    disc: Discretization,
) -> Result<Tensor> {
    let (l, d, n) = check_step_params(x_seq, a, p)?;
    let dims = ScanDims {
        batch: 1,
        channels: d,
        state: n,
        positions: l,
    };
    let order: Vec<usize> = (0..l).collect();
    let (y, _) = scan_forward(
        &dims,
        &transpose(x_seq.data(), l, d),
        &transpose(p.delta.data(), l, d),
        a.data(),
        &transpose(p.b.data(), l, n),
        &transpose(p.c.data(), l, n),
        disc,
        &order,
        false,
    );
    Ok(Tensor::from_parts(vec![l, d], transpose(&y, d, l)))
}

/// Chunked evaluation of [`selective_scan`]: each chunk runs from a zero
/// state and the carried-in state is added back through the chunk's running
/// decay product.
pub fn selective_scan_chunked(
    x_seq: &Tensor,
    a: &Tensor,
    p: &StepParams,
    disc: Discretization,
    chunk: usize,
) -> Result<Tensor> {
    let (l, d, n) = check_step_params(x_seq, a, p)?;
    if chunk == 0 {
        return Err(Error::InvalidArgument("chunk length must be positive".into()));
    }
    let (x, dt, bm, cm) = (x_seq.data(), p.delta.data(), p.b.data(), p.c.data());
    let mut y = vec![0.0; l * d];
    let mut local = vec![0.0; chunk * n];
    let mut decay = vec![0.0; chunk * n];
    for ch in 0..d {
        let mut carry = vec![0.0; n];
        for start in (0..l).step_by(chunk) {
            let len = chunk.min(l - start);
            for i in 0..n {
                let (mut h, mut prod) = (0.0, 1.0);
                for t in 0..len {
                    let k = start + t;
                    let (ab, gain) = discretize_entry(dt[k * d + ch], a.data()[ch * n + i], disc);
                    h = ab * h + gain * bm[k * n + i] * x[k * d + ch];
                    prod *= ab;
                    local[t * n + i] = h;
                    decay[t * n + i] = prod;
                }
            }
            for t in 0..len {
                let k = start + t;
                let mut acc = 0.0;
                for i in 0..n {
                    acc += cm[k * n + i] * (local[t * n + i] + decay[t * n + i] * carry[i]);
                }
                y[k * d + ch] = acc;
            }
            for i in 0..n {
                carry[i] = local[(len - 1) * n + i] + decay[(len - 1) * n + i] * carry[i];
            }
        }
    }
    Ok(Tensor::from_parts(vec![l, d], y))
}

/// Forward kernel. Returns outputs `(B, D, P)` and, when requested, the
/// states `(B, D, P, N)` in traversal order.
#[allow(clippy::too_many_arguments)]
fn scan_forward(
    dims: &ScanDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    bm: &[f64],
    cm: &[f64],
    disc: Discretization,
    order: &[usize],
    keep_states: bool,
) -> (Vec<f64>, Vec<f64>) {
    let ScanDims {
        batch,
        channels,
        state: n,
        positions: p,
    } = *dims;
    let mut y = vec![0.0; batch * channels * p];
    let mut states = if keep_states {
        vec![0.0; batch * channels * p * n]
    } else {
        Vec::new()
    };
    let mut h = vec![0.0; n];
    for b in 0..batch {
        for d in 0..channels {
            h.iter_mut().for_each(|v| *v = 0.0);
            let row = (b * channels + d) * p;
            let arow = &a[d * n..(d + 1) * n];
            for (l, &pos) in order.iter().enumerate() {
                let dt = delta[row + pos];
                let x = u[row + pos];
                let mut acc = 0.0;
                for i in 0..n {
                    let (ab, gain) = discretize_entry(dt, arow[i], disc);
                    let sidx = (b * n + i) * p + pos;
                    h[i] = ab * h[i] + gain * bm[sidx] * x;
                    acc += cm[sidx] * h[i];
                }
                y[row + pos] = acc;
                if keep_states {
                    states[(row + l) * n..(row + l + 1) * n].copy_from_slice(&h);
                }
            }
        }
    }
    (y, states)
}

struct Scan {
    dims: ScanDims,
    disc: Discretization,
    order: Rc<Vec<usize>>,
}

impl Scan {
    fn dims(&self) -> (usize, usize, usize) {
        (self.dims.batch, self.dims.channels, self.dims.positions)
    }
}

/// Differentiable selective scan.
///
/// `u`, `delta`: `(B, D, H, W)`; `a`: `(D, N)`; `bm`, `cm`: `(B, N, H, W)`.
/// Positions are visited in `order` (a permutation of `0..H*W`); each output
/// lands on the position of its step.
pub fn selective_scan_op<'t>(
    u: Var<'t>,
    delta: Var<'t>,
    a: Var<'t>,
    bm: Var<'t>,
    cm: Var<'t>,
    disc: Discretization,
    order: Rc<Vec<usize>>,
) -> Result<Var<'t>> {
    let (uv, dv, av, bv, cv) = (u.value(), delta.value(), a.value(), bm.value(), cm.value());
    let (batch, channels, h, w) = uv.dims4()?;
    let positions = h * w;
    if dv.shape() != uv.shape() {
        return Err(Error::shape("selective_scan", uv.shape(), dv.shape()));
    }
    let n = match av.shape() {
        [ad, n] if *ad == channels => *n,
        s => return Err(Error::shape("selective_scan", s, &[channels, 0])),
    };
    let sel_shape = [batch, n, h, w];
    if bv.shape() != sel_shape || cv.shape() != sel_shape {
        return Err(Error::shape("selective_scan", bv.shape(), &sel_shape));
    }
    if order.len() != positions || order.iter().any(|&i| i >= positions) {
        return Err(Error::LengthMismatch {
            got: order.len(),
            h,
            w,
        });
    }
    if let Some(&bad) = dv.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NonPositiveDelta(bad));
    }
    let scan = Scan {
        dims: ScanDims {
            batch,
            channels,
            state: n,
            positions,
        },
        disc,
        order,
    };
    let (y, states) = scan_forward(
        &scan.dims,
        uv.data(),
        dv.data(),
        av.data(),
        bv.data(),
        cv.data(),
        disc,
        &scan.order,
        true,
    );
    let value = Tensor::from_parts(uv.shape().to_vec(), y);
    Ok(u.tape().push(value, &[u, delta, a, bm, cm], move |g| {
        let (batch, channels, p) = scan.dims();
        let mut gu = vec![0.0; uv.numel()];
        let mut gd = vec![0.0; dv.numel()];
        let mut ga = vec![0.0; av.numel()];
        let mut gb = vec![0.0; bv.numel()];
        let mut gc = vec![0.0; cv.numel()];
        let (u, dt, a, bm, cm) = (uv.data(), dv.data(), av.data(), bv.data(), cv.data());
        let mut gh = vec![0.0; n];
        for b in 0..batch {
            for d in 0..channels {
                gh.iter_mut().for_each(|v| *v = 0.0);
                let row = (b * channels + d) * p;
                for l in (0..p).rev() {
                    let pos = scan.order[l];
                    let (delta, x, gy) = (dt[row + pos], u[row + pos], g[row + pos]);
                    let h_now = &states[(row + l) * n..(row + l + 1) * n];
                    let h_prev = (l > 0).then(|| &states[(row + l - 1) * n..(row + l) * n]);
                    let (mut gx, mut gdelta) = (0.0, 0.0);
                    for i in 0..n {
                        let a_i = a[d * n + i];
                        let sidx = (b * n + i) * p + pos;
                        gc[sidx] += gy * h_now[i];
                        gh[i] += gy * cm[sidx];
                        let (ab, gain) = discretize_entry(delta, a_i, scan.disc);
                        let (dg_ddelta, dg_da) = gain_partials(delta, a_i, scan.disc);
                        let hp = h_prev.map_or(0.0, |hp| hp[i]);
                        let g_ab = gh[i] * hp;
                        let g_gain = gh[i] * bm[sidx] * x;
                        gx += gh[i] * gain * bm[sidx];
                        gb[sidx] += gh[i] * gain * x;
                        gdelta += g_ab * a_i * ab + g_gain * dg_ddelta;
                        ga[d * n + i] += g_ab * delta * ab + g_gain * dg_da;
                        gh[i] *= ab;
                    }
                    gu[row + pos] += gx;
                    gd[row + pos] += gdelta;
                }
            }
        }
        vec![Some(gu), Some(gd), Some(ga), Some(gb), Some(gc)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_series_matches_closed_form_near_threshold() {
        for &x in &[1.1e-3, -1.1e-3, 5e-2, -0.7] {
            let delta = 0.5;
            let a = x / delta;
            let (_, dga) = gain_partials(delta, a, Discretization::Zoh);
            let closed = (delta * a * (delta * a).exp() - (delta * a).exp_m1()) / (a * a);
            assert!((dga - closed).abs() < 1e-12 * closed.abs().max(1.0));
        }
        let x: f64 = 9e-4;
        let series = 0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0;
        let closed = (x * x.exp() - x.exp_m1()) / (x * x);
        assert!((series - closed).abs() < 1e-9);
    }

    #[test]
    fn inverse_softplus_round_trips() {
        for &y in &[1e-3, 0.05, 1.0, 7.5] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }
}
