//! The residual vision SSM block, channel attention and the cross state
//! space block that scans one stream with selection taken from another.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, Init, LayerNorm, ParamId};
use crate::scan2d::{multi_direction_ssm, DirectionParams};
use crate::ssm::{delta_rank, init_delta_bias, init_state_matrix, Discretization};

/// Widths and switches shared by the SSM blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsmDims {
    /// Model width entering and leaving a block.
    pub d_model: usize,
    /// Inner width after the input projection.
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    /// Separate selection parameters for each scan direction.
    pub per_direction: bool,
    pub disc: Discretization,
}

/// Input-dependent `B`, `C`, `Δ` for one traversal, plus the state matrix.
#[derive(Clone, Debug)]
pub struct Selector {
    pub proj_b: Conv,
    pub proj_c: Conv,
    pub dt_down: Conv,
    pub dt_up: Conv,
    pub a: ParamId,
}

impl Selector {
    pub fn new(init: &mut Init, name: &str, d: usize, n: usize) -> Self {
        let mut s = init.scope(name);
        let r = delta_rank(d);
        let proj_b = Conv::no_bias(&mut s, "proj_b", d, n, 1, Default::default());
        let proj_c = Conv::no_bias(&mut s, "proj_c", d, n, 1, Default::default());
        let dt_down = Conv::no_bias(&mut s, "dt_down", d, r, 1, Default::default());
        let mut dt_up = Conv::no_bias(&mut s, "dt_up", r, d, 1, Default::default());
        let bias = init_delta_bias(d, s.rng());
        dt_up.bias = Some(s.param("dt_up.b", bias));
        let a = s.param("a", init_state_matrix(d, n));
        Self {
            proj_b,
            proj_c,
            dt_down,
            dt_up,
            a,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<DirectionParams<'t>> {
        let low = self.dt_down.forward(ctx, x)?;
        Ok(DirectionParams {
            delta: self.dt_up.forward(ctx, low)?.softplus(),
            b: self.proj_b.forward(ctx, x)?,
            c: self.proj_c.forward(ctx, x)?,
            a: ctx.p(self.a),
        })
    }
}

fn selectors(init: &mut Init, dims: &SsmDims) -> Vec<Selector> {
    let count = if dims.per_direction { 4 } else { 1 };
    (0..count)
        .map(|k| Selector::new(init, &format!("sel{k}"), dims.d_inner, dims.d_state))
        .collect()
}

fn select<'t>(sel: &[Selector], ctx: &Ctx<'t>, x: Var<'t>) -> Result<Vec<DirectionParams<'t>>> {
    sel.iter().map(|s| s.forward(ctx, x)).collect()
}

/// Squeeze-and-excitation style channel reweighting.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl ChannelAttention {
    pub fn new(init: &mut Init, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::InvalidReduction {
                channels,
                reduction,
            });
        }
        let mut s = init.scope(name);
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Conv::pointwise(&mut s, "fc1", channels, hidden),
            fc2: Conv::pointwise(&mut s, "fc2", hidden, channels),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        channel_attention(ctx, x, self)
    }
}

/// Global average pool, two pointwise layers with ReLU between, sigmoid,
/// then per-channel rescale.
pub fn channel_attention<'t>(ctx: &Ctx<'t>, x: Var<'t>, p: &ChannelAttention) -> Result<Var<'t>> {
    let pooled = x.global_avg_pool()?;
    let hidden = p.fc1.forward(ctx, pooled)?.relu();
    let weights = p.fc2.forward(ctx, hidden)?.sigmoid();
    x.mul(weights)
}

fn split_halves(v: Var<'_>, d: usize) -> Result<(Var<'_>, Var<'_>)> {
    Ok((v.narrow_channels(0, d)?, v.narrow_channels(d, d)?))
}

/// Residual vision SSM block: norm, gated four-way selective scan, output
/// projection, skip connection.
#[derive(Clone, Debug)]
pub struct SsmBlock {
    pub dims: SsmDims,
    pub norm: LayerNorm,
    pub in_proj: Conv,
    pub dw_conv: Conv,
    pub selectors: Vec<Selector>,
    pub out_norm: LayerNorm,
    pub out_proj: Conv,
}

impl SsmBlock {
    pub fn new(init: &mut Init, name: &str, dims: SsmDims) -> Self {
        let mut s = init.scope(name);
        let (dm, d) = (dims.d_model, dims.d_inner);
        Self {
            dims,
            norm: LayerNorm::new(&mut s, "norm", dm),
            in_proj: Conv::pointwise(&mut s, "in_proj", dm, 2 * d),
            dw_conv: Conv::depthwise(&mut s, "dw_conv", d, dims.d_conv),
            selectors: selectors(&mut s, &dims),
            out_norm: LayerNorm::new(&mut s, "out_norm", d),
            out_proj: Conv::pointwise(&mut s, "out_proj", d, dm),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        ssm_block(ctx, x, self)
    }
}

pub fn ssm_block<'t>(ctx: &Ctx<'t>, x: Var<'t>, p: &SsmBlock) -> Result<Var<'t>> {
    let h = p.norm.forward(ctx, x)?;
    let (xp, z) = split_halves(p.in_proj.forward(ctx, h)?, p.dims.d_inner)?;
    let xc = p.dw_conv.forward(ctx, xp)?.silu();
    let sel = select(&p.selectors, ctx, xc)?;
    let y = multi_direction_ssm(xc, &sel, p.dims.disc)?;
    let gated = p.out_norm.forward(ctx, y)?.mul(z.silu())?;
    p.out_proj.forward(ctx, gated)?.add(x)
}

/// Cross state space block.
#[derive(Clone, Debug)]
pub struct CssmBlock {
    pub dims: SsmDims,
    pub in_proj: Conv,
    pub dw_conv_n: Conv,
    pub dw_conv_x: Conv,
    pub selectors: Vec<Selector>,
    pub norm: LayerNorm,
    pub out_proj: Conv,
    pub s: ParamId,
    pub s_prime: ParamId,
    pub post_norm: LayerNorm,
    pub post_conv: Conv,
    pub ca: ChannelAttention,
}

pub const CA_REDUCTION: usize = 4;

impl CssmBlock {
    pub fn new(init: &mut Init, name: &str, dims: SsmDims) -> Result<Self> {
        let mut s = init.scope(name);
        let (dm, d) = (dims.d_model, dims.d_inner);
        Ok(Self {
            dims,
            in_proj: Conv::pointwise(&mut s, "in_proj", dm, 2 * d),
            dw_conv_n: Conv::depthwise(&mut s, "dw_conv_n", d, dims.d_conv),
            dw_conv_x: Conv::depthwise(&mut s, "dw_conv_x", d, dims.d_conv),
            selectors: selectors(&mut s, &dims),
            norm: LayerNorm::new(&mut s, "norm", d),
            out_proj: Conv::pointwise(&mut s, "out_proj", d, dm),
            s: s.ones("s", &[dm]),
            s_prime: s.ones("s_prime", &[dm]),
            post_norm: LayerNorm::new(&mut s, "post_norm", dm),
            post_conv: Conv::same(&mut s, "post_conv", dm, dm, 3),
            ca: ChannelAttention::new(&mut s, "ca", dm, CA_REDUCTION.min(dm))?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, f_n: Var<'t>, f_x: Var<'t>) -> Result<Var<'t>> {
        cssm_forward(ctx, f_n, f_x, self)
    }
}

/// Scans the fused stream `f_x` with selection parameters derived from the
/// modality stream `f_n`, gates with both streams, and adds the two weighted
/// residual paths of `f_n`.
pub fn cssm_forward<'t>(ctx: &Ctx<'t>, f_n: Var<'t>, f_x: Var<'t>, p: &CssmBlock) -> Result<Var<'t>> {
    if f_n.shape() != f_x.shape() {
        return Err(Error::shape("cssm", &f_n.shape(), &f_x.shape()));
    }
    let d = p.dims.d_inner;
    let (fn_p, z_n) = split_halves(p.in_proj.forward(ctx, f_n)?, d)?;
    let (fx_p, z_x) = split_halves(p.in_proj.forward(ctx, f_x)?, d)?;
    let h_n = p.dw_conv_n.forward(ctx, fn_p)?.silu();
    let h_x = p.dw_conv_x.forward(ctx, fx_p)?.silu();
    let sel = select(&p.selectors, ctx, h_n)?;
    let y = multi_direction_ssm(h_x, &sel, p.dims.disc)?;
    let gated = p.norm.forward(ctx, y)?.mul(z_n.silu())?.mul(z_x.silu())?;
    let big_y = p.out_proj.forward(ctx, gated)?;
    let inner = big_y.add(ctx.p(p.s).mul(f_n)?)?;
    let normed = p.post_norm.forward(ctx, inner)?;
    let attended = p.ca.forward(ctx, p.post_conv.forward(ctx, normed)?)?;
    attended.add(ctx.p(p.s_prime).mul(f_n)?)
}
