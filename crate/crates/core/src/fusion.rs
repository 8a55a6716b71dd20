//! Per-level fusion: latent-space fusion, feature feedback, the weighted
//! gate and the state space fusion mechanism.

use crate::autodiff::{concat_channels, Var};
use crate::cssm::{CssmBlock, SsmBlock, SsmDims};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBlock, Ctx, Init, ParamId, LEAKY_SLOPE};

fn same_shape(op: &'static str, a: Var<'_>, b: Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &a.shape(), &b.shape()));
    }
    Ok(())
}

/// Latent-space fusion of an image feature with an auxiliary feature.
#[derive(Clone, Debug)]
pub struct Lsfm {
    pub block_gate: ConvBlock,
    pub block_add: ConvBlock,
    pub w_gate: Conv,
    pub w_add: Conv,
}

impl Lsfm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            block_gate: ConvBlock::new(&mut s, "block_gate", channels, channels),
            block_add: ConvBlock::new(&mut s, "block_add", channels, channels),
            w_gate: Conv::pointwise(&mut s, "w_gate", channels, channels),
            w_add: Conv::pointwise(&mut s, "w_add", channels, channels),
        }
    }
}

/// `f_x = f_i ⊙ σ(W¹ 𝒞(f_u)) + W² 𝒞(f_u)`.
pub fn lsfm<'t>(ctx: &Ctx<'t>, f_i: Var<'t>, f_u: Var<'t>, p: &Lsfm) -> Result<Var<'t>> {
    same_shape("lsfm", f_i, f_u)?;
    let gate = p.w_gate.forward(ctx, p.block_gate.forward(ctx, f_u)?)?.sigmoid();
    let add = p.w_add.forward(ctx, p.block_add.forward(ctx, f_u)?)?;
    f_i.mul(gate)?.add(add)
}

/// The fusion formula with a precomputed modulation map standing in for
/// `𝒞(f_u)` in both terms.
pub fn lsfm_modulated<'t>(ctx: &Ctx<'t>, f_i: Var<'t>, m: Var<'t>, p: &Lsfm) -> Result<Var<'t>> {
    same_shape("lsfm", f_i, m)?;
    let gate = p.w_gate.forward(ctx, m)?.sigmoid();
    f_i.mul(gate)?.add(p.w_add.forward(ctx, m)?)
}

/// Gated feedback of the fused feature into the auxiliary stream.
#[derive(Clone, Debug)]
pub struct Ffm {
    pub block_x: ConvBlock,
    pub block_out: ConvBlock,
    pub w_alpha: Conv,
    pub w_mod: Conv,
}

impl Ffm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            block_x: ConvBlock::new(&mut s, "block_x", channels, channels),
            block_out: ConvBlock::new(&mut s, "block_out", channels, channels),
            w_alpha: Conv::pointwise(&mut s, "w_alpha", 2 * channels, channels),
            w_mod: Conv::pointwise(&mut s, "w_mod", channels, channels),
        }
    }
}

/// `α = σ(W¹ [f_u, 𝒞₁(f_x)])`, `f_u′ = 𝒞₂(f_u ⊙ α ⊙ W² 𝒞₁(f_x) + f_u)`.
pub fn ffm<'t>(ctx: &Ctx<'t>, f_u: Var<'t>, f_x: Var<'t>, p: &Ffm) -> Result<Var<'t>> {
    same_shape("ffm", f_u, f_x)?;
    let cx = p.block_x.forward(ctx, f_x)?;
    let alpha = p.w_alpha.forward(ctx, concat_channels(&[f_u, cx])?)?.sigmoid();
    let modulated = f_u.mul(alpha)?.mul(p.w_mod.forward(ctx, cx)?)?;
    p.block_out.forward(ctx, modulated.add(f_u)?)
}

/// Weighted gate balancing the two cross-modal paths.
#[derive(Clone, Debug)]
pub struct Gate {
    /// The shared map `F(·, θ)`: pointwise conv followed by LeakyReLU.
    pub theta: Conv,
    pub lambda: Conv,
    pub mu: ParamId,
}

impl Gate {
    /// `per_channel` emits one gate per channel instead of one per pixel.
    pub fn new(init: &mut Init, name: &str, channels: usize, per_channel: bool) -> Self {
        let mut s = init.scope(name);
        let out = if per_channel { channels } else { 1 };
        Self {
            theta: Conv::pointwise(&mut s, "theta", channels, channels),
            lambda: Conv::no_bias(&mut s, "lambda", 2 * channels, out, 1, Default::default()),
            mu: s.zeros("mu", &[1]),
        }
    }
}

/// `g = σ(λ [δ₁, δ₂] + μ)` with `δ₁ = F(x)`, `δ₂ = F(x + δ₁)`.
pub fn gate_weights<'t>(ctx: &Ctx<'t>, x: Var<'t>, p: &Gate) -> Result<Var<'t>> {
    let f = |v: Var<'t>| -> Result<Var<'t>> { Ok(p.theta.forward(ctx, v)?.leaky_relu(LEAKY_SLOPE)) };
    let d1 = f(x)?;
    let d2 = f(x.add(d1)?)?;
    p.lambda
        .forward(ctx, concat_channels(&[d1, d2])?)?
        .add(ctx.p(p.mu))
        .map(Var::sigmoid)
}

/// Sub-module switches inside the state space fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsfmFlags {
    pub ssm: bool,
    pub cssm: bool,
    pub gate: bool,
}

impl Default for SsfmFlags {
    fn default() -> Self {
        Self {
            ssm: true,
            cssm: true,
            gate: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ssfm {
    pub flags: SsfmFlags,
    pub proj_i: Conv,
    pub proj_u: Conv,
    pub ssm_i: SsmBlock,
    pub ssm_u: SsmBlock,
    pub ssm_x: SsmBlock,
    pub block_cat: ConvBlock,
    pub cssm_i: CssmBlock,
    pub cssm_u: CssmBlock,
    pub gate: Gate,
    pub block_i: ConvBlock,
    pub block_u: ConvBlock,
    pub block_out: ConvBlock,
}

impl Ssfm {
    pub fn new(
        init: &mut Init,
        name: &str,
        channels: usize,
        dims: SsmDims,
        flags: SsfmFlags,
        per_channel_gate: bool,
    ) -> Result<Self> {
        let mut s = init.scope(name);
        let dm = dims.d_model;
        Ok(Self {
            flags,
            proj_i: Conv::pointwise(&mut s, "proj_i", channels, dm),
            proj_u: Conv::pointwise(&mut s, "proj_u", channels, dm),
            ssm_i: SsmBlock::new(&mut s, "ssm_i", dims),
            ssm_u: SsmBlock::new(&mut s, "ssm_u", dims),
            ssm_x: SsmBlock::new(&mut s, "ssm_x", dims),
            block_cat: ConvBlock::new(&mut s, "block_cat", 2 * dm, dm),
            cssm_i: CssmBlock::new(&mut s, "cssm_i", dims)?,
            cssm_u: CssmBlock::new(&mut s, "cssm_u", dims)?,
            gate: Gate::new(&mut s, "gate", dm, per_channel_gate),
            block_i: ConvBlock::new(&mut s, "block_i", dm, dm),
            block_u: ConvBlock::new(&mut s, "block_u", dm, dm),
            block_out: ConvBlock::new(&mut s, "block_out", dm, dm),
        })
    }
}

/// State space fusion of an image feature and a feedback-updated auxiliary
/// feature into one `d_m`-wide map. Intermediates are recorded on the
/// context under `ssfm.*`.
pub fn ssfm<'t>(ctx: &Ctx<'t>, f_i: Var<'t>, f_u: Var<'t>, p: &Ssfm) -> Result<Var<'t>> {
    same_shape("ssfm", f_i, f_u)?;
    let a = p.proj_i.forward(ctx, f_i)?;
    let b = p.proj_u.forward(ctx, f_u)?;
    let cat = p.block_cat.forward(ctx, concat_channels(&[a, b])?)?;
    let (ft_i, ft_u, ft_x) = if p.flags.ssm {
        (
            p.ssm_i.forward(ctx, a)?,
            p.ssm_u.forward(ctx, b)?,
            p.ssm_x.forward(ctx, cat)?,
        )
    } else {
        (a, b, cat)
    };
    let (big_i, big_u) = if p.flags.cssm {
        (p.cssm_i.forward(ctx, ft_i, ft_x)?, p.cssm_u.forward(ctx, ft_u, ft_x)?)
    } else {
        (ft_i, ft_u)
    };
    let g = if p.flags.gate {
        gate_weights(ctx, ft_x, &p.gate)?
    } else {
        ctx.tape().constant(crate::Tensor::scalar(0.5))
    };
    for (name, v) in [
        ("ssfm.f_i", ft_i),
        ("ssfm.f_u", ft_u),
        ("ssfm.f_x", ft_x),
        ("ssfm.big_i", big_i),
        ("ssfm.big_u", big_u),
        ("ssfm.gate", g),
    ] {
        ctx.record(name, v);
    }
    let path_i = p.block_i.forward(ctx, g.mul(big_i)?.add(ft_x)?)?;
    let path_u = p.block_u.forward(ctx, g.one_minus().mul(big_u)?.add(ft_x)?)?;
    p.block_out.forward(ctx, path_i.add(path_u)?)
}
