//! The bi-space fusion segmentor: dual encoders, per-level fusion, the
//! atrous pyramid coarse head and a top-down decoder.

use crate::autodiff::{concat_channels, interpolate, pad_replicate, ConvOpts, InterpMode, Var};
use crate::config::{Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::fusion::{ffm, lsfm, lsfm_modulated, ssfm, Ffm, Lsfm, Ssfm};
use crate::nn::{Conv, ConvBlock, Ctx, Init, LEAKY_SLOPE};

pub const LEVELS: usize = 5;
/// Levels that take part in fusion and decoding.
pub const FUSED_LEVELS: [usize; 4] = [1, 2, 3, 4];

/// Spatial extent of encoder level `k` for an input of extent `size`.
pub fn level_extent(size: usize, k: usize) -> usize {
    (0..=k).fold(size, |s, _| s.div_ceil(2))
}

/// Strided convolutional encoder; level `k` halves the previous extent.
#[derive(Clone, Debug)]
pub struct Encoder {
    /// Linear stem mapping an auxiliary image to the image encoder's input
    /// channel count.
    pub embed: Option<Conv>,
    pub levels: Vec<(ConvBlock, ConvBlock)>,
}

pub const IMAGE_CHANNELS: usize = 3;
pub const AUX_CHANNELS: usize = 1;

impl Encoder {
    pub fn new(init: &mut Init, name: &str, widths: &[usize; LEVELS], embed: bool) -> Self {
        let mut s = init.scope(name);
        let embed = embed.then(|| Conv::same(&mut s, "embed", AUX_CHANNELS, IMAGE_CHANNELS, 3));
        let mut cin = IMAGE_CHANNELS;
        let levels = widths
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let mut l = s.scope(&format!("l{k}"));
                let down = ConvBlock::strided(&mut l, "down", cin, w, 2);
                let refine = ConvBlock::new(&mut l, "refine", w, w);
                cin = w;
                (down, refine)
            })
            .collect();
        Self { embed, levels }
    }

    pub fn stem<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match &self.embed {
            Some(e) => e.forward(ctx, x),
            None => Ok(x),
        }
    }

    pub fn level<'t>(&self, ctx: &Ctx<'t>, k: usize, x: Var<'t>) -> Result<Var<'t>> {
        let (down, refine) = &self.levels[k];
        refine.forward(ctx, down.forward(ctx, x)?)
    }
}

/// Parallel dilated convolutions plus a pooled branch, fused and reduced to
/// one coarse logit map. Borders are replicate-padded so a constant input
/// gives a constant output.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub rates: [usize; 3],
    pub branches: Vec<Conv>,
    pub pool: Conv,
    pub fuse: Conv,
    pub head: Conv,
}

impl Aspp {
    pub fn new(init: &mut Init, name: &str, cin: usize, width: usize, rates: [usize; 3]) -> Self {
        let mut s = init.scope(name);
        let branches = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let opts = ConvOpts {
                    dilation: r,
                    ..ConvOpts::default()
                };
                Conv::new(&mut s, &format!("rate{i}"), cin, width, 3, opts)
            })
            .collect();
        Self {
            rates,
            branches,
            pool: Conv::pointwise(&mut s, "pool", cin, width),
            fuse: Conv::pointwise(&mut s, "fuse", 4 * width, width),
            head: Conv::pointwise(&mut s, "head", width, 1),
        }
    }
}

/// Coarse logits `p_s⁵` at the resolution of `f_x⁴`.
pub fn aspp_coarse<'t>(ctx: &Ctx<'t>, f_x4: Var<'t>, p: &Aspp) -> Result<Var<'t>> {
    let (_, _, h, w) = f_x4.dims4()?;
    let mut outs = Vec::with_capacity(4);
    for (conv, &r) in p.branches.iter().zip(&p.rates) {
        let padded = pad_replicate(f_x4, r)?;
        outs.push(conv.forward(ctx, padded)?.leaky_relu(LEAKY_SLOPE));
    }
    let pooled = p.pool.forward(ctx, f_x4.global_avg_pool()?)?.leaky_relu(LEAKY_SLOPE);
    outs.push(interpolate(pooled, h, w, InterpMode::Nearest)?);
    let fused = p.fuse.forward(ctx, concat_channels(&outs)?)?.leaky_relu(LEAKY_SLOPE);
    p.head.forward(ctx, fused)
}

/// Top-down decoder with a mask head and an edge head per fused level.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// Indexed by level − 1.
    pub blocks: Vec<Conv>,
    pub mask_heads: Vec<Conv>,
    pub edge_heads: Vec<Conv>,
}

impl Decoder {
    pub fn new(init: &mut Init, name: &str, d_model: usize) -> Self {
        let mut s = init.scope(name);
        let mut blocks = Vec::new();
        let mut mask_heads = Vec::new();
        let mut edge_heads = Vec::new();
        for k in FUSED_LEVELS {
            let cin = if k == 4 { 1 + d_model } else { 2 * d_model };
            let mut l = s.scope(&format!("l{k}"));
            blocks.push(Conv::same(&mut l, "block", cin, d_model, 3));
            mask_heads.push(Conv::pointwise(&mut l, "mask", d_model, 1));
            edge_heads.push(Conv::pointwise(&mut l, "edge", d_model, 1));
        }
        Self {
            blocks,
            mask_heads,
            edge_heads,
        }
    }
}

/// Multi-level logits. `masks[k-1]` is `p_s^k` for `k = 1..=5`; `edges[k-1]`
/// is `p_e^k` for `k = 1..=4`.
#[derive(Clone, Debug)]
pub struct SegOutput<'t> {
    pub masks: Vec<Var<'t>>,
    pub edges: Vec<Var<'t>>,
}

/// `skips[k-1]` is `F^k`; resolution must increase from level 4 to level 1.
pub fn decode<'t>(ctx: &Ctx<'t>, p_s5: Var<'t>, skips: &[Var<'t>], p: &Decoder) -> Result<SegOutput<'t>> {
    if skips.len() != 4 {
        return Err(Error::InvalidArgument(format!("decoder needs 4 skips, got {}", skips.len())));
    }
    for k in 1..4 {
        let (_, _, hk, wk) = skips[k - 1].dims4()?;
        let (_, _, hn, wn) = skips[k].dims4()?;
        if hk < hn || wk < wn {
            return Err(Error::shape("decode", &skips[k - 1].shape(), &skips[k].shape()));
        }
    }
    let mut masks = vec![p_s5; 5];
    let mut edges = vec![p_s5; 4];
    let mut state = p_s5;
    for k in (1..=4).rev() {
        let skip = skips[k - 1];
        let (_, _, h, w) = skip.dims4()?;
        let (_, _, sh, sw) = state.dims4()?;
        let up = if (sh, sw) == (h, w) {
            state
        } else {
            interpolate(state, h, w, InterpMode::Bilinear)?
        };
        state = p.blocks[k - 1]
            .forward(ctx, concat_channels(&[up, skip])?)?
            .leaky_relu(LEAKY_SLOPE);
        masks[k - 1] = p.mask_heads[k - 1].forward(ctx, state)?;
        edges[k - 1] = p.edge_heads[k - 1].forward(ctx, state)?;
    }
    Ok(SegOutput { masks, edges })
}

/// Fresh parameters that fold the knowledge vector into the level-4 fusion.
#[derive(Clone, Debug)]
pub struct Injection {
    pub proj: Conv,
    pub ffm: Ffm,
}

impl Injection {
    pub fn new(init: &mut Init, name: &str, knowledge_channels: usize, width: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            proj: Conv::pointwise(&mut s, "proj", knowledge_channels, width),
            ffm: Ffm::new(&mut s, "ffm", width),
        }
    }
}

/// Level-4 fusion with the knowledge vector: `m = FFM(f_u⁴, resize(proj(z)))`
/// replaces `𝒞(f_u⁴)` in both terms of the latent-space fusion.
pub fn inject_knowledge<'t>(
    ctx: &Ctx<'t>,
    f_i4: Var<'t>,
    f_u4: Var<'t>,
    z: Var<'t>,
    inj: &Injection,
    lsfm4: &Lsfm,
) -> Result<Var<'t>> {
    let (_, _, h, w) = f_u4.dims4()?;
    let zp = inj.proj.forward(ctx, z)?;
    let (_, _, zh, zw) = zp.dims4()?;
    let zp = if (zh, zw) == (h, w) {
        zp
    } else {
        interpolate(zp, h, w, InterpMode::Bilinear)?
    };
    let m = ffm(ctx, f_u4, zp, &inj.ffm)?;
    lsfm_modulated(ctx, f_i4, m, lsfm4)
}

#[derive(Clone, Debug)]
pub struct Bfser {
    pub config: ModelConfig,
    pub enc_i: Encoder,
    pub enc_u: Option<Encoder>,
    /// Indexed by level − 1, present where the level uses latent fusion.
    pub lsfm: Vec<Option<Lsfm>>,
    /// Levels 1..=3.
    pub ffm: Vec<Option<Ffm>>,
    pub ssfm: Vec<Option<Ssfm>>,
    /// Plain skip projections used when state space fusion is off.
    pub skip_proj: Vec<Option<ConvBlock>>,
    pub injection: Option<Injection>,
    pub aspp: Aspp,
    pub decoder: Decoder,
}

/// Encoder features and the fusion products that feed the decoder.
#[derive(Clone, Debug)]
pub struct DualFeatures<'t> {
    pub f_i: Vec<Var<'t>>,
    /// Empty in rgb-only mode.
    pub f_u: Vec<Var<'t>>,
    /// `f_x^k` for levels 1..=4 (index k − 1).
    pub f_x: Vec<Var<'t>>,
    /// Feedback-updated `f_u^{k′}` for levels 1..=3 (index k − 1).
    pub f_u_prime: Vec<Var<'t>>,
}

impl Bfser {
    pub fn new(init: &mut Init, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut s = init.scope("bfser");
        let w = config.widths;
        let dual = config.mode == Mode::Dual;
        let enc_i = Encoder::new(&mut s, "enc_i", &w, false);
        let enc_u = dual.then(|| Encoder::new(&mut s, "enc_u", &w, true));
        let mut lsfm_v = Vec::new();
        let mut ffm_v = Vec::new();
        let mut ssfm_v = Vec::new();
        let mut skip_v = Vec::new();
        for k in FUSED_LEVELS {
            let mut l = s.scope(&format!("fuse{k}"));
            let uses_lsfm = dual && (config.enable_lsfm || (k == 4 && config.enable_injection));
            lsfm_v.push(uses_lsfm.then(|| Lsfm::new(&mut l, "lsfm", w[k])));
            if k < 4 {
                ffm_v.push((dual && config.enable_ffm).then(|| Ffm::new(&mut l, "ffm", w[k])));
            }
            let uses_ssfm = dual && config.enable_ssfm;
            ssfm_v.push(if uses_ssfm {
                Some(Ssfm::new(
                    &mut l,
                    "ssfm",
                    w[k],
                    config.ssm_dims(),
                    config.ssfm_flags(),
                    config.per_channel_gate,
                )?)
            } else {
                None
            });
            let skip_in = if dual { 2 * w[k] } else { w[k] };
            skip_v.push((!uses_ssfm).then(|| ConvBlock::new(&mut l, "skip", skip_in, config.d_model)));
        }
        let injection = config
            .enable_injection
            .then(|| Injection::new(&mut s, "inject", config.knowledge_channels, w[4]));
        let aspp = Aspp::new(&mut s, "aspp", w[4], config.d_model, config.aspp_rates);
        let decoder = Decoder::new(&mut s, "decoder", config.d_model);
        Ok(Self {
            config: config.clone(),
            enc_i,
            enc_u,
            lsfm: lsfm_v,
            ffm: ffm_v,
            ssfm: ssfm_v,
            skip_proj: skip_v,
            injection,
            aspp,
            decoder,
        })
    }

    fn check_input(&self, x: Var<'_>, channels: usize) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.image_size;
        if c != channels || h != s || w != s {
            return Err(Error::shape("bfser input", &x.shape(), &[x.shape()[0], channels, s, s]));
        }
        Ok(())
    }

    /// Runs both encoders with latent fusion and feature feedback. `z` is
    /// the knowledge vector, used when injection is enabled.
    pub fn encode_dual<'t>(
        &self,
        ctx: &Ctx<'t>,
        x_i: Var<'t>,
        x_u: Option<Var<'t>>,
        z: Option<Var<'t>>,
    ) -> Result<DualFeatures<'t>> {
        self.check_input(x_i, IMAGE_CHANNELS)?;
        let mut f_i = Vec::with_capacity(LEVELS);
        let mut cur = x_i;
        for k in 0..LEVELS {
            cur = self.enc_i.level(ctx, k, cur)?;
            ctx.record(&format!("f_i{k}"), cur);
            f_i.push(cur);
        }
        let Some(enc_u) = &self.enc_u else {
            return Ok(DualFeatures {
                f_x: vec![f_i[4]],
                f_i,
                f_u: Vec::new(),
                f_u_prime: Vec::new(),
            });
        };
        let x_u = x_u.ok_or_else(|| Error::MissingModality("dual mode needs an auxiliary input".into()))?;
        self.check_input(x_u, AUX_CHANNELS)?;
        let mut f_u = Vec::with_capacity(LEVELS);
        let mut f_x = Vec::with_capacity(4);
        let mut f_u_prime = Vec::with_capacity(3);
        let mut cur = enc_u.stem(ctx, x_u)?;
        for k in 0..LEVELS {
            ctx.record(&format!("enc_u_in{k}"), cur);
            let fu = enc_u.level(ctx, k, cur)?;
            ctx.record(&format!("f_u{k}"), fu);
            f_u.push(fu);
            cur = fu;
            if k == 0 {
                continue;
            }
            let lsfm_k = self.lsfm[k - 1].as_ref();
            let fx = match (k, &self.injection, z, lsfm_k) {
                (4, Some(inj), Some(z), Some(l)) => inject_knowledge(ctx, f_i[4], fu, z, inj, l)?,
                (4, Some(_), None, _) => {
                    return Err(Error::MissingModality("injection needs a knowledge vector".into()))
                }
                (_, _, _, Some(l)) => lsfm(ctx, f_i[k], fu, l)?,
                _ => f_i[k].add(fu)?,
            };
            ctx.record(&format!("f_x{k}"), fx);
            f_x.push(fx);
            if k < 4 {
                let updated = match &self.ffm[k - 1] {
                    Some(p) => ffm(ctx, fu, fx, p)?,
                    None => fu,
                };
                ctx.record(&format!("f_u_prime{k}"), updated);
                f_u_prime.push(updated);
                cur = updated;
            }
        }
        Ok(DualFeatures {
            f_i,
            f_u,
            f_x,
            f_u_prime,
        })
    }

    /// Decoder skips `F^k` for levels 1..=4.
    pub fn skips<'t>(&self, ctx: &Ctx<'t>, feats: &DualFeatures<'t>) -> Result<Vec<Var<'t>>> {
        let dual = !feats.f_u.is_empty();
        let mut out = Vec::with_capacity(4);
        for k in FUSED_LEVELS {
            let fi = feats.f_i[k];
            let fu = if k < 4 && dual { Some(feats.f_u_prime[k - 1]) } else { feats.f_u.get(k).copied() };
            let skip = match (&self.ssfm[k - 1], fu) {
                (Some(p), Some(fu)) => ssfm(ctx, fi, fu, p)?,
                _ => {
                    let proj = self.skip_proj[k - 1].as_ref().expect("skip projection");
                    let input = match fu {
                        Some(fu) => concat_channels(&[fi, fu])?,
                        None => fi,
                    };
                    proj.forward(ctx, input)?
                }
            };
            ctx.record(&format!("skip{k}"), skip);
            out.push(skip);
        }
        Ok(out)
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        x_i: Var<'t>,
        x_u: Option<Var<'t>>,
        z: Option<Var<'t>>,
    ) -> Result<SegOutput<'t>> {
        let feats = self.encode_dual(ctx, x_i, x_u, z)?;
        let skips = self.skips(ctx, &feats)?;
        let p_s5 = aspp_coarse(ctx, *feats.f_x.last().expect("level 4"), &self.aspp)?;
        decode(ctx, p_s5, &skips, &self.decoder)
    }
}
