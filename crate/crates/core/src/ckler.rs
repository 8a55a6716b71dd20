//! Cross-modal knowledge learner: a small residual encoder-decoder that
//! translates an image into a pseudo auxiliary modality and exposes its
//! bottleneck as a knowledge vector.

use crate::autodiff::{concat_channels, interpolate, ConvOpts, InterpMode, Var};
use crate::bfser::{AUX_CHANNELS, IMAGE_CHANNELS};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, Init, LEAKY_SLOPE};

/// Strided convolution followed by a residual refinement.
#[derive(Clone, Debug)]
pub struct ResStage {
    pub down: Conv,
    pub refine: Conv,
}

impl ResStage {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        let mut s = init.scope(name);
        let opts = ConvOpts {
            stride: 2,
            ..ConvOpts::same(3)
        };
        Self {
            down: Conv::new(&mut s, "down", cin, cout, 3, opts),
            refine: Conv::same(&mut s, "refine", cout, cout, 3),
        }
    }

    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.down.forward(ctx, x)?.leaky_relu(LEAKY_SLOPE);
        let r = self.refine.forward(ctx, h)?.leaky_relu(LEAKY_SLOPE);
        h.add(r)
    }
}

#[derive(Clone, Debug)]
pub struct Ckler {
    pub stages: Vec<ResStage>,
    /// Decoder convolutions from the bottleneck outward; the last one merges
    /// the input image.
    pub up: Vec<Conv>,
    pub head: Conv,
}

/// Pseudo-modality image in `[0, 1]` and the bottleneck knowledge vector.
#[derive(Clone, Copy, Debug)]
pub struct Translation<'t> {
    pub x_u: Var<'t>,
    pub z: Var<'t>,
}

impl Ckler {
    pub fn new(init: &mut Init, config: &ModelConfig) -> Self {
        let mut s = init.scope("ckler");
        let [c0, c1, c2] = config.ckler_widths;
        let cz = config.knowledge_channels;
        let widths = [c0, c1, c2, cz];
        let mut cin = IMAGE_CHANNELS;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let st = ResStage::new(&mut s, &format!("enc{k}"), cin, w);
                cin = w;
                st
            })
            .collect();
        // Mirrored skips: bottleneck → stage 2 → stage 1 → stage 0 → image.
        let pairs = [(cz, c2, c2), (c2, c1, c1), (c1, c0, c0), (c0, IMAGE_CHANNELS, c0)];
        let up = pairs
            .iter()
            .enumerate()
            .map(|(k, &(a, b, out))| Conv::same(&mut s, &format!("dec{k}"), a + b, out, 3))
            .collect();
        let head = Conv::pointwise(&mut s, "head", c0, AUX_CHANNELS);
        Self { stages, up, head }
    }
}

/// Encodes the image to `z` at 1/16 resolution and decodes a pseudo
/// auxiliary image at full resolution.
pub fn translate<'t>(ctx: &Ctx<'t>, x_i: Var<'t>, p: &Ckler) -> Result<Translation<'t>> {
    let mut feats = vec![x_i];
    let mut cur = x_i;
    for st in &p.stages {
        cur = st.forward(ctx, cur)?;
        feats.push(cur);
    }
    let z = cur;
    // feats = [x, s0, s1, s2, z]; skips taken from s2 down to x.
    for (k, conv) in p.up.iter().enumerate() {
        let skip = feats[3 - k];
        let (_, _, h, w) = skip.dims4()?;
        let up = interpolate(cur, h, w, InterpMode::Bilinear)?;
        cur = conv.forward(ctx, concat_channels(&[up, skip])?)?.leaky_relu(LEAKY_SLOPE);
    }
    let x_u = p.head.forward(ctx, cur)?.sigmoid();
    Ok(Translation { x_u, z })
}

/// Mean absolute difference.
pub fn translation_loss<'t>(x_u_hat: Var<'t>, e_u: Var<'t>) -> Result<Var<'t>> {
    if x_u_hat.shape() != e_u.shape() {
        return Err(Error::shape("translation_loss", &x_u_hat.shape(), &e_u.shape()));
    }
    Ok(x_u_hat.sub(e_u)?.abs().mean())
}
