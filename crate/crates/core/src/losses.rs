//! Segmentation losses: boundary-weighted BCE and IoU on masks, dice on
//! edges, and the deep-supervision sum over decoder levels.

use crate::autodiff::{resize_tensor, InterpMode, Var};
use crate::bfser::SegOutput;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side of the box filter used for boundary weights.
pub const WEIGHT_WINDOW: usize = 15;
pub const WEIGHT_GAIN: f64 = 5.0;
pub const DICE_EPS: f64 = 1.0;

fn check(op: &'static str, a: Var<'_>, b: Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &a.shape(), &b.shape()));
    }
    Ok(())
}

/// Mean over a `size × size` window clipped at the borders, per plane of a
/// `(B, C, H, W)` tensor. Uses a summed-area table.
pub fn box_filter(x: &Tensor, size: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let r = size / 2;
    let mut out = Vec::with_capacity(x.numel());
    for plane in x.data().chunks_exact(h * w) {
        let mut sat = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for xx in 0..w {
                row += plane[y * w + xx];
                sat[(y + 1) * (w + 1) + xx + 1] = sat[y * (w + 1) + xx + 1] + row;
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for xx in 0..w {
                let (x0, x1) = (xx.saturating_sub(r), (xx + r + 1).min(w));
                let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                    + sat[y0 * (w + 1) + x0];
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

/// `w = 1 + 5·|box₁₅(y) − y|`, emphasizing pixels near the mask boundary.
pub fn pixel_weights(y: &Tensor) -> Result<Tensor> {
    let smooth = box_filter(y, WEIGHT_WINDOW)?;
    let data = smooth
        .data()
        .iter()
        .zip(y.data())
        .map(|(s, t)| 1.0 + WEIGHT_GAIN * (s - t).abs())
        .collect();
    Tensor::new(y.shape(), data)
}

/// `Σ w·BCE(σ(p), y) / Σ w`, computed from logits as `softplus(p) − p·y`.
pub fn weighted_bce<'t>(p: Var<'t>, y: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    check("weighted_bce", p, y)?;
    check("weighted_bce", p, w)?;
    let per_pixel = p.softplus().sub(p.mul(y)?)?;
    w.mul(per_pixel)?.sum().div(w.sum())
}

/// `1 − (Σ w·s·y + 1) / (Σ w·(s + y − s·y) + 1)` with `s = σ(p)`.
pub fn weighted_iou<'t>(p: Var<'t>, y: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    check("weighted_iou", p, y)?;
    check("weighted_iou", p, w)?;
    let s = p.sigmoid();
    let sy = s.mul(y)?;
    let inter = w.mul(sy)?.sum().add_scalar(1.0);
    let union = w.mul(s.add(y)?.sub(sy)?)?.sum().add_scalar(1.0);
    Ok(inter.div(union)?.one_minus())
}

/// `1 − (2Σ s·e + ε) / (Σ s + Σ e + ε)` with `s = σ(p)`, `ε = 1`.
pub fn dice_loss<'t>(p: Var<'t>, e: Var<'t>) -> Result<Var<'t>> {
    check("dice_loss", p, e)?;
    let s = p.sigmoid();
    let num = s.mul(e)?.sum().affine(2.0, DICE_EPS);
    let den = s.sum().add(e.sum())?.add_scalar(DICE_EPS);
    Ok(num.div(den)?.one_minus())
}

/// Weight of decoder level `k` (1-based).
pub fn level_weight(k: usize) -> f64 {
    0.5f64.powi(k as i32 - 1)
}

/// Mask and edge ground truth resampled (nearest) to each output's size.
#[derive(Clone, Debug)]
pub struct LevelTargets {
    pub masks: Vec<(Tensor, Tensor)>,
    pub edges: Vec<Tensor>,
}

/// Resamples full-resolution targets to every output resolution and
/// precomputes mask pixel weights.
pub fn level_targets(out: &SegOutput<'_>, y_s: &Tensor, y_e: &Tensor) -> Result<LevelTargets> {
    let resize = |t: &Tensor, v: Var<'_>| -> Result<Tensor> {
        let (_, _, h, w) = v.dims4()?;
        let (_, _, th, tw) = t.dims4()?;
        if (th, tw) == (h, w) {
            Ok(t.clone())
        } else {
            resize_tensor(t, h, w, InterpMode::Nearest)
        }
    };
    let masks = out
        .masks
        .iter()
        .map(|&m| {
            let y = resize(y_s, m)?;
            let w = pixel_weights(&y)?;
            Ok((y, w))
        })
        .collect::<Result<_>>()?;
    let edges = out.edges.iter().map(|&e| resize(y_e, e)).collect::<Result<_>>()?;
    Ok(LevelTargets { masks, edges })
}

/// `Σₖ 2^{−(k−1)} (L_B + L_I)(p_sᵏ) + Σₖ 2^{−(k−1)} L_D(p_eᵏ)`.
pub fn total_seg_loss<'t>(out: &SegOutput<'t>, y_s: &Tensor, y_e: &Tensor) -> Result<Var<'t>> {
    let targets = level_targets(out, y_s, y_e)?;
    seg_loss_with_targets(out, &targets)
}

pub fn seg_loss_with_targets<'t>(out: &SegOutput<'t>, targets: &LevelTargets) -> Result<Var<'t>> {
    let tape = out.masks[0].tape();
    let mut total: Option<Var<'t>> = None;
    let mut acc = |term: Var<'t>| -> Result<()> {
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
        Ok(())
    };
    for (k, (&p, (y, w))) in out.masks.iter().zip(&targets.masks).enumerate() {
        let (y, w) = (tape.constant(y.clone()), tape.constant(w.clone()));
        let term = weighted_bce(p, y, w)?.add(weighted_iou(p, y, w)?)?;
        acc(term.scale(level_weight(k + 1)))?;
    }
    for (k, (&p, e)) in out.edges.iter().zip(&targets.edges).enumerate() {
        let e = tape.constant(e.clone());
        acc(dice_loss(p, e)?.scale(level_weight(k + 1)))?;
    }
    total.ok_or_else(|| Error::InvalidArgument("empty segmentation output".into()))
}
