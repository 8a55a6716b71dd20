//! Directional flattening of feature maps and the four-way selective scan.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::ssm::{selective_scan_op, Discretization};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanDirection {
    /// Row-major from the top-left corner.
    TlBr,
    /// Reverse row-major from the bottom-right corner.
    BrTl,
    /// Row-major over the horizontally mirrored map.
    TrBl,
    /// Reverse of [`ScanDirection::TrBl`].
    BlTr,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::TlBr,
        ScanDirection::BrTl,
        ScanDirection::TrBl,
        ScanDirection::BlTr,
    ];

    /// Spatial index (`y * w + x`) visited at each sequence step.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let mirrored = || (0..h).flat_map(move |y| (0..w).rev().map(move |x| y * w + x));
        match self {
            ScanDirection::TlBr => (0..h * w).collect(),
            ScanDirection::BrTl => (0..h * w).rev().collect(),
            ScanDirection::TrBl => mirrored().collect(),
            ScanDirection::BlTr => {
                let mut v: Vec<usize> = mirrored().collect();
                v.reverse();
                v
            }
        }
    }

    /// The direction that traverses a 180°-rotated map the way `self`
    /// traverses the original.
    pub fn rotated_180(self) -> Self {
        match self {
            ScanDirection::TlBr => ScanDirection::BrTl,
            ScanDirection::BrTl => ScanDirection::TlBr,
            ScanDirection::TrBl => ScanDirection::BlTr,
            ScanDirection::BlTr => ScanDirection::TrBl,
        }
    }
}

/// `(B, C, H, W)` → `(B, H·W, C)` in the traversal order of `dir`.
pub fn flatten_directional(x: &Tensor, dir: ScanDirection) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let order = dir.order(h, w);
    let plane = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for bi in 0..b {
        let base = bi * c * plane;
        for &pos in &order {
            out.extend((0..c).map(|ci| x.data()[base + ci * plane + pos]));
        }
    }
    Tensor::new(&[b, plane, c], out)
}

/// Inverse of [`flatten_directional`].
pub fn unflatten_directional(seq: &Tensor, dir: ScanDirection, h: usize, w: usize) -> Result<Tensor> {
    let (b, l, c) = match seq.shape() {
        [b, l, c] => (*b, *l, *c),
        s => return Err(Error::shape("unflatten_directional", s, &[0, h * w, 0])),
    };
    if l != h * w {
        return Err(Error::LengthMismatch { got: l, h, w });
    }
    let order = dir.order(h, w);
    let plane = h * w;
    let mut out = vec![0.0; seq.numel()];
    for bi in 0..b {
        for (step, &pos) in order.iter().enumerate() {
            for ci in 0..c {
                out[(bi * c + ci) * plane + pos] = seq.data()[(bi * l + step) * c + ci];
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

/// Selective parameters for one traversal: `delta` `(B, D, H, W)`,
/// `b`/`c` `(B, N, H, W)`, `a` `(D, N)`.
#[derive(Clone, Copy, Debug)]
pub struct DirectionParams<'t> {
    pub delta: Var<'t>,
    pub b: Var<'t>,
    pub c: Var<'t>,
    pub a: Var<'t>,
}

/// Scans `u` in all four directions and averages the restored maps.
/// `params` holds one shared set or one set per direction, in
/// [`ScanDirection::ALL`] order.
pub fn multi_direction_ssm<'t>(
    u: Var<'t>,
    params: &[DirectionParams<'t>],
    disc: Discretization,
) -> Result<Var<'t>> {
    if params.len() != 1 && params.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "expected 1 or 4 parameter sets, got {}",
            params.len()
        )));
    }
    let (_, _, h, w) = u.dims4()?;
    let mut acc: Option<Var<'t>> = None;
    for (k, dir) in ScanDirection::ALL.iter().enumerate() {
        let p = params[k % params.len()];
        let y = selective_scan_op(u, p.delta, p.a, p.b, p.c, disc, Rc::new(dir.order(h, w)))?;
        acc = Some(match acc {
            Some(s) => s.add(y)?,
            None => y,
        });
    }
    Ok(acc.expect("four directions").scale(0.25))
}
