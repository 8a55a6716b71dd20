//! Batched inference and dataset-level metric reports.

use rayon::prelude::*;

use crate::autodiff::{interpolate, InterpMode, Tape};
use crate::config::{AuxSource, Mode};
use crate::error::{Error, Result};
use crate::metrics::{image_metrics, MetricReport, Pair};
use crate::model::Model;
use crate::nn::Ctx;
use crate::synth::{misalign, stack, SyntheticSample};
use crate::tensor::Tensor;

pub const EVAL_BATCH: usize = 8;
pub const THREADS_ENV: &str = "MULTICOS_THREADS";

/// Foreground probability at input resolution: `σ(p_s¹)` resized
/// bilinearly. `aux` is `None` when the auxiliary input is withheld.
pub fn predict_batch(model: &Model, rgb: &Tensor, aux: Option<&Tensor>, source: AuxSource) -> Result<Tensor> {
    let (_, _, h, w) = rgb.dims4()?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store, false);
    let x_i = tape.constant(rgb.clone());
    let x_u = match model.config.mode {
        Mode::Dual => aux.map(|a| tape.constant(a.clone())),
        Mode::RgbOnly => None,
    };
    let out = model.forward(&ctx, x_i, x_u, source)?;
    let p1 = out.seg.masks[0];
    let (_, _, ph, pw) = p1.dims4()?;
    let logits = if (ph, pw) == (h, w) {
        p1
    } else {
        interpolate(p1, h, w, InterpMode::Bilinear)?
    };
    Ok((*logits.sigmoid().value()).clone())
}

/// Thread pool honoring `MULTICOS_THREADS`.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(|e| Error::Config(e.to_string()))
}

/// How the auxiliary input is presented at test time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub source: AuxSource,
    /// Withhold the sensed auxiliary image.
    pub withhold_aux: bool,
    /// Top-left crop fraction applied to the auxiliary image.
    pub crop: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            source: AuxSource::Real,
            withhold_aux: false,
            crop: 1.0,
        }
    }
}

/// Per-sample probability maps `(1, H, W)`, in sample order.
pub fn predict(model: &Model, samples: &[SyntheticSample], opts: &EvalOptions) -> Result<Vec<Tensor>> {
    let prepared: Vec<SyntheticSample> = if opts.crop < 1.0 {
        samples.iter().map(|s| misalign(s, opts.crop)).collect::<Result<_>>()?
    } else {
        samples.to_vec()
    };
    let chunks: Vec<&[SyntheticSample]> = prepared.chunks(EVAL_BATCH).collect();
    let pool = thread_pool()?;
    let outs: Vec<Result<Vec<Tensor>>> = pool.install(|| {
        chunks
            .par_iter()
            .map(|chunk| {
                let rgb = stack(&chunk.iter().map(|s| &s.rgb).collect::<Vec<_>>())?;
                let aux = stack(&chunk.iter().map(|s| &s.aux).collect::<Vec<_>>())?;
                let aux = (!opts.withhold_aux).then_some(&aux);
                let probs = predict_batch(model, &rgb, aux, opts.source)?;
                let (_, _, h, w) = probs.dims4()?;
                (0..chunk.len())
                    .map(|i| probs.batch_item(i).reshape(&[1, h, w]))
                    .collect()
            })
            .collect()
    });
    let mut flat = Vec::with_capacity(samples.len());
    for o in outs {
        flat.extend(o?);
    }
    Ok(flat)
}

/// Metrics of predictions against sample masks, reduced in sample order.
pub fn score(name: &str, preds: &[Tensor], samples: &[SyntheticSample]) -> Result<MetricReport> {
    if preds.len() != samples.len() {
        return Err(Error::shape("score", &[preds.len()], &[samples.len()]));
    }
    let pool = thread_pool()?;
    let images = pool.install(|| {
        preds
        .par_iter()
        .zip(samples)
        .map(|(p, s)| {
            let (_, h, w) = match *s.mask.shape() {
                [c, h, w] => (c, h, w),
                _ => return Err(Error::InvalidDimensions("mask must be (1, H, W)".into())),
            };
            Ok(image_metrics(&Pair::new(p.data(), s.mask.data(), h, w)?))
        })
        .collect::<Result<Vec<_>>>()
    })?;
    MetricReport::aggregate(name, &images)
}

pub fn evaluate(model: &Model, name: &str, samples: &[SyntheticSample], opts: &EvalOptions) -> Result<MetricReport> {
    let preds = predict(model, samples, opts)?;
    score(name, &preds, samples)
}
