//! Evaluation metrics on single-channel predictions in `[0, 1]` against
//! binary ground truth, plus dataset-level aggregation and reporting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;

/// A prediction map paired with its ground truth, both row-major `h × w`.
#[derive(Clone, Copy, Debug)]
pub struct Pair<'a> {
    pub pred: &'a [f64],
    pub gt: &'a [f64],
    pub h: usize,
    pub w: usize,
}

impl<'a> Pair<'a> {
    pub fn new(pred: &'a [f64], gt: &'a [f64], h: usize, w: usize) -> Result<Self> {
        if pred.len() != gt.len() || pred.len() != h * w {
            return Err(Error::shape("metric", &[pred.len()], &[gt.len(), h, w]));
        }
        if let Some(v) = pred.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::DomainError(format!("prediction {v} outside [0, 1]")));
        }
        if let Some(v) = gt.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::DomainError(format!("ground truth {v} is not binary")));
        }
        Ok(Self { pred, gt, h, w })
    }

    fn fg(&self) -> usize {
        self.gt.iter().filter(|&&g| g > 0.5).count()
    }
}

/// Threshold `i` of the uniform grid; a pixel is positive when `pred > t`.
pub fn threshold(i: usize) -> f64 {
    i as f64 / THRESHOLDS as f64
}

pub fn metric_mae(p: &Pair) -> f64 {
    p.pred.iter().zip(p.gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.pred.len() as f64
}

fn f_beta(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    (1.0 + BETA2) * precision * recall / (BETA2 * precision + recall)
}

fn f_binary(gt: &[f64], positive: impl Fn(usize) -> bool) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (i, &g) in gt.iter().enumerate() {
        match (positive(i), g > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    f_beta(tp, fp, fn_)
}

/// F-measure at every threshold of the grid.
pub fn fmeasure_curve(p: &Pair) -> Vec<f64> {
    (0..THRESHOLDS)
        .map(|i| {
            let t = threshold(i);
            f_binary(p.gt, |k| p.pred[k] > t)
        })
        .collect()
}

/// F-measure at the adaptive threshold `min(2·mean(pred), 1)`.
pub fn fmeasure_adaptive(p: &Pair) -> f64 {
    let mean = p.pred.iter().sum::<f64>() / p.pred.len() as f64;
    let t = (2.0 * mean).min(1.0);
    f_binary(p.gt, |k| p.pred[k] >= t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveKind {
    Max,
    Mean,
    Adaptive,
}

pub fn metric_fmeasure(p: &Pair, kind: CurveKind) -> f64 {
    match kind {
        CurveKind::Adaptive => fmeasure_adaptive(p),
        k => reduce_curve(&fmeasure_curve(p), k),
    }
}

fn reduce_curve(curve: &[f64], kind: CurveKind) -> f64 {
    match kind {
        CurveKind::Max => curve.iter().copied().fold(0.0, f64::max),
        _ => curve.iter().sum::<f64>() / curve.len() as f64,
    }
}

/// Enhanced-alignment score of a binary map against the ground truth,
/// averaged over pixels.
fn e_binary(gt: &[f64], fm: &[bool]) -> f64 {
    let n = gt.len() as f64;
    let fg = gt.iter().filter(|&&g| g > 0.5).count();
    let on = fm.iter().filter(|&&b| b).count();
    if fg == 0 {
        return 1.0 - on as f64 / n;
    }
    if fg == gt.len() {
        return on as f64 / n;
    }
    let mf = on as f64 / n;
    let mg = fg as f64 / n;
    let mut sum = 0.0;
    for (&g, &f) in gt.iter().zip(fm) {
        let a = f64::from(u8::from(f)) - mf;
        let b = g - mg;
        let den = a * a + b * b;
        let xi = if den > 0.0 { 2.0 * a * b / den } else { 0.0 };
        sum += (xi + 1.0) * (xi + 1.0) / 4.0;
    }
    sum / n
}

pub fn emeasure_curve(p: &Pair) -> Vec<f64> {
    let mut fm = vec![false; p.pred.len()];
    (0..THRESHOLDS)
        .map(|i| {
            let t = threshold(i);
            for (b, &v) in fm.iter_mut().zip(p.pred) {
                *b = v > t;
            }
            e_binary(p.gt, &fm)
        })
        .collect()
}

pub fn metric_emeasure(p: &Pair, kind: CurveKind) -> Result<f64> {
    if kind == CurveKind::Adaptive {
        return Err(Error::InvalidArgument("E-measure supports max and mean".into()));
    }
    Ok(reduce_curve(&emeasure_curve(p), kind))
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    (mean, var.sqrt(), n)
}

fn object_score(pred: &[f64], region: &[bool], invert: bool) -> f64 {
    let vals = pred
        .iter()
        .zip(region)
        .filter(|(_, &r)| r)
        .map(move |(&v, _)| if invert { 1.0 - v } else { v });
    let (x, sigma, n) = mean_std(vals);
    if n == 0 {
        return 0.0;
    }
    2.0 * x / (x * x + 1.0 + sigma)
}

fn s_object(p: &Pair) -> f64 {
    let fg: Vec<bool> = p.gt.iter().map(|&g| g > 0.5).collect();
    let bg: Vec<bool> = fg.iter().map(|&b| !b).collect();
    let n_fg = fg.iter().filter(|&&b| b).count() as f64;
    let n = p.gt.len() as f64;
    (n_fg * object_score(p.pred, &fg, false) + (n - n_fg) * object_score(p.pred, &bg, true)) / n
}

/// Structural similarity of one rectangular block.
fn ssim_block(p: &Pair, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
    let idx = || (y0..y1).flat_map(move |y| (x0..x1).map(move |x| y * p.w + x));
    let n = ((y1 - y0) * (x1 - x0)) as f64;
    let mx = idx().map(|i| p.pred[i]).sum::<f64>() / n;
    let my = idx().map(|i| p.gt[i]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in idx() {
        let (a, b) = (p.pred[i] - mx, p.gt[i] - my);
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let dof = if n > 1.0 { n - 1.0 } else { 1.0 };
    let (sxx, syy, sxy) = (sxx / dof, syy / dof, sxy / dof);
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sxx + syy);
    if alpha != 0.0 {
        if beta != 0.0 {
            alpha / beta
        } else {
            0.0
        }
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Ground-truth centroid (row, column), rounded to the nearest pixel
/// boundary.
fn centroid(p: &Pair) -> (usize, usize) {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for y in 0..p.h {
        for x in 0..p.w {
            if p.gt[y * p.w + x] > 0.5 {
                sy += y as f64 + 0.5;
                sx += x as f64 + 0.5;
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        return (p.h / 2, p.w / 2);
    }
    ((sy / n).round() as usize, (sx / n).round() as usize)
}

fn s_region(p: &Pair) -> f64 {
    let (cy, cx) = centroid(p);
    let blocks = [(0, cy, 0, cx), (0, cy, cx, p.w), (cy, p.h, 0, cx), (cy, p.h, cx, p.w)];
    let mut acc = 0.0;
    for (y0, y1, x0, x1) in blocks {
        let area = (y1 - y0) * (x1 - x0);
        if area > 0 {
            acc += area as f64 * ssim_block(p, y0, y1, x0, x1);
        }
    }
    acc / (p.h * p.w) as f64
}

/// Structure measure `α·S_object + (1−α)·S_region`.
pub fn metric_smeasure(p: &Pair) -> f64 {
    let fg = p.fg();
    let n = p.gt.len();
    let mean_pred = p.pred.iter().sum::<f64>() / n as f64;
    if fg == 0 {
        return 1.0 - mean_pred;
    }
    if fg == n {
        return mean_pred;
    }
    (S_ALPHA * s_object(p) + (1.0 - S_ALPHA) * s_region(p)).max(0.0)
}

/// Every metric for one image; curves are kept for dataset-level reduction.
#[derive(Clone, Debug)]
pub struct ImageMetrics {
    pub mae: f64,
    pub f_curve: Vec<f64>,
    pub f_adp: f64,
    pub e_curve: Vec<f64>,
    pub s: f64,
}

pub fn image_metrics(p: &Pair) -> ImageMetrics {
    ImageMetrics {
        mae: metric_mae(p),
        f_curve: fmeasure_curve(p),
        f_adp: fmeasure_adaptive(p),
        e_curve: emeasure_curve(p),
        s: metric_smeasure(p),
    }
}

/// Dataset-level metrics. Curves are averaged over images before the max
/// and mean over thresholds are taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "F_max")]
    pub f_max: f64,
    #[serde(rename = "F_mean")]
    pub f_mean: f64,
    #[serde(rename = "F_adp")]
    pub f_adp: f64,
    #[serde(rename = "E_max")]
    pub e_max: f64,
    #[serde(rename = "E_mean")]
    pub e_mean: f64,
    #[serde(rename = "S")]
    pub s: f64,
}

/// Field names of a serialized [`MetricReport`].
pub const REPORT_FIELDS: [&str; 8] = ["dataset", "M", "F_max", "F_mean", "F_adp", "E_max", "E_mean", "S"];

impl MetricReport {
    /// Reduces per-image metrics in the given order.
    pub fn aggregate(dataset: &str, images: &[ImageMetrics]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("no images to aggregate".into()));
        }
        let n = images.len() as f64;
        let mean = |f: &dyn Fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
        let avg_curve = |f: &dyn Fn(&ImageMetrics) -> &[f64]| -> Vec<f64> {
            (0..THRESHOLDS).map(|t| images.iter().map(|m| f(m)[t]).sum::<f64>() / n).collect()
        };
        let f = avg_curve(&|m| &m.f_curve);
        let e = avg_curve(&|m| &m.e_curve);
        Ok(Self {
            dataset: dataset.to_string(),
            m: mean(&|m| m.mae),
            f_max: reduce_curve(&f, CurveKind::Max),
            f_mean: reduce_curve(&f, CurveKind::Mean),
            f_adp: mean(&|m| m.f_adp),
            e_max: reduce_curve(&e, CurveKind::Max),
            e_mean: reduce_curve(&e, CurveKind::Mean),
            s: mean(&|m| m.s),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn values(&self) -> [f64; 7] {
        [self.m, self.f_max, self.f_mean, self.f_adp, self.e_max, self.e_mean, self.s]
    }
}

/// Aligned plain-text table with one row per report.
pub fn format_table(rows: &[MetricReport]) -> String {
    let width = rows.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<width$}", "dataset");
    for name in &REPORT_FIELDS[1..] {
        out.push_str(&format!(" {name:>7}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<width$}", r.dataset));
        for v in r.values() {
            out.push_str(&format!(" {v:>7.4}"));
        }
        out.push('\n');
    }
    out
}
