//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_elems_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_elems_per_input: None,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    pub fn sampled(mut self, n: usize) -> Self {
        self.max_elems_per_input = Some(n);
        self
    }
}

#[derive(Clone, Debug)]
pub struct ElementCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<ElementCheck>,
    pub failures: Vec<ElementCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Error between an analytic and a numeric derivative, relative to
/// `max(1, |analytic|, |numeric|)` so tiny gradients are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares tape gradients of the scalar `f(inputs)` with central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(opts.step > 0.0 && opts.step <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {} outside (0, 1e-2]",
            opts.step
        )));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.numel() != 1 {
            return Err(Error::NonScalarLoss(out.shape()));
        }
        Ok(out.item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        tol: opts.tol,
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
    };
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let indices: Vec<usize> = match opts.max_elems_per_input {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for idx in indices {
            let orig = input.data()[idx];
            work[k].data_mut()[idx] = orig + opts.step;
            let plus = eval(&work)?;
            work[k].data_mut()[idx] = orig - opts.step;
            let minus = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[k].data()[idx];
            let rel = relative_error(a, numeric);
            let check = ElementCheck {
                input: k,
                index: idx,
                analytic: a,
                numeric,
                rel_err: rel,
            };
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some(check.clone());
            }
            if !(rel < opts.tol) {
                report.failures.push(check);
            }
        }
    }
    Ok(report)
}
