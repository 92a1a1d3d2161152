//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest `|a - n| / max(|a|, |n|)` among elements whose absolute error
    /// exceeds the floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest relative error among elements with a gradient of magnitude
    /// at least [`LARGE_GRADIENT`], whether or not they are under the floor.
    pub max_rel_err_large: f64,
}

pub const LARGE_GRADIENT: f64 = 1e-4;

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.max_rel_err_large = self.max_rel_err_large.max(other.max_rel_err_large);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Elements with `|analytic - numeric|` at or below this always pass.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-5,
            abs_floor: 1e-8,
        }
    }
}

/// Compares backward-pass gradients of `loss_fn` against central
/// differences for every element of every input.
///
/// `loss_fn` receives the inputs as tape vars and must return a scalar.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    config: GradCheckConfig,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = loss_fn(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(loss_fn(&tape, &vars)?.value().item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + config.step;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - config.step;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            report.merge(&compare(grad.data()[i], numeric, config));
        }
    }
    Ok(report)
}

fn compare(a: f64, n: f64, config: GradCheckConfig) -> GradCheckReport {
    let abs = (a - n).abs();
    let mut r = GradCheckReport {
        checked: 1,
        max_abs_err: abs,
        ..Default::default()
    };
    let scale = a.abs().max(n.abs());
    if scale >= LARGE_GRADIENT {
        r.max_rel_err_large = abs / scale;
    }
    if !abs.is_finite() {
        r.failures = 1;
        r.max_rel_err = f64::INFINITY;
    } else if abs > config.abs_floor {
        let rel = abs / a.abs().max(n.abs());
        r.max_rel_err = rel;
        if rel >= config.rel_tol {
            r.failures = 1;
        }
    }
    r
}
