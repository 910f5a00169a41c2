//! Central finite-difference gradient verification.
//!
//! The checker only ever evaluates forward passes for the numeric side, so
//! it stays independent of every backward rule it audits.
//!
//! Operations such as relu, max pooling and bilinear sampling are only
//! piecewise smooth. A central difference whose two evaluations fall on
//! different pieces does not estimate the derivative, so such probes are
//! detected through [`Graph::piece_signature`], counted as skipped and
//! replaced by another coordinate.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{AsrError, Result};

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub step: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    /// Maximum number of coordinates probed per input (all if smaller).
    pub probes_per_input: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            probes_per_input: 24,
        }
    }
}

/// Result of one gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub probes: usize,
    /// Probes discarded because the stencil crossed a kink.
    pub skipped: usize,
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences, for every input tensor.
///
/// `f` receives a fresh graph and one leaf per input and must return a
/// scalar. Inputs are always recorded in 64-bit.
pub fn check<R: Rng + ?Sized>(
    inputs: &[Tensor<f64>],
    cfg: FdConfig,
    rng: &mut R,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<FdReport> {
    let eval = |vals: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).item(), g.piece_signature()))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.piece_signature();
    g.backward(out)?;
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        probes: 0,
        skipped: 0,
    };
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = match g.grad(*v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(inputs[k].shape()),
        };
        if !analytic.all_finite() {
            return Err(AsrError::NonFinite(format!("analytic gradient of input {k}")));
        }
        let n = inputs[k].len();
        let mut idx: Vec<usize> = if n <= cfg.probes_per_input {
            (0..n).collect()
        } else {
            sample(rng, n, cfg.probes_per_input).into_vec()
        };
        let mut spare = 4 * cfg.probes_per_input;
        while let Some(i) = idx.pop() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + cfg.step;
            let (plus, sig_plus) = eval(&work)?;
            work[k].data_mut()[i] = orig - cfg.step;
            let (minus, sig_minus) = eval(&work)?;
            work[k].data_mut()[i] = orig;
            if sig_plus != base || sig_minus != base {
                report.skipped += 1;
                if n > cfg.probes_per_input && spare > 0 {
                    spare -= 1;
                    idx.push(rng.gen_range(0..n));
                }
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(analytic.data()[i], numeric, cfg.floor);
            report.probes += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_input = k;
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Random projection `sum(w * y)` with fixed weights, turning any tensor
/// output into a scalar whose gradient touches every element.
pub fn project(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}
