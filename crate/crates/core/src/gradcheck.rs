//! Central finite-difference verification of tape gradients.

use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

/// Worst discrepancy found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Entries left out because the perturbation crossed a kink.
    pub skipped: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
///
/// The floor keeps entries whose true gradient is zero from dividing
/// round-off by round-off.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Default denominator floor for [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Settings for [`check_gradients_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Subsampling of entries (1 checks every entry).
    pub stride: usize,
    /// Denominator floor of [`relative_error`].
    pub floor: f64,
    /// Skip entries whose `x +- eps` evaluations take a different branch of
    /// some non-smooth op (see [`Graph::branch_signature`]) than `x` itself.
    /// Central differences are not an oracle across a kink.
    pub skip_kinks: bool,
    /// Raise the floor to `1e4 * f64::EPSILON * |f(x)| / eps`, the scale
    /// below which central differences are dominated by cancellation in
    /// `f(x + eps) - f(x - eps)`.
    pub roundoff_floor: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            stride: 1,
            floor: REL_ERR_FLOOR,
            skip_kinks: false,
            roundoff_floor: false,
        }
    }
}

/// Compares backward gradients of `f` against central differences with
/// step `eps`. `f` receives the inputs as trainable leaves and returns a
/// scalar. `stride` subsamples entries (1 checks every entry).
pub fn check_gradients<F, E>(f: F, inputs: &[Tensor], eps: f64, stride: usize) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    check_gradients_with(f, inputs, GradCheckOptions { eps, stride, ..Default::default() })
}

pub fn check_gradients_with<F, E>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base_sig = g.branch_signature();
    let mut floor = opts.floor;
    if opts.roundoff_floor {
        floor = floor.max(1e4 * f64::EPSILON * g.scalar(out).abs() / opts.eps);
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<(f64, u64), E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let sig = if opts.skip_kinks { g.branch_signature() } else { 0 };
        Ok((g.scalar(out), sig))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for idx in (0..t.len()).step_by(opts.stride.max(1)) {
            let orig = t.data()[idx];
            work[ti].data_mut()[idx] = orig + opts.eps;
            let (fp, sp) = eval(&work)?;
            work[ti].data_mut()[idx] = orig - opts.eps;
            let (fm, sm) = eval(&work)?;
            work[ti].data_mut()[idx] = orig;
            if opts.skip_kinks && (sp != base_sig || sm != base_sig) {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[ti][idx];
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                report.worst_input = ti;
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
