//! Central finite-difference gradient checker.

use super::graph::{Graph, Var};
use super::tensor::Params;
use crate::error::{Error, Result};

/// Default finite-difference step in double precision.
pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
    /// Coordinates whose stencil crossed a rectifier or clamp kink; these are
    /// left out of the comparison.
    pub kinks_skipped: usize,
    /// Coordinates whose derivative is below the finite-difference noise
    /// floor; these are compared in absolute terms against that floor.
    pub below_resolution: usize,
    /// Largest `|analytic − numeric| / floor` among those coordinates.
    pub max_floor_ratio: f64,
    /// Set when the function was not finite at some perturbed point.
    pub failure: Option<String>,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest share of coordinates that may be skipped at kinks before the
/// check counts as failed.
pub const MAX_KINK_FRACTION: f64 = 0.05;

/// Rounding error assumed in one evaluation of the objective, in units of
/// its last place.
pub const ROUNDOFF_ULPS: f64 = 16.0;

/// Absolute error a central difference can carry from rounding alone.
pub fn noise_floor(plus: f64, minus: f64, step: f64) -> f64 {
    ROUNDOFF_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * step)
}

fn evaluate<F>(f: &mut F, params: &Params) -> Result<(f64, Vec<bool>)>
where
    F: FnMut(&mut Graph, &Params) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    Ok((v, g.kink_pattern()))
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// `(f(p+δ) − f(p−δ)) / 2δ` for every coordinate of every parameter.
///
/// A coordinate whose perturbed evaluations land on a different linear piece
/// of some rectifier or clamp than the unperturbed one is skipped; the check
/// fails if more than [`MAX_KINK_FRACTION`] of coordinates are skipped.
///
/// Derivatives too small for the difference quotient to resolve to within
/// `tolerance` (see [`noise_floor`]) must instead agree to within the floor.
pub fn grad_check<F>(mut f: F, params: &Params, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &Params) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Param(format!("finite-difference step must be positive, got {step}")));
    }
    if params.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::Param("parameters must be finite".into()));
    }

    let mut work = params.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &work)?;
    let base_pattern = g.kink_pattern();
    let grads = g.backward(loss)?;
    g.accumulate(&grads, &mut work);
    let analytic = work.grads();
    work.zero_grad();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coords_checked: 0,
        kinks_skipped: 0,
        below_resolution: 0,
        max_floor_ratio: 0.0,
        failure: None,
        pass: true,
    };
    for id in params.ids() {
        for j in 0..params.get(id).numel() {
            let orig = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let plus = evaluate(&mut f, &work);
            work.get_mut(id).data_mut()[j] = orig - step;
            let minus = evaluate(&mut f, &work);
            work.get_mut(id).data_mut()[j] = orig;
            let ((plus, pp), (minus, pm)) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    report.failure = Some(format!("{}[{j}]: {e}", params.name(id)));
                    report.pass = false;
                    return Ok(report);
                }
            };
            if pp != base_pattern || pm != base_pattern {
                report.kinks_skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[id.index()][j];
            report.coords_checked += 1;
            let floor = noise_floor(plus, minus, step);
            if a.abs() + numeric.abs() <= floor / tolerance {
                report.below_resolution += 1;
                report.max_floor_ratio = report.max_floor_ratio.max((a - numeric).abs() / floor);
                continue;
            }
            let err = relative_error(a, numeric);
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((params.name(id).to_string(), j));
                report.worst_values = (a, numeric);
            }
        }
    }
    let total = report.coords_checked + report.kinks_skipped;
    report.pass = report.max_rel_err <= tolerance
        && report.max_floor_ratio <= 1.0
        && report.coords_checked > 0
        && report.kinks_skipped as f64 <= MAX_KINK_FRACTION * total as f64;
    Ok(report)
}
