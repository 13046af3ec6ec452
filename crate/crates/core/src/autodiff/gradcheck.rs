use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    /// Coordinates where the function was non-finite at a perturbed point.
    pub non_finite: Vec<usize>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_err < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_coords(f, point, eps, 0..point.len())
}

/// Like [`grad_check`] but only perturbs the listed coordinates.
pub fn grad_check_coords<F, I>(f: F, point: &Tensor, eps: f64, coords: I) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    I: IntoIterator<Item = usize>,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.wrt(x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::inference();
        let x = t.leaf(p);
        let y = f(&mut t, x)?;
        Ok(t.value(y).item())
    };

    let mut report = GradCheckReport {
        coords: Vec::new(),
        non_finite: Vec::new(),
        max_rel_err: 0.0,
    };
    for i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            report.non_finite.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel_err = relative_error(a, numeric);
        report.max_rel_err = report.max_rel_err.max(rel_err);
        report.coords.push(CoordCheck {
            index: i,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    Ok(report)
}
