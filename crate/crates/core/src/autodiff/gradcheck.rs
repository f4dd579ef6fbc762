//! Central finite-difference gradient checking.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{PawsError, Result};

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so entries whose true gradient is zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub max_rel_error: f64,
    /// Flat index of the entry with the largest error.
    pub worst_index: usize,
    /// Flat indices whose error exceeds the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged.is_empty())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, params: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss);
    if v.shape() != (1, 1) {
        return Err(PawsError::Shape(format!("grad_check loss is {}x{}", v.rows(), v.cols())));
    }
    Ok(v.item())
}

/// Compares the tape's gradients of `f` against central differences with step `h`.
///
/// `f` must build the same scalar loss every time it is called with the same
/// parameter values; this is verified by evaluating it twice.
pub fn grad_check<F>(f: F, params: &[Matrix], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let first = tape.value(loss).item();
    let second = eval(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(PawsError::Determinism(format!("loss evaluated to {first:e} and then {second:e}")));
    }
    tape.backward(loss)?;

    let mut reports = Vec::with_capacity(params.len());
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, &var) in vars.iter().enumerate() {
        let analytic = tape.grad(var);
        let mut report = ParamReport { max_rel_error: 0.0, worst_index: 0, flagged: Vec::new() };
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + h;
            let up = eval(&f, &work)?;
            work[pi].data_mut()[k] = orig - h;
            let down = eval(&f, &work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_error(analytic.data()[k], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = k;
            }
            if err > tol || !err.is_finite() {
                report.flagged.push(k);
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport { params: reports, tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_to_rounding() {
        let w = Matrix::from_fn(3, 2, |i, j| i as f64 - 0.7 * j as f64 + 0.3);
        let report = grad_check(
            |t, p| {
                let sq = t.hadamard(p[0], p[0])?;
                Ok(t.sum(sq))
            },
            &[w],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_rule_is_flagged() {
        let x = Matrix::from_fn(2, 3, |i, j| 0.3 * i as f64 + 0.1 * j as f64 + 0.2);
        let report = grad_check(
            |t, p| {
                let v = t.value(p[0]).map(|a| a * a);
                // claims d(x²)/dx = x instead of 2x
                let sq = t.custom(&[p[0]], v, Box::new(|g, xs, _| vec![g.zip_map(xs[0], |gi, xi| gi * xi).unwrap()]));
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.params[0].flagged.len(), 6);
    }

    #[test]
    fn nondeterministic_builder_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let err = grad_check(
            |t, p| {
                calls.set(calls.get() + 1.0);
                let s = t.sum(p[0]);
                Ok(t.add_scalar(s, calls.get()))
            },
            &[Matrix::zeros(1, 1)],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, PawsError::Determinism(_)));
    }
}
