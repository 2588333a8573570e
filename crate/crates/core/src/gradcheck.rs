//! Finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::linalg::Matrix;

/// Entries whose analytic and numeric derivatives are both below this are
/// compared in absolute rather than relative terms.
pub const ABS_FLOOR: f64 = 1e-7;

/// Maximum over all parameter entries of
/// `|analytic − numeric| / (max(|analytic|, |numeric|) + ABS_FLOOR)`,
/// with the numeric derivative from central differences of step `h`.
///
/// `f` builds the scalar on a fresh tape from parameter leaves.
pub fn grad_check<'a, F>(params: &[Matrix], h: f64, f: F) -> f64
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Var,
{
    grad_check_detailed(params, h, f).max_rel_error
}

/// Where the worst disagreement occurred.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn grad_check_detailed<'a, F>(params: &[Matrix], h: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Var,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let root = f(&mut tape, &vars);
        tape.backward(root).collect(&vars)
    };
    let eval = |ps: &[Matrix]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let root = f(&mut tape, &vars);
        tape.value(root).item()
    };
    let mut work: Vec<Matrix> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        param: 0,
        entry: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for p in 0..params.len() {
        for e in 0..params[p].len() {
            let orig = params[p].as_slice()[e];
            work[p].as_mut_slice()[e] = orig + h;
            let up = eval(&work);
            work[p].as_mut_slice()[e] = orig - h;
            let down = eval(&work);
            work[p].as_mut_slice()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[p].as_slice()[e];
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + ABS_FLOOR);
            if rel > report.max_rel_error || rel.is_nan() {
                report = GradCheckReport {
                    max_rel_error: if rel.is_nan() { f64::INFINITY } else { rel },
                    param: p,
                    entry: e,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    report
}
