//! Finite-difference verification of tape gradients at 64-bit.

use rayon::prelude::*;
use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step {0} outside [1e-7, 1e-4]")]
    EpsOutOfRange(f64),
    #[error("non-finite output when perturbing input {input}, element {element}")]
    NonFinite { input: usize, element: usize },
    #[error("non-finite output at the unperturbed point")]
    NonFiniteBase,
    #[error("checked function must return a 1x1 value, got {0:?}")]
    NotScalar((usize, usize)),
    #[error(transparent)]
    Build(#[from] crate::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error used throughout: `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(inputs: &[Matrix<f64>], f: &F) -> Result<f64, GradCheckError>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> crate::Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf_ref(m)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out) != (1, 1) {
        return Err(GradCheckError::NotScalar(tape.shape(out)));
    }
    Ok(tape.scalar(out))
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences, elementwise over every input.
///
/// Uses the fourth-order central stencil
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
pub fn grad_check<F>(inputs: &[Matrix<f64>], eps: f64, f: F) -> Result<GradCheckReport, GradCheckError>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> crate::Result<Var> + Sync,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(GradCheckError::EpsOutOfRange(eps));
    }
    let analytic: Vec<Matrix<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf_ref(m)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.shape(out) != (1, 1) {
            return Err(GradCheckError::NotScalar(tape.shape(out)));
        }
        if !tape.scalar(out).is_finite() {
            return Err(GradCheckError::NonFiniteBase);
        }
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, m)| grads.get_or_zeros(v, m.shape()))
            .collect()
    };

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, m)| (0..m.len()).map(move |e| (i, e)))
        .collect();

    let numeric: Vec<Result<f64, GradCheckError>> = coords
        .par_iter()
        .map(|&(i, e)| {
            let mut local = inputs.to_vec();
            let x0 = local[i].as_slice()[e];
            let mut at = |delta: f64| -> Result<f64, GradCheckError> {
                local[i].as_mut_slice()[e] = x0 + delta;
                let v = eval(&local, &f)?;
                if !v.is_finite() {
                    return Err(GradCheckError::NonFinite { input: i, element: e });
                }
                Ok(v)
            };
            let f2p = at(2.0 * eps)?;
            let f1p = at(eps)?;
            let f1m = at(-eps)?;
            let f2m = at(-2.0 * eps)?;
            // differences first, so an input the output ignores yields exactly 0
            Ok((8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * eps))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (&(i, e), n) in coords.iter().zip(numeric) {
        let n = n?;
        let a = analytic[i].as_slice()[e];
        let err = rel_err(a, n);
        if report.worst.is_none() || err > report.max_rel_err {
            report = GradCheckReport {
                max_rel_err: err,
                worst: Some((i, e)),
                analytic: a,
                numeric: n,
            };
        }
    }
    Ok(report)
}
