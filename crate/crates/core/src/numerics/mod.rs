//! Dense matrices, a reverse-mode tape, and a finite-difference gradient
//! oracle.

mod matrix;
mod tape;

pub use matrix::{Matrix, Scalar};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};

use crate::causal_mask::AttnMask;
use crate::error::{Error, Result};

/// Row softmax restricted to the columns the mask allows.
///
/// Blocked columns are left out of both the max and the normalizer, so their
/// outputs are exactly zero.
pub fn softmax_masked<T: Scalar>(scores: &Matrix<T>, mask: &AttnMask) -> Result<Matrix<T>> {
    if scores.shape() != (mask.seq(), mask.seq()) {
        return Err(Error::Shape(format!(
            "scores {:?} vs mask {}x{}",
            scores.shape(),
            mask.seq(),
            mask.seq()
        )));
    }
    softmax_masked_grid(scores, mask.grid())
}

/// As [`softmax_masked`], over a raw row-major grid (0 = attend, 1 = blocked).
pub fn softmax_masked_grid<T: Scalar>(scores: &Matrix<T>, grid: &[u8]) -> Result<Matrix<T>> {
    let (rows, cols) = scores.shape();
    if grid.len() != rows * cols {
        return Err(Error::Shape(format!(
            "mask of {} cells vs {rows}x{cols} scores",
            grid.len()
        )));
    }
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let allowed = &grid[r * cols..(r + 1) * cols];
        let row = scores.row(r);
        let max = row
            .iter()
            .zip(allowed)
            .filter(|(_, &m)| m == 0)
            .map(|(&s, _)| s)
            .fold(None, |acc: Option<T>, s| Some(acc.map_or(s, |a| a.max(s))))
            .ok_or(Error::MalformedMask { row: r })?;
        let dst = out.row_mut(r);
        let mut total = T::zero();
        for c in 0..cols {
            if allowed[c] == 0 {
                let e = (row[c] - max).exp();
                dst[c] = e;
                total += e;
            }
        }
        for v in dst.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, flat entry)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients with central differences, entry by entry.
///
/// The relative error of each entry uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F, G>(f: F, grad: G, params: &[Matrix<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Matrix<f64>]) -> Result<f64>,
    G: Fn(&[Matrix<f64>]) -> Result<Vec<Matrix<f64>>>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let analytic = grad(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut work: Vec<Matrix<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, g) in analytic.iter().enumerate() {
        if g.shape() != params[pi].shape() {
            return Err(Error::Shape(format!(
                "gradient {pi} is {:?}, parameter is {:?}",
                g.shape(),
                params[pi].shape()
            )));
        }
        for e in 0..params[pi].len() {
            let orig = params[pi].as_slice()[e];
            work[pi].as_mut_slice()[e] = orig + eps;
            let plus = f(&work)?;
            work[pi].as_mut_slice()[e] = orig - eps;
            let minus = f(&work)?;
            work[pi].as_mut_slice()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Eval(format!(
                    "non-finite objective perturbing parameter {pi} entry {e}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = g.as_slice()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, e));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
