use nalgebra::{DMatrix, DVector};

use super::fit::FitResult;
use super::matrices::ModelMatrices;
use super::structure::{eval_gls, reml_objective};
use crate::{Error, Result};

const REL_STEP: f64 = 1e-4;

/// `c' (X' V^{-1} X)^{-1} c` at the given variance components.
fn contrast_variance(mats: &ModelMatrices, v: &[f64; 3], contrast: &DVector<f64>) -> Result<f64> {
    let eval = eval_gls(mats, v[0] / v[2], v[1] / v[2], false);
    let chol = eval
        .xhx
        .cholesky()
        .ok_or(Error::NumericalBreakdown(v[0], v[1], v[2]))?;
    Ok(v[2] * contrast.dot(&chol.solve(contrast)))
}

/// Satterthwaite degrees of freedom for a contrast of the fixed effects,
/// `2 f^2 / (g' A g)` with `f = c' Var(b) c`, `g` its gradient in the
/// variance components and `A` the inverse negative Hessian of the REML
/// log-likelihood. Both derivatives use central differences.
///
/// Components fitted at the zero boundary are held fixed.
pub fn satterthwaite_df_model(
    mats: &ModelMatrices,
    fit: &FitResult,
    contrast: &DVector<f64>,
) -> Result<f64> {
    if !fit.converged {
        return Err(Error::DfUnavailable("fit did not converge".into()));
    }
    let base = fit.varcomps.as_array();
    let active: Vec<usize> = (0..3).filter(|&j| base[j] > 0.0).collect();
    let steps: Vec<f64> = active.iter().map(|&j| REL_STEP * base[j]).collect();
    let shifted = |moves: &[(usize, f64)]| {
        let mut v = base;
        for &(a, d) in moves {
            v[active[a]] += d;
        }
        v
    };

    let f0 = contrast_variance(mats, &base, contrast)?;
    let m = active.len();
    let mut grad = DVector::zeros(m);
    for a in 0..m {
        let up = contrast_variance(mats, &shifted(&[(a, steps[a])]), contrast)?;
        let dn = contrast_variance(mats, &shifted(&[(a, -steps[a])]), contrast)?;
        grad[a] = (up - dn) / (2.0 * steps[a]);
    }

    let l = |moves: &[(usize, f64)]| reml_objective(shifted(moves), mats);
    let l0 = l(&[])?;
    let mut hess = DMatrix::zeros(m, m);
    for a in 0..m {
        let ha = steps[a];
        hess[(a, a)] = (l(&[(a, ha)])? - 2.0 * l0 + l(&[(a, -ha)])?) / (ha * ha);
        for b in 0..a {
            let hb = steps[b];
            let v = (l(&[(a, ha), (b, hb)])? - l(&[(a, ha), (b, -hb)])? - l(&[(a, -ha), (b, hb)])?
                + l(&[(a, -ha), (b, -hb)])?)
                / (4.0 * ha * hb);
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    let info = -hess;
    let chol = info
        .cholesky()
        .ok_or_else(|| Error::DfUnavailable("REML Hessian is not negative definite".into()))?;
    let denom = grad.dot(&chol.solve(&grad));
    let df = 2.0 * f0 * f0 / denom;
    if df.is_finite() && df > 0.0 {
        Ok(df)
    } else {
        Err(Error::DfUnavailable(format!("non-positive df {df}")))
    }
}
