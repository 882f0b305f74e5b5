use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::matrices::ModelMatrices;
use super::structure::{profile, profiled_gradient, CovStructure, Profiled};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Relative change of the REML criterion between iterations.
    pub rel_tol: f64,
    /// Gradient norm with respect to the square-root variance ratios.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Variance ratios below this value are reported as singular and set to 0.
    pub boundary_tol: f64,
    /// Starting variance ratios `(s2_c / s2_e, s2_d / s2_e)`.
    pub start: (f64, f64),
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            rel_tol: 1e-8,
            grad_tol: 1e-5,
            max_iter: 500,
            boundary_tol: 1e-6,
            start: (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarComps {
    pub cluster: f64,
    pub individual: f64,
    pub residual: f64,
}

impl VarComps {
    pub fn as_array(&self) -> [f64; 3] {
        [self.cluster, self.individual, self.residual]
    }
}

/// Cached per-cluster quantities consumed by the robust estimators.
#[derive(Debug, Clone)]
pub(crate) struct FitCache {
    /// `X_i' W_i X_i` with `W_i = V_i^{-1}`.
    pub cluster_info: Vec<DMatrix<f64>>,
    /// `X_i' W_i e_i` for marginal residuals `e_i = y_i - X_i b`.
    pub cluster_score: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    pub varcomps: VarComps,
    /// `(X' V^{-1} X)^{-1}` at the fitted variance components.
    pub vcov_model: DMatrix<f64>,
    pub reml_loglik: f64,
    pub converged: bool,
    pub singular: bool,
    pub n_iterations: usize,
    pub gradient_norm: f64,
    pub structure: CovStructure,
    /// Marginal residuals `y - X b`.
    pub residuals: DVector<f64>,
    pub(crate) cache: FitCache,
}

impl FitResult {
    pub fn theta_hat(&self, contrast: &DVector<f64>) -> f64 {
        contrast.dot(&self.beta_hat)
    }

    pub fn model_se(&self, contrast: &DVector<f64>) -> f64 {
        contrast.dot(&(&self.vcov_model * contrast)).max(0.0).sqrt()
    }

    /// `X_i' W_i X_i` for one cluster.
    pub fn cluster_information(&self, cluster: usize) -> &DMatrix<f64> {
        &self.cache.cluster_info[cluster]
    }

    /// `X_i' W_i e_i` for one cluster.
    pub fn cluster_score(&self, cluster: usize) -> &DVector<f64> {
        &self.cache.cluster_score[cluster]
    }
}

struct Point {
    phi: Vector2<f64>,
    prof: Profiled,
    grad: Vector2<f64>,
}

fn evaluate(mats: &ModelMatrices, phi: Vector2<f64>) -> Option<Point> {
    let (gc, gd) = (phi[0] * phi[0], phi[1] * phi[1]);
    let prof = profile(mats, gc, gd, false)?;
    let g = profiled_gradient(mats, gc, gd, &prof);
    let grad = Vector2::new(2.0 * phi[0] * g[0], 2.0 * phi[1] * g[1]);
    if !grad.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(Point { phi, prof, grad })
}

fn gradient_at(mats: &ModelMatrices, phi: Vector2<f64>) -> Option<Vector2<f64>> {
    evaluate(mats, phi).map(|p| p.grad)
}

/// Hessian of the profiled criterion in `phi` from central differences of
/// the analytic gradient.
fn hessian(mats: &ModelMatrices, phi: Vector2<f64>) -> Option<Matrix2<f64>> {
    let mut h = Matrix2::zeros();
    for j in 0..2 {
        let step = 1e-5 * phi[j].abs().max(1e-2);
        let mut up = phi;
        let mut dn = phi;
        up[j] += step;
        dn[j] -= step;
        let col = (gradient_at(mats, up)? - gradient_at(mats, dn)?) / (2.0 * step);
        h.set_column(j, &col);
    }
    Some((h + h.transpose()) * 0.5)
}

/// Ascent direction: Newton where the Hessian is negative definite,
/// otherwise a Levenberg-shifted Newton step.
fn direction(grad: &Vector2<f64>, hess: Option<Matrix2<f64>>) -> Vector2<f64> {
    if let Some(h) = hess {
        let neg = -h;
        let scale = neg.diagonal().abs().max().max(1e-12);
        let mut shift = 0.0;
        for _ in 0..30 {
            let m = neg + Matrix2::identity() * shift;
            if let Some(ch) = m.cholesky() {
                return ch.solve(grad);
            }
            shift = if shift == 0.0 {
                1e-6 * scale
            } else {
                shift * 10.0
            };
        }
    }
    *grad
}

/// Fit the model by maximizing the REML criterion over the nonnegative
/// variance components.
///
/// The residual variance is profiled out and the remaining ratios are
/// optimized on the square-root scale, which keeps the zero boundary
/// reachable. Non-convergence is reported in the result, not as an error.
pub fn fit_reml(mats: &ModelMatrices, opts: &FitOptions) -> Result<FitResult> {
    let start = Vector2::new(opts.start.0.max(0.0).sqrt(), opts.start.1.max(0.0).sqrt());
    let mut current = evaluate(mats, start)
        .or_else(|| evaluate(mats, Vector2::new(1.0, 1.0)))
        .ok_or_else(|| Error::NumericalBreakdown(opts.start.0, opts.start.1, f64::NAN))?;

    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let hess = hessian(mats, current.phi);
        let dir = direction(&current.grad, hess);
        let slope = current.grad.dot(&dir);
        // Below this predicted gain the criterion is dominated by rounding
        // and progress is judged by the gradient instead.
        let noise = 1e-11 * current.prof.loglik.abs().max(1.0);

        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-12 {
            if let Some(cand) = evaluate(mats, current.phi + dir * step) {
                let armijo = cand.prof.loglik >= current.prof.loglik + 1e-4 * step * slope.max(0.0);
                let flat = step * slope.abs() < noise
                    && cand.prof.loglik >= current.prof.loglik - noise
                    && cand.grad.norm() < current.grad.norm();
                if armijo || flat {
                    accepted = Some(cand);
                    break;
                }
            }
            step *= 0.5;
        }
        let Some(next) = accepted else {
            converged = current.grad.norm() < opts.grad_tol;
            break;
        };
        let change =
            (next.prof.loglik - current.prof.loglik).abs() / current.prof.loglik.abs().max(1.0);
        current = next;
        if change < opts.rel_tol && current.grad.norm() < opts.grad_tol {
            converged = true;
            break;
        }
    }

    let mut gc = current.phi[0] * current.phi[0];
    let mut gd = current.phi[1] * current.phi[1];
    let singular = gc < opts.boundary_tol || gd < opts.boundary_tol;
    if gc < opts.boundary_tol {
        gc = 0.0;
    }
    if gd < opts.boundary_tol {
        gd = 0.0;
    }
    let gradient_norm = current.grad.norm();
    let prof = profile(mats, gc, gd, true).ok_or(Error::NumericalBreakdown(
        gc,
        gd,
        current.prof.sigma2,
    ))?;
    finish(
        mats,
        prof,
        gc,
        gd,
        converged,
        singular,
        iterations,
        gradient_norm,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    mats: &ModelMatrices,
    prof: Profiled,
    gc: f64,
    gd: f64,
    converged: bool,
    singular: bool,
    n_iterations: usize,
    gradient_norm: f64,
) -> Result<FitResult> {
    let s2 = prof.sigma2;
    let structure = CovStructure {
        sigma2: s2,
        ratio_cluster: gc,
        ratio_individual: gd,
    };
    let residuals = &mats.y - &mats.x * &prof.beta;
    let cluster_info: Vec<DMatrix<f64>> = prof.eval.cluster_xhx.iter().map(|m| m / s2).collect();
    let cluster_score = prof
        .eval
        .cluster_xhy
        .iter()
        .zip(&prof.eval.cluster_xhx)
        .map(|(xhy, xhx)| (xhy - xhx * &prof.beta) / s2)
        .collect();
    let vcov = &prof.xhx_inv * s2;
    let vcov_model = (&vcov + vcov.transpose()) * 0.5;
    Ok(FitResult {
        beta_hat: prof.beta,
        varcomps: VarComps {
            cluster: gc * s2,
            individual: gd * s2,
            residual: s2,
        },
        vcov_model,
        reml_loglik: prof.loglik,
        converged,
        singular,
        n_iterations,
        gradient_norm,
        structure,
        residuals,
        cache: FitCache {
            cluster_info,
            cluster_score,
        },
    })
}

/// Evaluate everything a fit reports at fixed variance components, without
/// optimizing. Used for refits and diagnostics.
pub fn fit_at(mats: &ModelMatrices, varcomps: [f64; 3]) -> Result<FitResult> {
    let [vc, vd, ve] = varcomps;
    let gc = vc / ve;
    let gd = vd / ve;
    let prof = profile(mats, gc, gd, true).ok_or(Error::NumericalBreakdown(vc, vd, ve))?;
    let mut fit = finish(mats, prof, gc, gd, true, false, 0, f64::NAN)?;
    // Keep the requested residual variance instead of the profiled one.
    let scale = fit.varcomps.residual / ve;
    fit.vcov_model /= scale;
    fit.cache.cluster_info.iter_mut().for_each(|m| *m *= scale);
    fit.cache.cluster_score.iter_mut().for_each(|v| *v *= scale);
    fit.structure.sigma2 = ve;
    fit.varcomps = VarComps {
        cluster: vc,
        individual: vd,
        residual: ve,
    };
    fit.reml_loglik = super::structure::reml_objective(varcomps, mats)?;
    Ok(fit)
}
