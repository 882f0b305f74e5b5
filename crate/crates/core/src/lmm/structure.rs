use nalgebra::{DMatrix, DVector};

use super::matrices::ModelMatrices;
use crate::{Error, Result};

/// Variance parameters in ratio form, `V = sigma2 * H(ratio_c, ratio_d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovStructure {
    pub sigma2: f64,
    pub ratio_cluster: f64,
    pub ratio_individual: f64,
}

impl CovStructure {
    pub fn from_varcomps(var_cluster: f64, var_individual: f64, var_error: f64) -> Self {
        CovStructure {
            sigma2: var_error,
            ratio_cluster: var_cluster / var_error,
            ratio_individual: var_individual / var_error,
        }
    }

    /// `(s2_c, s2_d, s2_e)`.
    pub fn varcomps(&self) -> [f64; 3] {
        [
            self.ratio_cluster * self.sigma2,
            self.ratio_individual * self.sigma2,
            self.sigma2,
        ]
    }

    fn member_sums(&self, mats: &ModelMatrices, cluster: usize, v: &DVector<f64>) -> Vec<f64> {
        let slots = &mats.groups.cluster_row_slot[cluster];
        let mut sums = vec![0.0; mats.cluster_members(cluster).len()];
        for (pos, &slot) in slots.iter().enumerate() {
            sums[slot] += v[pos];
        }
        sums
    }

    fn member_counts(mats: &ModelMatrices, cluster: usize) -> impl Iterator<Item = f64> + '_ {
        mats.cluster_members(cluster)
            .iter()
            .map(|&k| mats.stats.counts[k])
    }

    /// `V_i v` for a vector laid out like `mats.cluster_rows(cluster)`.
    pub fn apply(&self, mats: &ModelMatrices, cluster: usize, v: &DVector<f64>) -> DVector<f64> {
        let sums = self.member_sums(mats, cluster, v);
        let total = v.sum();
        let slots = &mats.groups.cluster_row_slot[cluster];
        DVector::from_fn(v.len(), |pos, _| {
            self.sigma2
                * (v[pos] + self.ratio_individual * sums[slots[pos]] + self.ratio_cluster * total)
        })
    }

    /// `V_i^{-1} v` via the Woodbury identity.
    pub fn solve(&self, mats: &ModelMatrices, cluster: usize, v: &DVector<f64>) -> DVector<f64> {
        let gd = self.ratio_individual;
        let gc = self.ratio_cluster;
        let sums = self.member_sums(mats, cluster, v);
        let w: Vec<f64> = Self::member_counts(mats, cluster)
            .map(|t| 1.0 / (1.0 + gd * t))
            .collect();
        let s: f64 = Self::member_counts(mats, cluster)
            .zip(&w)
            .map(|(t, w)| t * w)
            .sum();
        let one_rinv_v: f64 = sums.iter().zip(&w).map(|(u, w)| u * w).sum();
        let b = gc / (1.0 + gc * s);
        let slots = &mats.groups.cluster_row_slot[cluster];
        DVector::from_fn(v.len(), |pos, _| {
            let slot = slots[pos];
            let rinv_v = v[pos] - gd * w[slot] * sums[slot];
            (rinv_v - b * w[slot] * one_rinv_v) / self.sigma2
        })
    }

    /// Dense `V_i`, for small clusters and tests.
    pub fn dense(&self, mats: &ModelMatrices, cluster: usize) -> DMatrix<f64> {
        let slots = &mats.groups.cluster_row_slot[cluster];
        let n = slots.len();
        DMatrix::from_fn(n, n, |a, b| {
            let mut v = self.ratio_cluster;
            if slots[a] == slots[b] {
                v += self.ratio_individual;
            }
            if a == b {
                v += 1.0;
            }
            v * self.sigma2
        })
    }
}

/// GLS cross products under `H = I + g_d Z_d Z_d' + g_c Z_c Z_c'`.
#[derive(Debug, Clone)]
pub(crate) struct GlsEval {
    pub xhx: DMatrix<f64>,
    pub xhy: DVector<f64>,
    pub yhy: f64,
    pub logdet_h: f64,
    /// Per-cluster `X_i' H_i^{-1} X_i`, filled on request.
    pub cluster_xhx: Vec<DMatrix<f64>>,
    pub cluster_xhy: Vec<DVector<f64>>,
}

fn rank_one_sub(m: &mut DMatrix<f64>, alpha: f64, v: &[f64]) {
    let p = v.len();
    let data = m.as_mut_slice();
    for j in 0..p {
        let avj = alpha * v[j];
        let col = &mut data[j * p..(j + 1) * p];
        for (c, &vi) in col.iter_mut().zip(v) {
            *c -= avj * vi;
        }
    }
}

pub(crate) fn eval_gls(
    mats: &ModelMatrices,
    ratio_c: f64,
    ratio_d: f64,
    per_cluster: bool,
) -> GlsEval {
    let stats = &mats.stats;
    let p = stats.p;
    let mut xhx = DMatrix::zeros(p, p);
    let mut xhy = DVector::zeros(p);
    let mut yhy = 0.0;
    let mut logdet_h = 0.0;
    let mut cluster_xhx = Vec::new();
    let mut cluster_xhy = Vec::new();
    let mut tvec = vec![0.0; p];

    for (s, members) in mats.groups.cluster_members.iter().enumerate() {
        let mut m = stats.cluster_xtx[s].clone();
        let mut my = stats.cluster_xty[s].clone();
        let mut myy = stats.cluster_yty[s];
        tvec.iter_mut().for_each(|v| *v = 0.0);
        let mut u = 0.0;
        let mut ssum = 0.0;
        for &k in members {
            let t = stats.counts[k];
            let w = 1.0 / (1.0 + ratio_d * t);
            let sx = stats.sum_x(k);
            let sy = stats.sum_y[k];
            if ratio_d > 0.0 {
                let a = ratio_d * w;
                rank_one_sub(&mut m, a, sx);
                for (mj, &xj) in my.iter_mut().zip(sx) {
                    *mj -= a * xj * sy;
                }
                myy -= a * sy * sy;
                logdet_h += (1.0 + ratio_d * t).ln();
            }
            for (tj, &xj) in tvec.iter_mut().zip(sx) {
                *tj += w * xj;
            }
            u += w * sy;
            ssum += t * w;
        }
        if ratio_c > 0.0 {
            let b = ratio_c / (1.0 + ratio_c * ssum);
            rank_one_sub(&mut m, b, &tvec);
            for (mj, &tj) in my.iter_mut().zip(&tvec) {
                *mj -= b * tj * u;
            }
            myy -= b * u * u;
            logdet_h += (1.0 + ratio_c * ssum).ln();
        }
        xhx += &m;
        xhy += &my;
        yhy += myy;
        if per_cluster {
            cluster_xhx.push(m);
            cluster_xhy.push(my);
        }
    }
    xhx = (&xhx + xhx.transpose()) * 0.5;
    GlsEval {
        xhx,
        xhy,
        yhy,
        logdet_h,
        cluster_xhx,
        cluster_xhy,
    }
}

/// REML criterion with the residual variance profiled out.
#[derive(Debug, Clone)]
pub(crate) struct Profiled {
    pub loglik: f64,
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub rss: f64,
    /// `(X' H^{-1} X)^{-1}`.
    pub xhx_inv: DMatrix<f64>,
    pub eval: GlsEval,
}

pub(crate) fn profile(
    mats: &ModelMatrices,
    ratio_c: f64,
    ratio_d: f64,
    per_cluster: bool,
) -> Option<Profiled> {
    let eval = eval_gls(mats, ratio_c, ratio_d, per_cluster);
    let n = mats.stats.n_obs as f64;
    let p = mats.stats.p as f64;
    let chol = eval.xhx.clone().cholesky()?;
    let logdet_xhx = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let beta = chol.solve(&eval.xhy);
    let rss = eval.yhy - beta.dot(&eval.xhy);
    if !(rss > 0.0) {
        return None;
    }
    let sigma2 = rss / (n - p);
    let loglik = -0.5 * ((n - p) * (sigma2.ln() + 1.0) + eval.logdet_h + logdet_xhx);
    if !loglik.is_finite() {
        return None;
    }
    let xhx_inv = chol.inverse();
    Some(Profiled {
        loglik,
        beta,
        sigma2,
        rss,
        xhx_inv,
        eval,
    })
}

/// Gradient of the profiled REML log-likelihood with respect to
/// `(ratio_c, ratio_d)`.
pub(crate) fn profiled_gradient(
    mats: &ModelMatrices,
    ratio_c: f64,
    ratio_d: f64,
    prof: &Profiled,
) -> [f64; 2] {
    let stats = &mats.stats;
    let p = stats.p;
    let q = &prof.xhx_inv;
    let beta = prof.beta.as_slice();
    let n_minus_p = (stats.n_obs - p) as f64;

    let quad_form = |h: &[f64]| -> f64 {
        let mut acc = 0.0;
        for j in 0..p {
            let mut row = 0.0;
            for i in 0..p {
                row += q[(i, j)] * h[i];
            }
            acc += row * h[j];
        }
        acc
    };

    let mut tr = [0.0; 2];
    let mut quad = [0.0; 2];
    let mut tvec = vec![0.0; p];
    let mut h = vec![0.0; p];
    let mut resid_sums = Vec::new();
    for members in &mats.groups.cluster_members {
        tvec.iter_mut().for_each(|v| *v = 0.0);
        resid_sums.clear();
        let mut ssum = 0.0;
        let mut rsum = 0.0;
        for &k in members {
            let t = stats.counts[k];
            let w = 1.0 / (1.0 + ratio_d * t);
            let sx = stats.sum_x(k);
            let sr = stats.sum_y[k] - sx.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
            for (tj, &xj) in tvec.iter_mut().zip(sx) {
                *tj += w * xj;
            }
            ssum += t * w;
            rsum += w * sr;
            resid_sums.push(sr);
        }
        let b = ratio_c / (1.0 + ratio_c * ssum);
        for (&k, &sr) in members.iter().zip(&resid_sums) {
            let t = stats.counts[k];
            let w = 1.0 / (1.0 + ratio_d * t);
            let tw = t * w;
            let sx = stats.sum_x(k);
            for j in 0..p {
                h[j] = w * sx[j] - b * tw * tvec[j];
            }
            let nkk = tw - b * tw * tw;
            let rk = w * sr - b * tw * rsum;
            tr[1] += nkk - quad_form(&h);
            quad[1] += rk * rk;
        }
        let denom = 1.0 + ratio_c * ssum;
        for j in 0..p {
            h[j] = tvec[j] / denom;
        }
        let rs = rsum / denom;
        tr[0] += ssum / denom - quad_form(&h);
        quad[0] += rs * rs;
    }
    let mut grad = [0.0; 2];
    for j in 0..2 {
        grad[j] = -0.5 * (tr[j] - n_minus_p * quad[j] / prof.rss);
    }
    grad
}

/// REML log-likelihood at `(s2_c, s2_d, s2_e)`, without the `2 pi`
/// constant:
/// `-1/2 [log|V| + log|X'V^{-1}X| + (y - Xb)' V^{-1} (y - Xb)]`
/// with `b` the GLS estimate at these variance components.
pub fn reml_objective(varcomps: [f64; 3], mats: &ModelMatrices) -> Result<f64> {
    let [vc, vd, ve] = varcomps;
    let breakdown = || Error::NumericalBreakdown(vc, vd, ve);
    if !(ve > 0.0) || !(vc >= 0.0) || !(vd >= 0.0) {
        return Err(Error::InvalidModel(format!(
            "variance components ({vc}, {vd}, {ve}) outside the admissible region"
        )));
    }
    let eval = eval_gls(mats, vc / ve, vd / ve, false);
    let n = mats.stats.n_obs as f64;
    let p = mats.stats.p as f64;
    let chol = eval.xhx.clone().cholesky().ok_or_else(breakdown)?;
    let logdet_xhx = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let beta = chol.solve(&eval.xhy);
    let rss = eval.yhy - beta.dot(&eval.xhy);
    let loglik = -0.5 * (n * ve.ln() + eval.logdet_h + logdet_xhx - p * ve.ln() + rss / ve);
    if loglik.is_finite() {
        Ok(loglik)
    } else {
        Err(breakdown())
    }
}
