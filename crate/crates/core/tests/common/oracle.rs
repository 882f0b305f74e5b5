//! Dense brute-force reference computations for small problems.
//!
//! Everything here assembles explicit N x N matrices and uses plain
//! determinants, inverses and eigendecompositions. None of it calls the
//! structured code in the library, apart from `fit_reml` where an oracle
//! needs refits of the estimator under study (the jackknife).

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use swcrt_core::lmm::{fit_reml, FitOptions, ModelMatrices, ModelSpec};
use swcrt_core::robust::Estimator;
use swcrt_core::Dataset;

pub const MAX_N: usize = 500;

#[derive(Debug, Clone)]
pub struct DenseProblem {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub cluster: Vec<usize>,
    pub individual: Vec<usize>,
}

impl DenseProblem {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        cluster: Vec<usize>,
        individual: Vec<usize>,
    ) -> Self {
        assert!(x.nrows() <= MAX_N, "dense oracle limited to {MAX_N} rows");
        assert_eq!(x.nrows(), y.len());
        DenseProblem {
            x,
            y,
            cluster,
            individual,
        }
    }

    /// Assemble X directly from the observations.
    pub fn from_dataset(ds: &Dataset, spec: ModelSpec) -> Self {
        let obs = &ds.observations;
        let n_periods = ds.design.n_periods();
        // covariate at each individual's first observed period
        let mut first: std::collections::HashMap<usize, (usize, f64)> = Default::default();
        for o in obs {
            let e = first.entry(o.individual).or_insert((o.period, o.covariate));
            if o.period < e.0 {
                *e = (o.period, o.covariate);
            }
        }
        let mut cols: Vec<Box<dyn Fn(usize) -> f64>> = vec![
            Box::new(|_| 1.0),
            Box::new(|r| if obs[r].exposed { 1.0 } else { 0.0 }),
        ];
        if spec == ModelSpec::StepwiseLinearCov {
            cols.push(Box::new(|r| obs[r].covariate));
        } else {
            for period in 2..=n_periods {
                cols.push(Box::new(move |r| (obs[r].period == period) as u8 as f64));
            }
            match spec {
                ModelSpec::FixedTimePlusBaselineCov => {
                    let first = first.clone();
                    cols.push(Box::new(move |r| first[&obs[r].individual].1));
                }
                ModelSpec::FixedTimePlusStepwiseCov => cols.push(Box::new(|r| obs[r].covariate)),
                _ => {}
            }
        }
        let x = DMatrix::from_fn(obs.len(), cols.len(), |r, c| cols[c](r));
        let y = DVector::from_iterator(obs.len(), obs.iter().map(|o| o.outcome));
        DenseProblem::new(
            x,
            y,
            obs.iter().map(|o| o.cluster).collect(),
            obs.iter().map(|o| o.individual).collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn contrast(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.p());
        c[1] = 1.0;
        c
    }

    /// Rows of each cluster in increasing label order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut labels: Vec<usize> = self.cluster.clone();
        labels.sort_unstable();
        labels.dedup();
        labels
            .iter()
            .map(|&l| (0..self.n()).filter(|&r| self.cluster[r] == l).collect())
            .collect()
    }

    pub fn covariance(&self, vc: [f64; 3]) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |a, b| {
            let mut v = 0.0;
            if self.cluster[a] == self.cluster[b] {
                v += vc[0];
                if self.individual[a] == self.individual[b] {
                    v += vc[1];
                }
            }
            if a == b {
                v += vc[2];
            }
            v
        })
    }

    /// Library matrices for the same data.
    pub fn to_mats(&self) -> ModelMatrices {
        ModelMatrices::new(
            self.x.clone(),
            self.y.clone(),
            &self.cluster,
            &self.individual,
            self.contrast(),
            (0..self.p()).map(|j| format!("x{j}")).collect(),
        )
        .expect("valid dense problem")
    }

    pub fn subset(&self, rows: &[usize]) -> DenseProblem {
        DenseProblem::new(
            self.x.select_rows(rows.iter()),
            DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r])),
            rows.iter().map(|&r| self.cluster[r]).collect(),
            rows.iter().map(|&r| self.individual[r]).collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct DenseReml {
    pub loglik: f64,
    pub beta: DVector<f64>,
    pub vcov: DMatrix<f64>,
}

fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let ch = m.clone().cholesky()?;
    Some(2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// REML log-likelihood without the constant term.
pub fn dense_reml(p: &DenseProblem, vc: [f64; 3]) -> Option<DenseReml> {
    if vc.iter().any(|v| *v < 0.0) || vc[2] <= 0.0 {
        return None;
    }
    let v = p.covariance(vc);
    let v_inv = v.clone().try_inverse()?;
    let xtvx = p.x.transpose() * &v_inv * &p.x;
    let vcov = xtvx.clone().try_inverse()?;
    let beta = &vcov * p.x.transpose() * &v_inv * &p.y;
    let r = &p.y - &p.x * &beta;
    let quad = (r.transpose() * &v_inv * &r)[(0, 0)];
    let loglik = -0.5 * (log_det_spd(&v)? + log_det_spd(&xtvx)? + quad);
    Some(DenseReml { loglik, beta, vcov })
}

/// Maximize the dense REML criterion by a coarse grid followed by repeated
/// 3 x 3 x 3 grid refinement around the incumbent.
pub fn grid_reml_optimum(p: &DenseProblem) -> ([f64; 3], f64) {
    let f = |v: [f64; 3]| dense_reml(p, v).map_or(f64::NEG_INFINITY, |r| r.loglik);
    let levels = [0.0, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0, 3000.0];
    let mut best = [1.0, 1.0, 1.0];
    let mut best_f = f(best);
    for &a in &levels {
        for &b in &levels {
            for &c in &levels[1..] {
                let val = f([a, b, c]);
                if val > best_f {
                    best = [a, b, c];
                    best_f = val;
                }
            }
        }
    }
    let mut step = best.map(|v| 0.5 * v.max(1.0));
    for _ in 0..200_000 {
        if step.iter().zip(&best).all(|(h, v)| *h < 1e-10 * v.max(1.0)) {
            break;
        }
        let mut cand = best;
        let mut cand_f = best_f;
        for da in -1..=1 {
            for db in -1..=1 {
                for dc in -1..=1 {
                    let v = [
                        (best[0] + da as f64 * step[0]).max(0.0),
                        (best[1] + db as f64 * step[1]).max(0.0),
                        (best[2] + dc as f64 * step[2]).max(1e-12),
                    ];
                    let val = f(v);
                    if val > cand_f {
                        cand = v;
                        cand_f = val;
                    }
                }
            }
        }
        if cand_f > best_f {
            best = cand;
            best_f = cand_f;
        } else {
            step = step.map(|h| h * 0.5);
        }
    }
    (best, best_f)
}

/// Model-based Satterthwaite df from dense pieces: central differences of
/// `c' (X'V^-1 X)^-1 c` and of the REML criterion, boundary components
/// held fixed.
pub fn dense_df_model(p: &DenseProblem, vc: [f64; 3], c: &DVector<f64>) -> Option<f64> {
    let active: Vec<usize> = (0..3).filter(|&j| vc[j] > 0.0).collect();
    let m = active.len();
    let h: Vec<f64> = active.iter().map(|&j| 1e-4 * vc[j]).collect();
    let at = |moves: &[(usize, f64)]| {
        let mut v = vc;
        for &(a, d) in moves {
            v[active[a]] += d;
        }
        v
    };
    let var = |v: [f64; 3]| dense_reml(p, v).map(|r| (c.transpose() * &r.vcov * c)[(0, 0)]);
    let ll = |v: [f64; 3]| dense_reml(p, v).map(|r| r.loglik);
    let f = var(vc)?;
    let mut g = DVector::zeros(m);
    for a in 0..m {
        g[a] = (var(at(&[(a, h[a])]))? - var(at(&[(a, -h[a])]))?) / (2.0 * h[a]);
    }
    let l0 = ll(vc)?;
    let mut hess = DMatrix::zeros(m, m);
    for a in 0..m {
        hess[(a, a)] = (ll(at(&[(a, h[a])]))? - 2.0 * l0 + ll(at(&[(a, -h[a])]))?) / (h[a] * h[a]);
        for b in 0..a {
            let v = (ll(at(&[(a, h[a]), (b, h[b])]))?
                - ll(at(&[(a, h[a]), (b, -h[b])]))?
                - ll(at(&[(a, -h[a]), (b, h[b])]))?
                + ll(at(&[(a, -h[a]), (b, -h[b])]))?)
                / (4.0 * h[a] * h[b]);
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    let a_mat = (-hess).try_inverse()?;
    Some(2.0 * f * f / (g.transpose() * a_mat * &g)[(0, 0)])
}

/// Delete-one-cluster jackknife variance of the intervention estimate,
/// `(I-1)/I * sum (theta_(s) - mean)^2`. `None` if any refit fails to
/// converge.
pub fn jackknife_theta_var(p: &DenseProblem) -> Option<f64> {
    let clusters = p.clusters();
    let i = clusters.len();
    assert!(i >= 3, "jackknife needs at least three clusters");
    let mut est = Vec::with_capacity(i);
    for s in 0..i {
        let keep: Vec<usize> = clusters
            .iter()
            .enumerate()
            .filter(|(t, _)| *t != s)
            .flat_map(|(_, rows)| rows.iter().copied())
            .collect();
        let sub = p.subset(&keep).to_mats();
        let fit = fit_reml(&sub, &FitOptions::default()).ok()?;
        if !fit.converged {
            return None;
        }
        est.push(fit.beta_hat[1]);
    }
    let mean = est.iter().sum::<f64>() / i as f64;
    Some((i as f64 - 1.0) / i as f64 * est.iter().map(|t| (t - mean).powi(2)).sum::<f64>())
}

fn sym_pow(m: &DMatrix<f64>, power: f64, floor: f64) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let cutoff = floor * eig.eigenvalues.amax();
    let d = eig
        .eigenvalues
        .map(|l| if l > cutoff { l.powf(power) } else { 0.0 });
    let u = &eig.eigenvectors;
    let out = u * DMatrix::from_diagonal(&d) * u.transpose();
    (&out + out.transpose()) * 0.5
}

fn block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| m[(rows[a], cols[b])])
}

#[derive(Debug, Clone)]
pub struct DenseRobust {
    pub vcov: DMatrix<f64>,
    /// `A_s` per cluster.
    pub adjustments: Vec<DMatrix<f64>>,
    /// `Phi_ss` and `Psi_ss` per cluster (CR2 criterion pieces).
    pub phi: Vec<DMatrix<f64>>,
    pub psi: Vec<DMatrix<f64>>,
    /// Length-N vectors `q_s = M' p_s` for the contrast.
    pub q: Vec<DVector<f64>>,
    /// Full working covariance.
    pub v: DMatrix<f64>,
}

/// Sandwich estimators assembled from explicit N x N matrices.
pub fn dense_cr(p: &DenseProblem, vc: [f64; 3], est: Estimator, c: &DVector<f64>) -> DenseRobust {
    let n = p.n();
    let v = p.covariance(vc);
    let v_inv = v.clone().try_inverse().expect("V invertible");
    let b = (p.x.transpose() * &v_inv * &p.x)
        .try_inverse()
        .expect("X'WX invertible");
    let beta = &b * p.x.transpose() * &v_inv * &p.y;
    let e = &p.y - &p.x * &beta;
    let h = &p.x * &b * p.x.transpose() * &v_inv;
    let m = DMatrix::identity(n, n) - &h;
    let mvm = &m * &v * m.transpose();

    let mut meat = DMatrix::zeros(p.p(), p.p());
    let mut out = DenseRobust {
        vcov: DMatrix::zeros(0, 0),
        adjustments: vec![],
        phi: vec![],
        psi: vec![],
        q: vec![],
        v: v.clone(),
    };
    for rows in p.clusters() {
        let ns = rows.len();
        let xs = p.x.select_rows(rows.iter());
        let es = DVector::from_iterator(ns, rows.iter().map(|&r| e[r]));
        let phi = block(&v, &rows, &rows);
        let ws = phi.clone().try_inverse().expect("V_s invertible");
        let psi = block(&mvm, &rows, &rows);
        let a = match est {
            Estimator::CR0 | Estimator::ModelBased => DMatrix::identity(ns, ns),
            Estimator::CR3 => (DMatrix::identity(ns, ns) - block(&h, &rows, &rows))
                .try_inverse()
                .expect("I - H_ss invertible"),
            Estimator::CR2 => {
                let s = sym_pow(&phi, 0.5, 0.0);
                let mid = &s * &psi * &s;
                &s * sym_pow(&((&mid + mid.transpose()) * 0.5), -0.5, 1e-10) * &s
            }
        };
        let u = xs.transpose() * &ws * &a * &es;
        meat += &u * u.transpose();
        let ps = a.transpose() * &ws * &xs * &b * c;
        let mut full = DVector::zeros(n);
        for (k, &r) in rows.iter().enumerate() {
            full[r] = ps[k];
        }
        out.q.push(m.transpose() * full);
        out.adjustments.push(a);
        out.phi.push(phi);
        out.psi.push(psi);
    }
    out.vcov = &b * meat * &b;
    out
}

/// Satterthwaite df as `(sum l)^2 / sum l^2` over the eigenvalues of
/// `Phi^(1/2) (sum_s q_s q_s') Phi^(1/2)`.
pub fn satterthwaite_eigen(robust: &DenseRobust) -> f64 {
    let n = robust.v.nrows();
    let mut qq = DMatrix::zeros(n, n);
    for q in &robust.q {
        qq += q * q.transpose();
    }
    let root = sym_pow(&robust.v, 0.5, 0.0);
    let m = &root * qq * &root;
    let eig = ((&m + m.transpose()) * 0.5).symmetric_eigen();
    df_from_eigenvalues(eig.eigenvalues.as_slice())
}

pub fn df_from_eigenvalues(l: &[f64]) -> f64 {
    let s: f64 = l.iter().sum();
    let s2: f64 = l.iter().map(|x| x * x).sum();
    s * s / s2
}

/// Max |A Psi A - Phi| over clusters.
pub fn cr2_criterion_residual(robust: &DenseRobust) -> f64 {
    robust
        .adjustments
        .iter()
        .zip(robust.psi.iter().zip(&robust.phi))
        .map(|(a, (psi, phi))| (a * psi * a - phi).amax())
        .fold(0.0, f64::max)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
