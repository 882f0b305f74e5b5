//! Cluster-robust (sandwich) covariance estimators for the fixed effects of
//! a fitted mixed model, with Satterthwaite degrees of freedom and Wald
//! tests.
//!
//! All three estimators share the form
//! `B [sum_i X_i' W_i A_i e_i e_i' A_i' W_i X_i] B`
//! with `B = (X' W X)^{-1}`, working weights `W_i = V_i^{-1}` from the REML
//! fit and marginal residuals `e_i`. They differ in the adjustment `A_i`:
//!
//! * CR0: `A_i = I`.
//! * CR3: `A_i = (I - H_ii)^{-1}`, `H_ii = X_i B X_i' W_i`. Via Woodbury this
//!   is `I + X_i (B^{-1} - X_i' W_i X_i)^{-1} X_i' W_i`, a leave-one-cluster-out
//!   information inverse.
//! * CR2: the symmetric `A_i` with `A_i Psi_ii A_i = Phi_ii`, where
//!   `Phi_ii = V_i` and `Psi_ii` is the model-implied covariance of the
//!   residuals of cluster `i`.
//!
//! For CR2 every operator involved (`V_i`, `X_i B X_i'`) leaves the span of
//! the individual indicators and the columns of `X_i` invariant and acts as
//! a multiple of the identity on its complement, where `A_i = I`. The
//! matrix functions are therefore evaluated on that subspace only, whose
//! dimension is at most `members + p` rather than the cluster size.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::lmm::{satterthwaite_df_model, FitResult, ModelMatrices};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "model")]
    ModelBased,
    #[serde(rename = "cr0")]
    CR0,
    #[serde(rename = "cr2")]
    CR2,
    #[serde(rename = "cr3")]
    CR3,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::ModelBased,
        Estimator::CR0,
        Estimator::CR2,
        Estimator::CR3,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Estimator::ModelBased => "model",
            Estimator::CR0 => "cr0",
            Estimator::CR2 => "cr2",
            Estimator::CR3 => "cr3",
        }
    }

    /// Name used in printed tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Estimator::ModelBased => "Standard",
            Estimator::CR0 => "CR0",
            Estimator::CR2 => "CR2",
            Estimator::CR3 => "CR3",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        let l = label.to_ascii_lowercase();
        match l.as_str() {
            "model" | "standard" | "model-based" | "modelbased" => Some(Estimator::ModelBased),
            "cr0" => Some(Estimator::CR0),
            "cr2" => Some(Estimator::CR2),
            "cr3" => Some(Estimator::CR3),
            _ => None,
        }
    }

    pub fn is_robust(self) -> bool {
        !matches!(self, Estimator::ModelBased)
    }
}

/// Target residual covariance used by the CR2 criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cr2Variant {
    /// `Psi_ii = [M Phi M']_ii = V_i - X_i B X_i'` with `M = I - X B X' W`.
    #[default]
    Exact,
    /// `Psi_ii = (I - H_ii) V_i (I - H_ii)'`, ignoring cross-cluster terms.
    WithinCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustOptions {
    pub cr2: Cr2Variant,
    /// Relative eigenvalue floor for inverse square roots; eigenvalues below
    /// `floor * max` are treated as zero (pseudo-inverse).
    pub eigen_floor: f64,
}

impl Default for RobustOptions {
    fn default() -> Self {
        RobustOptions {
            cr2: Cr2Variant::Exact,
            eigen_floor: 1e-10,
        }
    }
}

/// Compact representation of a per-cluster adjustment matrix `A_i`.
#[derive(Debug, Clone)]
pub enum Adjustment {
    Identity,
    /// `A = I + X_i G X_i' W_i`.
    LeaveOneOut {
        g_inv: DMatrix<f64>,
    },
    /// `A = I + Q (core - I) Q'` with orthonormal `Q`.
    Subspace {
        basis: DMatrix<f64>,
        core: DMatrix<f64>,
    },
}

impl Adjustment {
    /// Materialize the `n_i x n_i` matrix.
    pub fn dense(&self, mats: &ModelMatrices, fit: &FitResult, cluster: usize) -> DMatrix<f64> {
        let n = mats.cluster_rows(cluster).len();
        match self {
            Adjustment::Identity => DMatrix::identity(n, n),
            Adjustment::LeaveOneOut { g_inv } => {
                let xs = mats.cluster_x(cluster);
                let mut wx = DMatrix::zeros(n, xs.ncols());
                for j in 0..xs.ncols() {
                    let col = fit
                        .structure
                        .solve(mats, cluster, &xs.column(j).into_owned());
                    wx.set_column(j, &col);
                }
                DMatrix::identity(n, n) + &xs * g_inv * wx.transpose()
            }
            Adjustment::Subspace { basis, core } => {
                let r = core.nrows();
                DMatrix::identity(n, n)
                    + basis * (core - DMatrix::identity(r, r)) * basis.transpose()
            }
        }
    }
}

/// Per-cluster pieces of the Satterthwaite computation. For a contrast `c`,
/// `z = k B c`, `p_i' V_i p_i = z' metric z` and `X_i' p_i = gmap' z`, where
/// `p_i = A_i' W_i X_i B c` is the cluster's weight vector in `c' b`'s
/// variance estimate.
#[derive(Debug, Clone)]
struct SattBlock {
    k: DMatrix<f64>,
    metric: DMatrix<f64>,
    gmap: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct RobustVcov {
    pub estimator: Estimator,
    pub vcov: DMatrix<f64>,
    pub per_cluster_adjustments: Vec<Adjustment>,
    pub satterthwaite_df_theta: f64,
    /// Clusters whose CR2 inverse square root needed the eigenvalue floor.
    pub floored_clusters: usize,
    /// `B = (X' W X)^{-1}`.
    bread: DMatrix<f64>,
    blocks: Vec<SattBlock>,
}

impl RobustVcov {
    pub fn se(&self, contrast: &DVector<f64>) -> f64 {
        contrast.dot(&(&self.vcov * contrast)).max(0.0).sqrt()
    }
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `f(eigenvalues)` applied to a symmetric matrix.
fn sym_fn(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let u = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    sym(u * d * u.transpose())
}

struct ClusterPiece {
    meat: DVector<f64>,
    adjustment: Adjustment,
    block: SattBlock,
    floored: bool,
}

fn cr0_piece(fit: &FitResult, s: usize) -> ClusterPiece {
    let f = fit.cluster_information(s).clone();
    let p = f.nrows();
    ClusterPiece {
        meat: fit.cluster_score(s).clone(),
        adjustment: Adjustment::Identity,
        block: SattBlock {
            k: DMatrix::identity(p, p),
            metric: f.clone(),
            gmap: f,
        },
        floored: false,
    }
}

fn cr3_piece(
    fit: &FitResult,
    info_total: &DMatrix<f64>,
    s: usize,
    floor: f64,
) -> Result<ClusterPiece> {
    let f = fit.cluster_information(s);
    let p = f.nrows();
    let g = sym(info_total - f);
    let eig = g.clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    if eig.eigenvalues.min() <= floor.max(1e-12) * max {
        return Err(Error::EstimatorFailure {
            estimator: "CR3",
            cluster: s,
            reason: "I - H_ii is singular".into(),
        });
    }
    let g_inv = sym_fn(&eig, |l| 1.0 / l);
    let t = DMatrix::identity(p, p) + &g_inv * f;
    Ok(ClusterPiece {
        meat: t.transpose() * fit.cluster_score(s),
        adjustment: Adjustment::LeaveOneOut { g_inv },
        block: SattBlock {
            k: t,
            metric: f.clone(),
            gmap: f.clone(),
        },
        floored: false,
    })
}

/// Orthonormal basis of span(individual indicators, X_i) for one cluster.
fn cluster_basis(mats: &ModelMatrices, s: usize) -> DMatrix<f64> {
    let rows = mats.cluster_rows(s);
    let slots = &mats.groups.cluster_row_slot[s];
    let members = mats.cluster_members(s);
    let n = rows.len();
    let p = mats.n_fixed();
    let counts: Vec<f64> = members.iter().map(|&k| mats.stats.counts[k]).collect();

    let xs = mats.cluster_x(s);
    let mut means = DMatrix::<f64>::zeros(members.len(), p);
    for (pos, &slot) in slots.iter().enumerate() {
        for j in 0..p {
            means[(slot, j)] += xs[(pos, j)] / counts[slot];
        }
    }
    let within = DMatrix::from_fn(n, p, |pos, j| xs[(pos, j)] - means[(slots[pos], j)]);
    let scale = xs.norm().max(1.0);
    let mut extra = Vec::new();
    if within.amax() > 0.0 {
        let svd = within.svd(true, false);
        let u = svd.u.expect("left singular vectors requested");
        for (j, &sv) in svd.singular_values.iter().enumerate() {
            if sv > 1e-10 * scale {
                extra.push(u.column(j).into_owned());
            }
        }
    }

    let r = members.len() + extra.len();
    let mut q = DMatrix::zeros(n, r);
    for (pos, &slot) in slots.iter().enumerate() {
        q[(pos, slot)] = 1.0 / counts[slot].sqrt();
    }
    for (j, col) in extra.iter().enumerate() {
        q.set_column(members.len() + j, col);
    }
    q
}

fn cr2_piece(
    mats: &ModelMatrices,
    fit: &FitResult,
    bread: &DMatrix<f64>,
    s: usize,
    opts: &RobustOptions,
) -> Result<ClusterPiece> {
    let q = cluster_basis(mats, s);
    let r = q.ncols();
    let mut vq = DMatrix::zeros(q.nrows(), r);
    for j in 0..r {
        vq.set_column(j, &fit.structure.apply(mats, s, &q.column(j).into_owned()));
    }
    let v_l = sym(q.tr_mul(&vq));
    let p_l = q.tr_mul(&mats.cluster_x(s));
    let e_l = q.tr_mul(&mats.cluster_part(&fit.residuals, s));

    let v_eig = v_l.clone().symmetric_eigen();
    if v_eig.eigenvalues.min() <= 0.0 {
        return Err(Error::EstimatorFailure {
            estimator: "CR2",
            cluster: s,
            reason: "working covariance is not positive definite".into(),
        });
    }
    let root = sym_fn(&v_eig, f64::sqrt);
    let v_inv = sym_fn(&v_eig, |l| 1.0 / l);
    let xbx = sym(&p_l * bread * p_l.transpose());
    let psi = match opts.cr2 {
        Cr2Variant::Exact => sym(&v_l - &xbx),
        Cr2Variant::WithinCluster => {
            let resid_maker = DMatrix::identity(r, r) - &xbx * &v_inv;
            sym(&resid_maker * &v_l * resid_maker.transpose())
        }
    };
    let middle = sym(&root * psi * &root);
    let m_eig = middle.symmetric_eigen();
    let cutoff = opts.eigen_floor * m_eig.eigenvalues.amax();
    let floored = m_eig.eigenvalues.iter().any(|&l| l <= cutoff);
    let inv_sqrt = sym_fn(&m_eig, |l| if l > cutoff { 1.0 / l.sqrt() } else { 0.0 });
    let core = sym(&root * inv_sqrt * &root);

    let k = &core * &v_inv * &p_l;
    Ok(ClusterPiece {
        meat: k.tr_mul(&e_l),
        adjustment: Adjustment::Subspace { basis: q, core },
        block: SattBlock {
            k,
            metric: v_l,
            gmap: p_l,
        },
        floored,
    })
}

/// Cluster-robust covariance of the fixed effects.
pub fn cr_vcov(
    mats: &ModelMatrices,
    fit: &FitResult,
    estimator: Estimator,
    opts: &RobustOptions,
) -> Result<RobustVcov> {
    let n_clusters = mats.n_clusters();
    let info_total: DMatrix<f64> = (0..n_clusters).map(|s| fit.cluster_information(s)).sum();
    let bread = fit.vcov_model.clone();

    let pieces = (0..n_clusters)
        .map(|s| match estimator {
            Estimator::CR0 => Ok(cr0_piece(fit, s)),
            Estimator::CR3 => cr3_piece(fit, &info_total, s, opts.eigen_floor),
            Estimator::CR2 => cr2_piece(mats, fit, &bread, s, opts),
            Estimator::ModelBased => Err(Error::InvalidModel(
                "model-based variance is not a cluster-robust estimator".into(),
            )),
        })
        .collect::<Result<Vec<_>>>()?;

    let p = mats.n_fixed();
    let mut meat = DMatrix::zeros(p, p);
    for piece in &pieces {
        meat += &piece.meat * piece.meat.transpose();
    }
    let vcov = sym(&bread * meat * &bread);

    let floored_clusters = pieces.iter().filter(|p| p.floored).count();
    let (adjustments, blocks): (Vec<_>, Vec<_>) =
        pieces.into_iter().map(|p| (p.adjustment, p.block)).unzip();
    let mut out = RobustVcov {
        estimator,
        vcov,
        per_cluster_adjustments: adjustments,
        satterthwaite_df_theta: f64::NAN,
        floored_clusters,
        bread,
        blocks,
    };
    out.satterthwaite_df_theta = satterthwaite_df_cr(fit, &out, &mats.contrast_theta)?;
    Ok(out)
}

/// The `I x I` matrix `Omega_st = q_s' Phi q_t` whose trace and Frobenius
/// norm give the Satterthwaite degrees of freedom.
pub fn satterthwaite_omega(robust: &RobustVcov, contrast: &DVector<f64>) -> DMatrix<f64> {
    let bc = &robust.bread * contrast;
    let mut diag = Vec::with_capacity(robust.blocks.len());
    let mut gs = Vec::with_capacity(robust.blocks.len());
    for b in &robust.blocks {
        let z = &b.k * &bc;
        diag.push(z.dot(&(&b.metric * &z)));
        gs.push(b.gmap.tr_mul(&z));
    }
    let m = gs.len();
    let bg: Vec<DVector<f64>> = gs.iter().map(|g| &robust.bread * g).collect();
    DMatrix::from_fn(m, m, |s, t| {
        let cross = gs[s].dot(&bg[t]);
        if s == t {
            diag[s] - cross
        } else {
            -cross
        }
    })
}

/// Satterthwaite degrees of freedom of the robust variance of `c' b`,
/// `(sum_s Omega_ss)^2 / sum_st Omega_st^2`.
pub fn satterthwaite_df_cr(
    _fit: &FitResult,
    robust: &RobustVcov,
    contrast: &DVector<f64>,
) -> Result<f64> {
    let omega = satterthwaite_omega(robust, contrast);
    let trace = omega.trace();
    let frob2 = omega.iter().map(|v| v * v).sum::<f64>();
    if !(trace.abs() > 0.0) || !(frob2 > 0.0) {
        return Err(Error::DfUnavailable(
            "degenerate contrast (zero trace)".into(),
        ));
    }
    Ok(trace * trace / frob2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub estimate: f64,
    pub se: f64,
    /// Degrees of freedom; `None` when a normal reference was used.
    pub df: Option<f64>,
    pub t_stat: f64,
    pub p_value: f64,
    pub estimator: Estimator,
}

impl TestResult {
    /// Two-sided Wald test against Student-t(df), or the standard normal
    /// when `df` is `None`.
    pub fn new(estimate: f64, se: f64, df: Option<f64>, estimator: Estimator) -> Self {
        let t_stat = if estimate == 0.0 {
            0.0
        } else if se > 0.0 {
            estimate / se
        } else {
            f64::INFINITY * estimate.signum()
        };
        let p_value = two_sided_p(t_stat, df);
        TestResult {
            estimate,
            se,
            df,
            t_stat,
            p_value,
            estimator,
        }
    }
}

pub fn two_sided_p(t: f64, df: Option<f64>) -> f64 {
    let a = t.abs();
    if a == 0.0 {
        return 1.0;
    }
    if a.is_infinite() {
        return 0.0;
    }
    let tail = match df {
        Some(df) if df.is_finite() => StudentsT::new(0.0, 1.0, df)
            .map(|d| d.sf(a))
            .unwrap_or(f64::NAN),
        _ => Normal::new(0.0, 1.0).map(|d| d.sf(a)).unwrap_or(f64::NAN),
    };
    (2.0 * tail).clamp(0.0, 1.0)
}

/// Where the variance of the contrast comes from.
#[derive(Debug, Clone, Copy)]
pub enum VcovSource<'a> {
    ModelBased(&'a ModelMatrices),
    Robust(&'a RobustVcov),
}

/// Wald test of `c' b = 0` with Satterthwaite degrees of freedom from the
/// routine matching the variance source.
pub fn wald_test(
    fit: &FitResult,
    source: VcovSource<'_>,
    contrast: &DVector<f64>,
) -> Result<TestResult> {
    let estimate = fit.theta_hat(contrast);
    match source {
        VcovSource::ModelBased(mats) => {
            let df = satterthwaite_df_model(mats, fit, contrast)?;
            Ok(TestResult::new(
                estimate,
                fit.model_se(contrast),
                Some(df),
                Estimator::ModelBased,
            ))
        }
        VcovSource::Robust(r) => {
            let df = satterthwaite_df_cr(fit, r, contrast)?;
            Ok(TestResult::new(
                estimate,
                r.se(contrast),
                Some(df),
                r.estimator,
            ))
        }
    }
}
