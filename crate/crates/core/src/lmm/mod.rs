//! Linear mixed models with nested cluster and individual random intercepts.
//!
//! The marginal covariance of cluster `i` is
//! `V_i = s2_e * (I + g_d * Z_d Z_d' + g_c * 1 1')`
//! where `g_c = s2_c / s2_e` and `g_d = s2_d / s2_e` are variance ratios and
//! `Z_d` holds individual indicators. Every quantity needed by REML is
//! assembled from per-individual and per-cluster sums through the Woodbury
//! identity, so the cost of one likelihood evaluation is linear in the
//! number of individuals.

mod fit;
mod matrices;
mod satterthwaite;
mod structure;

pub use fit::{fit_at, fit_reml, FitOptions, FitResult, VarComps};
pub use matrices::{build_matrices, ModelMatrices, ModelSpec};
pub use satterthwaite::satterthwaite_df_model;
pub use structure::{reml_objective, CovStructure};
