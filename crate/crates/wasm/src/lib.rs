//! Browser bindings for the simulation core.
//!
//! Every export takes plain numbers and labels and returns a JSON string, so
//! the page needs no generated TypeScript types. Errors come back as strings.

use serde::Serialize;
use swcrt_core::datagen::generate_dataset;
use swcrt_core::design::{build_design, randomize_arms};
use swcrt_core::lmm::{build_matrices, fit_reml, satterthwaite_df_model};
use swcrt_core::mc::{run_scenario, SummaryRow};
use swcrt_core::rng::seeded;
use swcrt_core::robust::{cr_vcov, wald_test, RobustOptions, VcovSource};
use swcrt_core::{
    Cohort, CovariateEffect, Estimator, FitOptions, ModelSpec, ScenarioConfig, SimParams,
};
use wasm_bindgen::prelude::*;

/// Largest replicate count accepted by [`mini_monte_carlo`]; the page runs
/// on the main thread.
pub const MAX_BROWSER_SIM: usize = 400;

fn cohort(label: &str) -> Result<Cohort, String> {
    match label {
        "closed" => Ok(Cohort::Closed),
        "open" => Ok(Cohort::Open),
        _ => Err(format!("unknown cohort {label:?}")),
    }
}

fn effect(label: &str) -> Result<CovariateEffect, String> {
    match label {
        "linear" => Ok(CovariateEffect::Linear),
        "nonlinear" => Ok(CovariateEffect::Nonlinear),
        _ => Err(format!("unknown covariate effect {label:?}")),
    }
}

fn model(label: &str) -> Result<ModelSpec, String> {
    ModelSpec::from_label(label).ok_or_else(|| format!("unknown model {label:?}"))
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct DesignView {
    n_clusters: usize,
    n_steps: usize,
    arms: Vec<usize>,
    /// One 0/1 row per cluster, sorted by arm.
    exposure: Vec<Vec<u8>>,
    exposed_per_period: Vec<usize>,
}

/// Randomized stepped-wedge layout.
#[wasm_bindgen]
pub fn design_grid(n_clusters: usize, n_steps: usize, seed: u64) -> Result<String, String> {
    let mut rng = seeded(seed);
    let arms = randomize_arms(n_clusters, n_steps, &mut rng).map_err(|e| e.to_string())?;
    let d = build_design(n_clusters, n_steps, &arms).map_err(|e| e.to_string())?;
    let mut order: Vec<usize> = (0..n_clusters).collect();
    order.sort_by_key(|&i| (d.arm_of(i), i));
    to_json(&DesignView {
        n_clusters,
        n_steps,
        arms: d.arms().to_vec(),
        exposure: order.iter().map(|&i| d.exposure_row(i).to_vec()).collect(),
        exposed_per_period: d.column_sums(),
    })
}

#[derive(Serialize)]
struct EstimatorView {
    estimator: &'static str,
    se: Option<f64>,
    df: Option<f64>,
    p: Option<f64>,
}

#[derive(Serialize)]
struct FitView {
    model: &'static str,
    theta_hat: Option<f64>,
    var_cluster: Option<f64>,
    var_individual: Option<f64>,
    var_error: Option<f64>,
    converged: bool,
    singular: bool,
    estimators: Vec<EstimatorView>,
    error: Option<String>,
}

#[derive(Serialize)]
struct DatasetView {
    n_observations: usize,
    n_individuals: usize,
    /// Mean outcome per cluster (rows) and period (columns).
    cluster_period_means: Vec<Vec<f64>>,
    exposure: Vec<Vec<u8>>,
    fits: Vec<FitView>,
}

fn fit_one(ds: &swcrt_core::Dataset, spec: ModelSpec) -> FitView {
    let mut view = FitView {
        model: spec.label(),
        theta_hat: None,
        var_cluster: None,
        var_individual: None,
        var_error: None,
        converged: false,
        singular: false,
        estimators: Vec::new(),
        error: None,
    };
    let fitted =
        build_matrices(ds, spec).and_then(|m| fit_reml(&m, &FitOptions::default()).map(|f| (m, f)));
    let (mats, fit) = match fitted {
        Ok(x) => x,
        Err(e) => {
            view.error = Some(e.to_string());
            return view;
        }
    };
    let c = mats.contrast_theta.clone();
    view.theta_hat = Some(fit.theta_hat(&c));
    view.var_cluster = Some(fit.varcomps.cluster);
    view.var_individual = Some(fit.varcomps.individual);
    view.var_error = Some(fit.varcomps.residual);
    view.converged = fit.converged;
    view.singular = fit.singular;
    for est in Estimator::ALL {
        let test = match est {
            Estimator::ModelBased => {
                let df = satterthwaite_df_model(&mats, &fit, &c).ok();
                let se = fit.model_se(&c);
                Ok(swcrt_core::TestResult::new(fit.theta_hat(&c), se, df, est))
            }
            _ => cr_vcov(&mats, &fit, est, &RobustOptions::default())
                .and_then(|r| wald_test(&fit, VcovSource::Robust(&r), &c)),
        };
        view.estimators.push(match test {
            Ok(t) => EstimatorView {
                estimator: est.display_name(),
                se: Some(t.se),
                df: t.df,
                p: Some(t.p_value),
            },
            Err(_) => EstimatorView {
                estimator: est.display_name(),
                se: None,
                df: None,
                p: None,
            },
        });
    }
    view
}

/// Draw one dataset and fit every analysis model to it.
#[wasm_bindgen]
pub fn simulate_and_fit(
    cohort_label: &str,
    effect_label: &str,
    n_clusters: usize,
    n_steps: usize,
    cluster_size: usize,
    theta: f64,
    seed: u64,
) -> Result<String, String> {
    let cohort = cohort(cohort_label)?;
    let params = SimParams::defaults(cohort, effect(effect_label)?, cluster_size, theta);
    let mut rng = seeded(seed);
    let arms = randomize_arms(n_clusters, n_steps, &mut rng).map_err(|e| e.to_string())?;
    let design = build_design(n_clusters, n_steps, &arms).map_err(|e| e.to_string())?;
    let ds = generate_dataset(cohort, &design, &params, &mut rng).map_err(|e| e.to_string())?;

    let periods = n_steps + 1;
    let mut sums = vec![vec![0.0; periods]; n_clusters];
    let mut counts = vec![vec![0usize; periods]; n_clusters];
    for o in &ds.observations {
        sums[o.cluster][o.period - 1] += o.outcome;
        counts[o.cluster][o.period - 1] += 1;
    }
    for (s, c) in sums.iter_mut().zip(&counts) {
        for (v, &n) in s.iter_mut().zip(c) {
            *v /= n.max(1) as f64;
        }
    }
    to_json(&DatasetView {
        n_observations: ds.observations.len(),
        n_individuals: ds.individuals.len(),
        cluster_period_means: sums,
        exposure: (0..n_clusters)
            .map(|i| design.exposure_row(i).to_vec())
            .collect(),
        fits: ModelSpec::ALL.iter().map(|&m| fit_one(&ds, m)).collect(),
    })
}

#[derive(Serialize)]
struct MonteCarloView {
    scenario_id: String,
    rows: Vec<SummaryRow>,
    /// Estimates of the requested model, replicate order, non-fits skipped.
    estimates: Vec<f64>,
}

/// Small Monte Carlo run of one model with every variance estimator.
#[wasm_bindgen]
pub fn mini_monte_carlo(
    cohort_label: &str,
    effect_label: &str,
    n_clusters: usize,
    n_steps: usize,
    cluster_size: usize,
    theta: f64,
    model_label: &str,
    n_sim: usize,
    seed: u64,
) -> Result<String, String> {
    if n_sim > MAX_BROWSER_SIM {
        return Err(format!(
            "at most {MAX_BROWSER_SIM} replicates in the browser"
        ));
    }
    let mut cfg = ScenarioConfig::new(
        cohort(cohort_label)?,
        effect(effect_label)?,
        n_clusters,
        n_steps,
        cluster_size,
        theta,
        n_sim,
    );
    cfg.models = vec![model(model_label)?];
    cfg.master_seed = seed;
    let run = run_scenario(&cfg, 1).map_err(|e| e.to_string())?;
    let estimates = run
        .records
        .iter()
        .filter(|r| r.estimator == Estimator::ModelBased && r.converged)
        .filter_map(|r| r.theta_hat)
        .collect();
    to_json(&MonteCarloView {
        scenario_id: run.summary.scenario_id.clone(),
        rows: run.summary.rows,
        estimates,
    })
}
