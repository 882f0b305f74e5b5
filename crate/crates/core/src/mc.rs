//! Monte Carlo scenario runner and performance measures.
//!
//! A scenario fixes the design, the data-generating model and the list of
//! analysis models and variance estimators. Each replicate randomizes the
//! arms, draws one dataset, fits every model once and evaluates every
//! estimator on that fit. Aggregation is a sequential fold in replicate
//! order, so results do not depend on the number of worker threads.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::datagen::{generate_dataset, Cohort, CovariateEffect, SimParams};
use crate::design::{build_design, randomize_arms};
use crate::lmm::{build_matrices, fit_reml, satterthwaite_df_model, FitOptions, ModelSpec};
use crate::rng::replicate_rng;
use crate::robust::{cr_vcov, Cr2Variant, Estimator, RobustOptions, TestResult};
use crate::{Error, Result};

fn default_alpha() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_clusters: usize,
    pub n_steps: usize,
    pub cluster_size: usize,
    pub cohort: Cohort,
    pub effect: CovariateEffect,
    #[serde(default)]
    pub theta: f64,
    pub models: Vec<ModelSpec>,
    pub estimators: Vec<Estimator>,
    pub n_sim: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_true")]
    pub exclude_nonconverged: bool,
    #[serde(default)]
    pub cr2_variant: Cr2Variant,
}

impl ScenarioConfig {
    /// Scenario with every model and estimator and the usual defaults.
    pub fn new(
        cohort: Cohort,
        effect: CovariateEffect,
        n_clusters: usize,
        n_steps: usize,
        cluster_size: usize,
        theta: f64,
        n_sim: usize,
    ) -> Self {
        ScenarioConfig {
            n_clusters,
            n_steps,
            cluster_size,
            cohort,
            effect,
            theta,
            models: ModelSpec::ALL.to_vec(),
            estimators: Estimator::ALL.to_vec(),
            n_sim,
            alpha: 0.05,
            master_seed: 0,
            exclude_nonconverged: true,
            cr2_variant: Cr2Variant::Exact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sim == 0 {
            return Err(Error::InvalidConfig("n_sim must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !self.theta.is_finite() {
            return Err(Error::InvalidConfig("theta must be finite".into()));
        }
        if self.models.is_empty() {
            return Err(Error::InvalidConfig("no models requested".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig("no estimators requested".into()));
        }
        self.sim_params().validate()?;
        build_design(
            self.n_clusters,
            self.n_steps,
            &crate::design::sequential_arms(self.n_clusters, self.n_steps)?,
        )?;
        Ok(())
    }

    pub fn sim_params(&self) -> SimParams {
        SimParams::defaults(self.cohort, self.effect, self.cluster_size, self.theta)
    }

    /// Identifies the data-generating scenario. Configurations that differ
    /// only in models, estimators or replicate count share datasets.
    pub fn fingerprint(&self) -> String {
        format!(
            "{}|{}|I={}|J={}|K={}|theta={:016x}",
            self.cohort.label(),
            self.effect.label(),
            self.n_clusters,
            self.n_steps,
            self.cluster_size,
            self.theta.to_bits()
        )
    }

    /// Human-readable scenario id used in file names and CSV rows.
    pub fn scenario_id(&self) -> String {
        format!(
            "{}-{}-I{}-J{}-K{}-theta{}",
            self.cohort.label(),
            self.effect.label(),
            self.n_clusters,
            self.n_steps,
            self.cluster_size,
            self.theta
        )
    }
}

/// Outcome of one estimator applied to one model fit in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub model: ModelSpec,
    pub estimator: Estimator,
    /// `None` when the model could not be fitted at all.
    pub theta_hat: Option<f64>,
    /// `None` when the estimator failed on this fit.
    pub se: Option<f64>,
    /// `None` when the degrees of freedom were unavailable (normal reference).
    pub df: Option<f64>,
    pub p: Option<f64>,
    pub converged: bool,
    pub singular: bool,
}

impl ReplicateRecord {
    fn fit_failed(replicate: usize, model: ModelSpec, estimator: Estimator) -> Self {
        ReplicateRecord {
            replicate,
            model,
            estimator,
            theta_hat: None,
            se: None,
            df: None,
            p: None,
            converged: false,
            singular: false,
        }
    }
}

/// Records for one replicate, ordered by model then estimator as listed in
/// the configuration.
pub fn run_replicate(cfg: &ScenarioConfig, replicate: usize) -> Vec<ReplicateRecord> {
    let mut out = Vec::with_capacity(cfg.models.len() * cfg.estimators.len());
    let mut rng = replicate_rng(cfg.master_seed, &cfg.fingerprint(), replicate as u64);
    let dataset = randomize_arms(cfg.n_clusters, cfg.n_steps, &mut rng)
        .and_then(|arms| build_design(cfg.n_clusters, cfg.n_steps, &arms))
        .and_then(|design| generate_dataset(cfg.cohort, &design, &cfg.sim_params(), &mut rng));
    let robust_opts = RobustOptions {
        cr2: cfg.cr2_variant,
        ..RobustOptions::default()
    };
    for &model in &cfg.models {
        let fitted = dataset
            .as_ref()
            .map_err(Clone::clone)
            .and_then(|ds| build_matrices(ds, model))
            .and_then(|m| fit_reml(&m, &FitOptions::default()).map(|f| (m, f)));
        let Ok((mats, fit)) = fitted else {
            out.extend(
                cfg.estimators
                    .iter()
                    .map(|&e| ReplicateRecord::fit_failed(replicate, model, e)),
            );
            continue;
        };
        let c = &mats.contrast_theta;
        let theta_hat = fit.theta_hat(c);
        for &estimator in &cfg.estimators {
            let test = match estimator {
                Estimator::ModelBased => {
                    let df = satterthwaite_df_model(&mats, &fit, c).ok();
                    Some(TestResult::new(theta_hat, fit.model_se(c), df, estimator))
                }
                // A CR2 cluster that needed the eigenvalue floor counts as a failure.
                _ => cr_vcov(&mats, &fit, estimator, &robust_opts)
                    .ok()
                    .filter(|r| r.floored_clusters == 0)
                    .map(|r| {
                        TestResult::new(
                            theta_hat,
                            r.se(c),
                            Some(r.satterthwaite_df_theta),
                            estimator,
                        )
                    }),
            };
            out.push(ReplicateRecord {
                replicate,
                model,
                estimator,
                theta_hat: Some(theta_hat),
                se: test.map(|t| t.se),
                df: test.and_then(|t| t.df),
                p: test.map(|t| t.p_value),
                converged: fit.converged,
                singular: fit.singular,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: ModelSpec,
    pub estimator: Estimator,
    pub n_sim: usize,
    pub bias: Option<f64>,
    pub empirical_se: Option<f64>,
    pub avg_model_se: Option<f64>,
    pub pct_se_error: Option<f64>,
    pub rejection_rate: Option<f64>,
    pub mc_se_of_bias: Option<f64>,
    /// Replicates whose fit entered the metrics.
    pub n_used: usize,
    pub n_nonconverged: usize,
    pub n_singular: usize,
    /// Used replicates on which this estimator failed; they are left out of
    /// the SE and rejection metrics.
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario_id: String,
    pub config: ScenarioConfig,
    pub rows: Vec<SummaryRow>,
}

impl ScenarioSummary {
    pub fn row(&self, model: ModelSpec, estimator: Estimator) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.estimator == estimator)
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub summary: ScenarioSummary,
    pub records: Vec<ReplicateRecord>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize_cell(
    cfg: &ScenarioConfig,
    model: ModelSpec,
    estimator: Estimator,
    cell: &[&ReplicateRecord],
) -> SummaryRow {
    let fitted: Vec<&&ReplicateRecord> = cell.iter().filter(|r| r.theta_hat.is_some()).collect();
    let n_nonconverged = cell.iter().filter(|r| !r.converged).count();
    let n_singular = cell.iter().filter(|r| r.singular).count();
    let used: Vec<&&ReplicateRecord> = fitted
        .into_iter()
        .filter(|r| r.converged || !cfg.exclude_nonconverged)
        .collect();
    let estimates: Vec<f64> = used.iter().filter_map(|r| r.theta_hat).collect();
    let tested: Vec<(f64, f64)> = used.iter().filter_map(|r| Some((r.se?, r.p?))).collect();
    let n = estimates.len();

    let bias = (n >= 1).then(|| mean(&estimates) - cfg.theta);
    let empirical_se = (n >= 2).then(|| {
        let m = mean(&estimates);
        (estimates.iter().map(|t| (t - m).powi(2)).sum::<f64>() / n as f64).sqrt()
    });
    let ses: Vec<f64> = tested.iter().map(|t| t.0).collect();
    let avg_model_se = (n >= 2 && !ses.is_empty()).then(|| mean(&ses));
    let pct_se_error = match (avg_model_se, empirical_se) {
        (Some(a), Some(e)) if e > 0.0 => Some(100.0 * (a / e - 1.0)),
        _ => None,
    };
    let rejection_rate = (!tested.is_empty())
        .then(|| tested.iter().filter(|t| t.1 < cfg.alpha).count() as f64 / tested.len() as f64);
    SummaryRow {
        model,
        estimator,
        n_sim: cell.len(),
        bias,
        empirical_se,
        avg_model_se,
        pct_se_error,
        rejection_rate,
        mc_se_of_bias: empirical_se.map(|s| s / (n as f64).sqrt()),
        n_used: n,
        n_nonconverged,
        n_singular,
        n_failed: n - tested.len(),
    }
}

/// Performance measures per (model, estimator) from replicate records.
/// Records are folded in replicate order.
pub fn aggregate(cfg: &ScenarioConfig, records: &[ReplicateRecord]) -> ScenarioSummary {
    let mut sorted: Vec<&ReplicateRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.replicate);
    let mut rows = Vec::new();
    for &model in &cfg.models {
        for &estimator in &cfg.estimators {
            let cell: Vec<&ReplicateRecord> = sorted
                .iter()
                .copied()
                .filter(|r| r.model == model && r.estimator == estimator)
                .collect();
            rows.push(summarize_cell(cfg, model, estimator, &cell));
        }
    }
    ScenarioSummary {
        scenario_id: cfg.scenario_id(),
        config: cfg.clone(),
        rows,
    }
}

/// Run all replicates of a scenario on up to `workers` threads.
pub fn run_scenario(cfg: &ScenarioConfig, workers: usize) -> Result<ScenarioRun> {
    cfg.validate()?;
    let per_replicate = run_replicates(cfg, workers.max(1))?;
    let records: Vec<ReplicateRecord> = per_replicate.into_iter().flatten().collect();
    Ok(ScenarioRun {
        summary: aggregate(cfg, &records),
        records,
    })
}

#[cfg(feature = "parallel")]
fn run_replicates(cfg: &ScenarioConfig, workers: usize) -> Result<Vec<Vec<ReplicateRecord>>> {
    use rayon::prelude::*;
    if workers == 1 {
        return Ok((0..cfg.n_sim).map(|r| run_replicate(cfg, r)).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        (0..cfg.n_sim)
            .into_par_iter()
            .map(|r| run_replicate(cfg, r))
            .collect()
    }))
}

#[cfg(not(feature = "parallel"))]
fn run_replicates(cfg: &ScenarioConfig, _workers: usize) -> Result<Vec<Vec<ReplicateRecord>>> {
    Ok((0..cfg.n_sim).map(|r| run_replicate(cfg, r)).collect())
}

/// Central 95% band for an empirical rejection rate under
/// `Binomial(n_sim, alpha)`: the 2.5% and 97.5% quantiles divided by
/// `n_sim`.
pub fn binomial_band(n_sim: usize, alpha: f64) -> (f64, f64) {
    let n = n_sim.max(1) as u64;
    let dist = Binomial::new(alpha, n).expect("alpha in [0, 1]");
    // Same fuzz as R's qbinom so exact ties resolve identically.
    let quantile = |q: f64| -> u64 {
        let target = q * (1.0 - 64.0 * f64::EPSILON);
        (0..=n).find(|&k| dist.cdf(k) >= target).unwrap_or(n)
    };
    (
        quantile(0.025) as f64 / n as f64,
        quantile(0.975) as f64 / n as f64,
    )
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

fn parse_opt(s: &str) -> std::result::Result<Option<f64>, String> {
    if s == "NA" || s.is_empty() {
        Ok(None)
    } else {
        s.parse()
            .map(Some)
            .map_err(|e| format!("bad number {s:?}: {e}"))
    }
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "TRUE" | "1" => Ok(true),
        "false" | "FALSE" | "0" => Ok(false),
        _ => Err(format!("bad boolean {s:?}")),
    }
}

pub const REPLICATE_HEADER: [&str; 10] = [
    "scenario_id",
    "replicate",
    "model",
    "estimator",
    "theta_hat",
    "se",
    "df",
    "p",
    "converged",
    "singular",
];

pub const SUMMARY_HEADER: [&str; 22] = [
    "scenario_id",
    "cohort",
    "effect",
    "I",
    "J",
    "K",
    "theta",
    "model",
    "estimator",
    "n_sim",
    "alpha",
    "bias",
    "empirical_se",
    "avg_model_se",
    "pct_se_error",
    "rejection_rate",
    "mc_se_of_bias",
    "n_used",
    "n_nonconverged",
    "n_singular",
    "n_failed",
    "exclude_nonconverged",
];

/// Per-replicate CSV; replicate numbers are 1-based in the file.
pub fn write_replicates_csv<W: Write>(
    scenario_id: &str,
    records: &[ReplicateRecord],
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPLICATE_HEADER)?;
    for r in records {
        w.write_record([
            scenario_id.to_string(),
            (r.replicate + 1).to_string(),
            r.model.label().to_string(),
            r.estimator.label().to_string(),
            fmt_opt(r.theta_hat),
            fmt_opt(r.se),
            fmt_opt(r.df),
            fmt_opt(r.p),
            r.converged.to_string(),
            r.singular.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_replicates_csv`]; returns the scenario id of the rows.
pub fn read_replicates_csv<R: Read>(input: R) -> Result<(Option<String>, Vec<ReplicateRecord>)> {
    let bad =
        |line: u64, msg: String| Error::InvalidConfig(format!("replicate csv line {line}: {msg}"));
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?
        .clone();
    if header.iter().ne(REPLICATE_HEADER.iter().copied()) {
        return Err(Error::InvalidConfig(
            "replicate csv has an unexpected header".into(),
        ));
    }
    let mut id = None;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        id.get_or_insert_with(|| row[0].to_string());
        let replicate: usize = row[1].parse().map_err(|e| bad(line, format!("{e}")))?;
        let rec = ReplicateRecord {
            replicate: replicate
                .checked_sub(1)
                .ok_or_else(|| bad(line, "replicate numbers start at 1".into()))?,
            model: ModelSpec::from_label(&row[2])
                .ok_or_else(|| bad(line, format!("unknown model {:?}", &row[2])))?,
            estimator: Estimator::from_label(&row[3])
                .ok_or_else(|| bad(line, format!("unknown estimator {:?}", &row[3])))?,
            theta_hat: parse_opt(&row[4]).map_err(|m| bad(line, m))?,
            se: parse_opt(&row[5]).map_err(|m| bad(line, m))?,
            df: parse_opt(&row[6]).map_err(|m| bad(line, m))?,
            p: parse_opt(&row[7]).map_err(|m| bad(line, m))?,
            converged: parse_bool(&row[8]).map_err(|m| bad(line, m))?,
            singular: parse_bool(&row[9]).map_err(|m| bad(line, m))?,
        };
        out.push(rec);
    }
    Ok((id, out))
}

/// Summary CSV with one row per (scenario, model, estimator).
pub fn write_summary_csv<W: Write>(summaries: &[ScenarioSummary], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for s in summaries {
        let c = &s.config;
        for r in &s.rows {
            w.write_record([
                s.scenario_id.clone(),
                c.cohort.label().to_string(),
                c.effect.label().to_string(),
                c.n_clusters.to_string(),
                c.n_steps.to_string(),
                c.cluster_size.to_string(),
                format!("{}", c.theta),
                r.model.label().to_string(),
                r.estimator.label().to_string(),
                r.n_sim.to_string(),
                format!("{}", c.alpha),
                fmt_opt(r.bias),
                fmt_opt(r.empirical_se),
                fmt_opt(r.avg_model_se),
                fmt_opt(r.pct_se_error),
                fmt_opt(r.rejection_rate),
                fmt_opt(r.mc_se_of_bias),
                r.n_used.to_string(),
                r.n_nonconverged.to_string(),
                r.n_singular.to_string(),
                r.n_failed.to_string(),
                c.exclude_nonconverged.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
