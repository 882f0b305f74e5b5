//! Run configuration files.
//!
//! A configuration is a TOML (or JSON) document with optional run-wide
//! defaults, a list of presets and explicit `[[scenario]]` tables:
//!
//! ```toml
//! n_sim = 500
//! master_seed = 42
//! presets = ["table-s1-closed-linear"]
//!
//! [[scenario]]
//! cohort = "closed"
//! effect = ["linear", "nonlinear"]
//! I = [8, 16]
//! J = 4
//! K = 10
//! theta = 0.0
//! models = ["eq2"]
//! estimators = ["model", "cr3"]
//! ```
//!
//! Every axis of a scenario table (cohort, effect, I, J, K, theta) accepts
//! a single value or a list; lists expand into the full cross product.

use std::path::Path;

use serde::Deserialize;
use swcrt_core::robust::Cr2Variant;
use swcrt_core::{Cohort, CovariateEffect, Estimator, ModelSpec, ScenarioConfig};

use crate::CliError;

pub const SETTINGS: [(usize, usize, usize); 12] = [
    (8, 4, 10),
    (8, 4, 100),
    (8, 8, 10),
    (8, 8, 100),
    (16, 4, 10),
    (16, 4, 100),
    (16, 8, 10),
    (16, 8, 100),
    (32, 4, 10),
    (32, 4, 100),
    (32, 8, 10),
    (32, 8, 100),
];

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioTable {
    pub cohort: OneOrMany<Cohort>,
    pub effect: OneOrMany<CovariateEffect>,
    #[serde(rename = "I", alias = "n_clusters")]
    pub n_clusters: OneOrMany<usize>,
    #[serde(rename = "J", alias = "n_steps")]
    pub n_steps: OneOrMany<usize>,
    #[serde(rename = "K", alias = "cluster_size")]
    pub cluster_size: OneOrMany<usize>,
    #[serde(default)]
    pub theta: Option<OneOrMany<f64>>,
    #[serde(default)]
    pub models: Option<Vec<ModelSpec>>,
    #[serde(default)]
    pub estimators: Option<Vec<Estimator>>,
    #[serde(default)]
    pub n_sim: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub n_sim: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub exclude_nonconverged: Option<bool>,
    #[serde(default)]
    pub cr2_variant: Option<Cr2Variant>,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub presets: Vec<String>,
    #[serde(default, rename = "scenario")]
    pub scenarios: Vec<ScenarioTable>,
}

pub const DEFAULT_N_SIM: usize = 1000;

pub fn parse(text: &str, path: &Path) -> Result<ConfigFile, CliError> {
    let json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
        || text.trim_start().starts_with('{');
    if json {
        serde_json::from_str(text).map_err(|e| {
            CliError::Config(format!(
                "{}: line {}, column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })
    } else {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Expand presets and scenario tables into concrete scenarios, in file order
/// with presets first. Duplicates are dropped.
pub fn expand(file: &ConfigFile) -> Result<Vec<ScenarioConfig>, CliError> {
    let mut tables = Vec::new();
    for name in file.preset.iter().chain(&file.presets) {
        tables.extend(preset(name)?);
    }
    tables.extend(file.scenarios.iter().cloned());

    let mut out: Vec<ScenarioConfig> = Vec::new();
    for (t_idx, t) in tables.iter().enumerate() {
        for cohort in t.cohort.values() {
            for effect in t.effect.values() {
                for i in t.n_clusters.values() {
                    for j in t.n_steps.values() {
                        for k in t.cluster_size.values() {
                            let thetas = t.theta.as_ref().map_or(vec![0.0], |v| v.values());
                            for theta in thetas {
                                let n_sim = t.n_sim.or(file.n_sim).unwrap_or(DEFAULT_N_SIM);
                                let mut cfg =
                                    ScenarioConfig::new(cohort, effect, i, j, k, theta, n_sim);
                                if let Some(m) = &t.models {
                                    cfg.models = m.clone();
                                }
                                if let Some(e) = &t.estimators {
                                    cfg.estimators = e.clone();
                                }
                                cfg.alpha = t.alpha.or(file.alpha).unwrap_or(cfg.alpha);
                                cfg.master_seed = file.master_seed.unwrap_or(0);
                                cfg.exclude_nonconverged =
                                    file.exclude_nonconverged.unwrap_or(true);
                                cfg.cr2_variant = file.cr2_variant.unwrap_or_default();
                                cfg.validate().map_err(|e| {
                                    CliError::Config(format!("scenario {}: {e}", t_idx + 1))
                                })?;
                                if !out.iter().any(|o| o.scenario_id() == cfg.scenario_id()) {
                                    out.push(cfg);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("no scenarios".into()));
    }
    Ok(out)
}

pub const PRESET_NAMES: [&str; 12] = [
    "table-s1-closed-linear",
    "table-s1-closed-nonlinear",
    "table-s1-open-linear",
    "table-s1-open-nonlinear",
    "table-s2-closed-linear",
    "table-s2-closed-nonlinear",
    "table-s4-closed-linear",
    "table-s4-closed-nonlinear",
    "table-s5-closed-linear",
    "table-s5-closed-nonlinear",
    "type1-cr3-closed",
    "smoke",
];

/// Scenario tables behind a preset name. A leading `paper-` is ignored.
pub fn preset(name: &str) -> Result<Vec<ScenarioTable>, CliError> {
    let key = name.strip_prefix("paper-").unwrap_or(name);
    let unknown = || {
        CliError::Config(format!(
            "unknown preset {name:?}; known presets: {}",
            PRESET_NAMES.join(", ")
        ))
    };
    let grid = |cohort: Cohort, effect: CovariateEffect, theta: f64, estimators: &[Estimator]| {
        SETTINGS
            .iter()
            .map(|&(i, j, k)| ScenarioTable {
                cohort: OneOrMany::One(cohort),
                effect: OneOrMany::One(effect),
                n_clusters: OneOrMany::One(i),
                n_steps: OneOrMany::One(j),
                cluster_size: OneOrMany::One(k),
                theta: Some(OneOrMany::One(theta)),
                models: Some(ModelSpec::ALL.to_vec()),
                estimators: Some(estimators.to_vec()),
                n_sim: None,
                alpha: None,
            })
            .collect::<Vec<_>>()
    };
    if key == "smoke" {
        return Ok(vec![ScenarioTable {
            cohort: OneOrMany::Many(vec![Cohort::Closed, Cohort::Open]),
            effect: OneOrMany::One(CovariateEffect::Nonlinear),
            n_clusters: OneOrMany::One(8),
            n_steps: OneOrMany::One(4),
            cluster_size: OneOrMany::One(5),
            theta: None,
            models: None,
            estimators: None,
            n_sim: Some(20),
            alpha: None,
        }]);
    }
    if key == "type1-cr3-closed" {
        let mut out = Vec::new();
        for effect in [CovariateEffect::Linear, CovariateEffect::Nonlinear] {
            for mut t in grid(Cohort::Closed, effect, 0.0, &[Estimator::CR3]) {
                t.models = Some(vec![ModelSpec::FixedTime]);
                out.push(t);
            }
        }
        return Ok(out);
    }

    let mut parts = key.splitn(3, '-');
    let (Some("table"), Some(table), Some(rest)) = (parts.next(), parts.next(), parts.next())
    else {
        return Err(unknown());
    };
    let (cohort, effect) = match rest {
        "closed-linear" => (Cohort::Closed, CovariateEffect::Linear),
        "closed-nonlinear" => (Cohort::Closed, CovariateEffect::Nonlinear),
        "open-linear" => (Cohort::Open, CovariateEffect::Linear),
        "open-nonlinear" => (Cohort::Open, CovariateEffect::Nonlinear),
        _ => return Err(unknown()),
    };
    match table {
        "s1" => Ok(grid(cohort, effect, 0.0, &[Estimator::ModelBased])),
        "s2" | "s4" if cohort == Cohort::Closed => Ok(grid(cohort, effect, 0.0, &Estimator::ALL)),
        "s5" if cohort == Cohort::Closed => Ok(grid(cohort, effect, 1.0, &Estimator::ALL)),
        _ => Err(unknown()),
    }
}
