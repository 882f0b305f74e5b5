//! Closed- and open-cohort outcome generation.
//!
//! Outcomes follow
//! `y = mu + c_i + d_ik + theta * x_ij + beta_con * a_ijk^p + e_ijk`
//! with normal cluster effects `c_i`, individual effects `d_ik` and
//! residuals `e_ijk`. The covariate `a_ijk` is drawn once per individual at
//! entry and grows by one unit per period.

use std::io::{self, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::TrialDesign;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Closed,
    Open,
}

impl Cohort {
    pub fn label(self) -> &'static str {
        match self {
            Cohort::Closed => "closed",
            Cohort::Open => "open",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateEffect {
    Linear,
    Nonlinear,
}

impl CovariateEffect {
    pub fn label(self) -> &'static str {
        match self {
            CovariateEffect::Linear => "linear",
            CovariateEffect::Nonlinear => "nonlinear",
        }
    }

    pub fn exponent(self) -> i32 {
        match self {
            CovariateEffect::Linear => 1,
            CovariateEffect::Nonlinear => 4,
        }
    }

    pub fn coefficient(self) -> f64 {
        match self {
            CovariateEffect::Linear => -2.0,
            CovariateEffect::Nonlinear => nonlinear_coefficient(),
        }
    }
}

/// Coefficient of the quartic covariate term.
///
/// `-2 / 32^4` makes `beta * a^4` span roughly the same range over ages
/// 18..102 as the linear term `-2 * a` (about -206 at a = 102).
pub fn nonlinear_coefficient() -> f64 {
    -2.0 / 32f64.powi(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub mu: f64,
    pub theta: f64,
    pub beta_con: f64,
    /// Exponent of the covariate term (1 linear, 4 nonlinear).
    pub exponent: i32,
    pub var_cluster: f64,
    pub var_individual: f64,
    pub var_error: f64,
    pub baseline_cov_low: f64,
    pub baseline_cov_high: f64,
    /// Entry covariate range for open-cohort joiners.
    pub joiner_cov_low: f64,
    pub joiner_cov_high: f64,
    pub cluster_size: usize,
    /// Per-step probability that a member leaves (open cohort only).
    pub attrition: f64,
}

impl SimParams {
    /// Default scenario values: mu = 100, variances 10/10/20, baseline ages
    /// Uniform(18, 102), joiners Uniform(18, 96) and 15% attrition for open
    /// cohorts.
    pub fn defaults(
        cohort: Cohort,
        effect: CovariateEffect,
        cluster_size: usize,
        theta: f64,
    ) -> Self {
        SimParams {
            mu: 100.0,
            theta,
            beta_con: effect.coefficient(),
            exponent: effect.exponent(),
            var_cluster: 10.0,
            var_individual: 10.0,
            var_error: 20.0,
            baseline_cov_low: 18.0,
            baseline_cov_high: 102.0,
            joiner_cov_low: 18.0,
            joiner_cov_high: 96.0,
            cluster_size,
            attrition: match cohort {
                Cohort::Closed => 0.0,
                Cohort::Open => 0.15,
            },
        }
    }

    /// Correlation between two measurements of the same individual.
    pub fn within_individual_icc(&self) -> f64 {
        let between = self.var_cluster + self.var_individual;
        between / (between + self.var_error)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.cluster_size == 0 {
            return bad("cluster size must be positive".into());
        }
        for (name, v) in [
            ("var_cluster", self.var_cluster),
            ("var_individual", self.var_individual),
            ("var_error", self.var_error),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!(
                    "{name} must be a nonnegative finite number, got {v}"
                ));
            }
        }
        if !(self.baseline_cov_low < self.baseline_cov_high) {
            return bad("baseline covariate range is empty".into());
        }
        if !(self.joiner_cov_low < self.joiner_cov_high) {
            return bad("joiner covariate range is empty".into());
        }
        if !(0.0..1.0).contains(&self.attrition) {
            return bad(format!("attrition {} outside [0, 1)", self.attrition));
        }
        if self.exponent < 1 {
            return bad(format!("covariate exponent {} must be >= 1", self.exponent));
        }
        for (name, v) in [
            ("mu", self.mu),
            ("theta", self.theta),
            ("beta_con", self.beta_con),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} is not finite"));
            }
        }
        Ok(())
    }

    fn covariate_term(&self, a: f64) -> f64 {
        self.beta_con * a.powi(self.exponent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub cluster: usize,
    /// 1-based period.
    pub period: usize,
    pub individual: usize,
    pub exposed: bool,
    pub covariate: f64,
    pub outcome: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub cluster: usize,
    pub entry_period: usize,
    pub exit_period: usize,
    /// Covariate value at the entry period.
    pub baseline_covariate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub design: TrialDesign,
    pub params: SimParams,
    /// Free-form description of the random stream that produced the data.
    pub provenance: Option<String>,
    pub observations: Vec<Observation>,
    pub individuals: Vec<Individual>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = Some(provenance.into());
        self
    }

    /// Writes `cluster,period,individual,exposed,covariate,outcome`, one row
    /// per observation. Cluster and individual ids are written 1-based.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "cluster,period,individual,exposed,covariate,outcome")?;
        for o in &self.observations {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                o.cluster + 1,
                o.period,
                o.individual + 1,
                u8::from(o.exposed),
                o.covariate,
                o.outcome
            )?;
        }
        Ok(())
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    variance.sqrt() * z
}

struct Member {
    id: usize,
    effect: f64,
    entry_covariate: f64,
    entry_period: usize,
}

fn generate<R: Rng + ?Sized>(
    design: &TrialDesign,
    params: &SimParams,
    rng: &mut R,
) -> Result<Dataset> {
    params.validate()?;
    let k = params.cluster_size;
    let n_periods = design.n_periods();
    let mut observations = Vec::with_capacity(design.n_clusters() * n_periods * k);
    let mut individuals: Vec<Individual> = Vec::new();

    for cluster in 0..design.n_clusters() {
        let cluster_effect = normal(rng, params.var_cluster);
        let mut members: Vec<Member> = (0..k)
            .map(|_| {
                let entry_covariate =
                    rng.random_range(params.baseline_cov_low..params.baseline_cov_high);
                let effect = normal(rng, params.var_individual);
                individuals.push(Individual {
                    cluster,
                    entry_period: 1,
                    exit_period: n_periods,
                    baseline_covariate: entry_covariate,
                });
                Member {
                    id: individuals.len() - 1,
                    effect,
                    entry_covariate,
                    entry_period: 1,
                }
            })
            .collect();

        for period in 1..=n_periods {
            let exposed = design.is_exposed(cluster, period);
            let intervention = if exposed { params.theta } else { 0.0 };
            for m in &members {
                let covariate = m.entry_covariate + (period - m.entry_period) as f64;
                let mean = params.mu
                    + cluster_effect
                    + m.effect
                    + intervention
                    + params.covariate_term(covariate);
                observations.push(Observation {
                    cluster,
                    period,
                    individual: m.id,
                    exposed,
                    covariate,
                    outcome: mean + normal(rng, params.var_error),
                });
            }

            if period < n_periods && params.attrition > 0.0 {
                for m in members.iter_mut() {
                    if rng.random::<f64>() < params.attrition {
                        individuals[m.id].exit_period = period;
                        let entry_covariate =
                            rng.random_range(params.joiner_cov_low..params.joiner_cov_high);
                        let effect = normal(rng, params.var_individual);
                        individuals.push(Individual {
                            cluster,
                            entry_period: period + 1,
                            exit_period: n_periods,
                            baseline_covariate: entry_covariate,
                        });
                        *m = Member {
                            id: individuals.len() - 1,
                            effect,
                            entry_covariate,
                            entry_period: period + 1,
                        };
                    }
                }
            }
        }
    }

    Ok(Dataset {
        design: design.clone(),
        params: params.clone(),
        provenance: None,
        observations,
        individuals,
    })
}

/// Closed cohort: the same `K` individuals are measured in every period.
pub fn generate_closed<R: Rng + ?Sized>(
    design: &TrialDesign,
    params: &SimParams,
    rng: &mut R,
) -> Result<Dataset> {
    if params.attrition != 0.0 {
        return Err(Error::InvalidParams(
            "closed cohorts require zero attrition".into(),
        ));
    }
    generate(design, params, rng)
}

/// Open cohort: after each period every member leaves independently with
/// probability `attrition` and is replaced one-for-one by a joiner whose
/// covariate is drawn from the joiner range at entry.
pub fn generate_open<R: Rng + ?Sized>(
    design: &TrialDesign,
    params: &SimParams,
    rng: &mut R,
) -> Result<Dataset> {
    generate(design, params, rng)
}

pub fn generate_dataset<R: Rng + ?Sized>(
    cohort: Cohort,
    design: &TrialDesign,
    params: &SimParams,
    rng: &mut R,
) -> Result<Dataset> {
    match cohort {
        Cohort::Closed => generate_closed(design, params, rng),
        Cohort::Open => generate_open(design, params, rng),
    }
}
