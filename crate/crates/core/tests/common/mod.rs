#![allow(dead_code)]

pub mod oracle;

use oracle::DenseProblem;
use rand::Rng;
use swcrt_core::datagen::generate_dataset;
use swcrt_core::design::{build_design, randomize_arms};
use swcrt_core::rng::seeded;
use swcrt_core::{Cohort, CovariateEffect, Dataset, ModelSpec, SimParams};

pub fn dataset(
    cohort: Cohort,
    effect: CovariateEffect,
    (i, j, k): (usize, usize, usize),
    theta: f64,
    seed: u64,
) -> Dataset {
    let params = SimParams::defaults(cohort, effect, k, theta);
    dataset_with(cohort, params, i, j, seed)
}

pub fn dataset_with(cohort: Cohort, params: SimParams, i: usize, j: usize, seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    let arms = randomize_arms(i, j, &mut rng).unwrap();
    let design = build_design(i, j, &arms).unwrap();
    generate_dataset(cohort, &design, &params, &mut rng).unwrap()
}

/// Small instance number `n`: alternating cohorts, effects and models with
/// random variance components.
pub fn small_instance(n: u64) -> DenseProblem {
    let mut rng = seeded(7000 + n);
    let cohort = if n % 2 == 0 {
        Cohort::Closed
    } else {
        Cohort::Open
    };
    let effect = if n % 3 == 0 {
        CovariateEffect::Nonlinear
    } else {
        CovariateEffect::Linear
    };
    let (i, k) = if n % 4 < 2 { (2, 3) } else { (4, 3) };
    let mut params = SimParams::defaults(cohort, effect, k, rng.random_range(-1.0..1.0));
    params.var_cluster = rng.random_range(0.5..30.0);
    params.var_individual = rng.random_range(0.5..30.0);
    params.var_error = rng.random_range(5.0..40.0);
    let ds = dataset_with(cohort, params, i, 2, 100 + n);
    let spec = ModelSpec::ALL[(n % 4) as usize];
    // The stepwise covariate model is badly scaled under the quartic term.
    let spec = if spec == ModelSpec::StepwiseLinearCov && effect == CovariateEffect::Nonlinear {
        ModelSpec::FixedTime
    } else {
        spec
    };
    DenseProblem::from_dataset(&ds, spec)
}
