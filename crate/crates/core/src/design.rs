//! Standard stepped-wedge layouts.
//!
//! Periods are 1-based: period 1 is the pre-rollout period in which every
//! cluster is under control, and step `s` is the transition into period
//! `s + 1`. Arms are numbered `1..=n_steps`; a cluster in arm `a` is exposed
//! from period `a + 1` onwards.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialDesign {
    n_clusters: usize,
    n_steps: usize,
    arm_of_cluster: Vec<usize>,
    /// Row-major `n_clusters x n_periods` exposure indicators.
    exposure: Vec<u8>,
}

impl TrialDesign {
    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_periods(&self) -> usize {
        self.n_steps + 1
    }

    pub fn clusters_per_arm(&self) -> usize {
        self.n_clusters / self.n_steps
    }

    /// Arm (1-based) of a 0-based cluster index.
    pub fn arm_of(&self, cluster: usize) -> usize {
        self.arm_of_cluster[cluster]
    }

    pub fn arms(&self) -> &[usize] {
        &self.arm_of_cluster
    }

    /// Exposure indicator for a 0-based cluster and a 1-based period.
    pub fn is_exposed(&self, cluster: usize, period: usize) -> bool {
        debug_assert!(period >= 1 && period <= self.n_periods());
        self.exposure[cluster * self.n_periods() + period - 1] == 1
    }

    /// Exposure row of one cluster, periods `1..=J+1`.
    pub fn exposure_row(&self, cluster: usize) -> &[u8] {
        let np = self.n_periods();
        &self.exposure[cluster * np..(cluster + 1) * np]
    }

    /// Number of exposed clusters in each period.
    pub fn column_sums(&self) -> Vec<usize> {
        (1..=self.n_periods())
            .map(|j| {
                (0..self.n_clusters)
                    .filter(|&i| self.is_exposed(i, j))
                    .count()
            })
            .collect()
    }
}

fn check_dimensions(n_clusters: usize, n_steps: usize) -> Result<()> {
    if n_clusters == 0 || n_steps == 0 {
        return Err(Error::InvalidDesign(
            "cluster and step counts must be positive".into(),
        ));
    }
    if !n_clusters.is_multiple_of(n_steps) {
        return Err(Error::InvalidDesign(format!(
            "{n_clusters} clusters cannot be split evenly over {n_steps} steps"
        )));
    }
    Ok(())
}

/// Build a design from an explicit cluster-to-arm assignment.
///
/// `arm_assignment[i]` is the 1-based arm of cluster `i`; each arm must hold
/// exactly `n_clusters / n_steps` clusters.
pub fn build_design(
    n_clusters: usize,
    n_steps: usize,
    arm_assignment: &[usize],
) -> Result<TrialDesign> {
    check_dimensions(n_clusters, n_steps)?;
    if arm_assignment.len() != n_clusters {
        return Err(Error::InvalidDesign(format!(
            "assignment covers {} clusters, expected {n_clusters}",
            arm_assignment.len()
        )));
    }
    let per_arm = n_clusters / n_steps;
    let mut counts = vec![0usize; n_steps];
    for &arm in arm_assignment {
        if arm == 0 || arm > n_steps {
            return Err(Error::InvalidDesign(format!(
                "arm {arm} outside 1..={n_steps}"
            )));
        }
        counts[arm - 1] += 1;
    }
    if let Some(pos) = counts.iter().position(|&c| c != per_arm) {
        return Err(Error::InvalidDesign(format!(
            "arm {} holds {} clusters, expected {per_arm}",
            pos + 1,
            counts[pos]
        )));
    }

    let n_periods = n_steps + 1;
    let mut exposure = vec![0u8; n_clusters * n_periods];
    for (i, &arm) in arm_assignment.iter().enumerate() {
        for j in 1..=n_periods {
            exposure[i * n_periods + j - 1] = u8::from(j > arm);
        }
    }
    Ok(TrialDesign {
        n_clusters,
        n_steps,
        arm_of_cluster: arm_assignment.to_vec(),
        exposure,
    })
}

/// Assignment in which clusters `0..I/J` form arm 1, the next block arm 2, etc.
pub fn sequential_arms(n_clusters: usize, n_steps: usize) -> Result<Vec<usize>> {
    check_dimensions(n_clusters, n_steps)?;
    let per_arm = n_clusters / n_steps;
    Ok((0..n_clusters).map(|i| i / per_arm + 1).collect())
}

/// Uniformly random balanced assignment of clusters to arms.
pub fn randomize_arms<R: Rng + ?Sized>(
    n_clusters: usize,
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut arms = sequential_arms(n_clusters, n_steps)?;
    arms.shuffle(rng);
    Ok(arms)
}
