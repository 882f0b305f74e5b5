use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::{Error, Result};

/// The four covariate-adjustment strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelSpec {
    /// Intercept, intervention and the current covariate value.
    #[serde(rename = "eq1")]
    StepwiseLinearCov,
    /// Intercept, intervention and period dummies.
    #[serde(rename = "eq2")]
    FixedTime,
    /// Period dummies plus the covariate value at entry.
    #[serde(rename = "eq3")]
    FixedTimePlusBaselineCov,
    /// Period dummies plus the current covariate value.
    #[serde(rename = "eq4")]
    FixedTimePlusStepwiseCov,
}

impl ModelSpec {
    pub const ALL: [ModelSpec; 4] = [
        ModelSpec::StepwiseLinearCov,
        ModelSpec::FixedTime,
        ModelSpec::FixedTimePlusBaselineCov,
        ModelSpec::FixedTimePlusStepwiseCov,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ModelSpec::StepwiseLinearCov => "eq1",
            ModelSpec::FixedTime => "eq2",
            ModelSpec::FixedTimePlusBaselineCov => "eq3",
            ModelSpec::FixedTimePlusStepwiseCov => "eq4",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(label))
    }

    pub fn has_period_effects(self) -> bool {
        !matches!(self, ModelSpec::StepwiseLinearCov)
    }

    /// Number of fixed-effect columns for a design with `n_steps` steps.
    pub fn n_columns(self, n_steps: usize) -> usize {
        match self {
            ModelSpec::StepwiseLinearCov => 3,
            ModelSpec::FixedTime => 2 + n_steps,
            ModelSpec::FixedTimePlusBaselineCov | ModelSpec::FixedTimePlusStepwiseCov => {
                3 + n_steps
            }
        }
    }
}

/// Row grouping by cluster and by individual.
#[derive(Debug, Clone)]
pub(crate) struct Grouping {
    /// Rows of each cluster.
    pub cluster_rows: Vec<Vec<usize>>,
    /// Individuals (dense ids) belonging to each cluster.
    pub cluster_members: Vec<Vec<usize>>,
    /// For each row of a cluster, the position of its individual in
    /// `cluster_members`.
    pub cluster_row_slot: Vec<Vec<usize>>,
    /// Rows of each individual.
    pub individual_rows: Vec<Vec<usize>>,
}

/// Per-individual and per-cluster sums of the data.
#[derive(Debug, Clone)]
pub(crate) struct SuffStats {
    pub p: usize,
    pub n_obs: usize,
    /// Observation count per individual.
    pub counts: Vec<f64>,
    /// Row-major `n_individuals x p` column sums of X per individual.
    pub sum_x: Vec<f64>,
    pub sum_y: Vec<f64>,
    pub cluster_xtx: Vec<DMatrix<f64>>,
    pub cluster_xty: Vec<DVector<f64>>,
    pub cluster_yty: Vec<f64>,
}

impl SuffStats {
    pub fn sum_x(&self, individual: usize) -> &[f64] {
        &self.sum_x[individual * self.p..(individual + 1) * self.p]
    }
}

/// Fixed-effects design, outcome and grouping for one dataset and model.
#[derive(Debug, Clone)]
pub struct ModelMatrices {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Dense 0-based cluster index of each row.
    pub cluster_index: Vec<usize>,
    /// Dense 0-based individual index of each row.
    pub individual_index: Vec<usize>,
    /// Unit vector selecting the intervention coefficient.
    pub contrast_theta: DVector<f64>,
    pub column_names: Vec<String>,
    pub(crate) groups: Grouping,
    pub(crate) stats: SuffStats,
}

impl ModelMatrices {
    /// Assemble matrices from raw inputs. Cluster and individual labels may
    /// be arbitrary; they are re-indexed densely in increasing label order.
    /// Individuals must be nested within clusters and `x` must have full
    /// column rank.
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        cluster_labels: &[usize],
        individual_labels: &[usize],
        contrast_theta: DVector<f64>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        let p = x.ncols();
        if n == 0 || p == 0 {
            return Err(Error::InvalidModel("empty design matrix".into()));
        }
        if y.len() != n || cluster_labels.len() != n || individual_labels.len() != n {
            return Err(Error::InvalidModel("row counts of inputs disagree".into()));
        }
        if contrast_theta.len() != p || column_names.len() != p {
            return Err(Error::InvalidModel(
                "contrast or column names do not match column count".into(),
            ));
        }
        if n <= p {
            return Err(Error::InvalidModel(format!(
                "{n} observations cannot support {p} fixed effects"
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite entries in X or y".into()));
        }

        let dense = |labels: &[usize]| -> (Vec<usize>, usize) {
            let mut map = BTreeMap::new();
            for &l in labels {
                map.entry(l).or_insert(0usize);
            }
            for (i, v) in map.values_mut().enumerate() {
                *v = i;
            }
            (labels.iter().map(|l| map[l]).collect(), map.len())
        };
        let (cluster_index, n_clusters) = dense(cluster_labels);
        let (individual_index, n_individuals) = dense(individual_labels);

        let mut individual_cluster = vec![usize::MAX; n_individuals];
        for (&c, &k) in cluster_index.iter().zip(&individual_index) {
            if individual_cluster[k] == usize::MAX {
                individual_cluster[k] = c;
            } else if individual_cluster[k] != c {
                return Err(Error::InvalidModel(format!(
                    "individual {} appears in more than one cluster",
                    individual_labels[individual_index.iter().position(|&v| v == k).unwrap()]
                )));
            }
        }

        check_rank(&x)?;

        let mut cluster_rows = vec![Vec::new(); n_clusters];
        let mut individual_rows = vec![Vec::new(); n_individuals];
        for r in 0..n {
            cluster_rows[cluster_index[r]].push(r);
            individual_rows[individual_index[r]].push(r);
        }
        let mut cluster_members = vec![Vec::new(); n_clusters];
        for (k, &c) in individual_cluster.iter().enumerate() {
            cluster_members[c].push(k);
        }
        let mut slot_of = vec![0usize; n_individuals];
        for members in &cluster_members {
            for (slot, &k) in members.iter().enumerate() {
                slot_of[k] = slot;
            }
        }
        let cluster_row_slot = cluster_rows
            .iter()
            .map(|rows| rows.iter().map(|&r| slot_of[individual_index[r]]).collect())
            .collect();
        let groups = Grouping {
            cluster_rows,
            cluster_members,
            cluster_row_slot,
            individual_rows,
        };
        let stats = compute_stats(&x, &y, &groups);
        Ok(ModelMatrices {
            x,
            y,
            cluster_index,
            individual_index,
            contrast_theta,
            column_names,
            groups,
            stats,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_clusters(&self) -> usize {
        self.groups.cluster_rows.len()
    }

    pub fn n_individuals(&self) -> usize {
        self.groups.individual_rows.len()
    }

    pub fn cluster_rows(&self, cluster: usize) -> &[usize] {
        &self.groups.cluster_rows[cluster]
    }

    pub fn cluster_members(&self, cluster: usize) -> &[usize] {
        &self.groups.cluster_members[cluster]
    }

    pub fn individual_rows(&self, individual: usize) -> &[usize] {
        &self.groups.individual_rows[individual]
    }

    /// Rows of X belonging to one cluster.
    pub fn cluster_x(&self, cluster: usize) -> DMatrix<f64> {
        self.x.select_rows(self.cluster_rows(cluster))
    }

    /// Entries of a length-N vector belonging to one cluster.
    pub fn cluster_part(&self, v: &DVector<f64>, cluster: usize) -> DVector<f64> {
        v.select_rows(self.cluster_rows(cluster))
    }
}

/// Rank check on the column-equilibrated cross-product matrix.
fn check_rank(x: &DMatrix<f64>) -> Result<()> {
    let p = x.ncols();
    let xtx = x.tr_mul(x);
    let scale: Vec<f64> = (0..p).map(|j| xtx[(j, j)].sqrt()).collect();
    if scale.contains(&0.0) {
        let rank = scale.iter().filter(|&&s| s > 0.0).count();
        return Err(Error::RankDeficient { rank, cols: p });
    }
    let corr = DMatrix::from_fn(p, p, |i, j| xtx[(i, j)] / (scale[i] * scale[j]));
    let eig = corr.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let rank = eig.eigenvalues.iter().filter(|&&l| l > 1e-10 * max).count();
    if rank < p {
        return Err(Error::RankDeficient { rank, cols: p });
    }
    Ok(())
}

fn compute_stats(x: &DMatrix<f64>, y: &DVector<f64>, groups: &Grouping) -> SuffStats {
    let p = x.ncols();
    let n_ind = groups.individual_rows.len();
    let mut counts = vec![0.0; n_ind];
    let mut sum_x = vec![0.0; n_ind * p];
    let mut sum_y = vec![0.0; n_ind];
    for (k, rows) in groups.individual_rows.iter().enumerate() {
        counts[k] = rows.len() as f64;
        let sx = &mut sum_x[k * p..(k + 1) * p];
        for &r in rows {
            for (j, s) in sx.iter_mut().enumerate() {
                *s += x[(r, j)];
            }
            sum_y[k] += y[r];
        }
    }
    let mut cluster_xtx = Vec::with_capacity(groups.cluster_rows.len());
    let mut cluster_xty = Vec::with_capacity(groups.cluster_rows.len());
    let mut cluster_yty = Vec::with_capacity(groups.cluster_rows.len());
    for rows in &groups.cluster_rows {
        let xs = x.select_rows(rows);
        let ys = y.select_rows(rows);
        cluster_xtx.push(xs.tr_mul(&xs));
        cluster_xty.push(xs.tr_mul(&ys));
        cluster_yty.push(ys.dot(&ys));
    }
    SuffStats {
        p,
        n_obs: x.nrows(),
        counts,
        sum_x,
        sum_y,
        cluster_xtx,
        cluster_xty,
        cluster_yty,
    }
}

/// Build the fixed-effects matrix of `spec` for a simulated dataset.
///
/// Column layout: intercept, intervention indicator, then either the current
/// covariate (eq1) or dummies for periods `2..=J+1` followed, for eq3/eq4, by
/// the entry or current covariate value.
pub fn build_matrices(dataset: &Dataset, spec: ModelSpec) -> Result<ModelMatrices> {
    if dataset.is_empty() {
        return Err(Error::InvalidModel("dataset has no observations".into()));
    }
    let n = dataset.len();
    let n_steps = dataset.design.n_steps();
    let p = spec.n_columns(n_steps);

    let mut names = vec!["(Intercept)".to_string(), "treatment".to_string()];
    if spec.has_period_effects() {
        names.extend((2..=n_steps + 1).map(|j| format!("period{j}")));
    }
    match spec {
        ModelSpec::StepwiseLinearCov | ModelSpec::FixedTimePlusStepwiseCov => {
            names.push("covariate".into())
        }
        ModelSpec::FixedTimePlusBaselineCov => names.push("baseline_covariate".into()),
        ModelSpec::FixedTime => {}
    }
    debug_assert_eq!(names.len(), p);

    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    let mut clusters = Vec::with_capacity(n);
    let mut individuals = Vec::with_capacity(n);
    for (r, o) in dataset.observations.iter().enumerate() {
        x[(r, 0)] = 1.0;
        x[(r, 1)] = if o.exposed { 1.0 } else { 0.0 };
        let mut col = 2;
        if spec.has_period_effects() {
            if o.period >= 2 {
                x[(r, col + o.period - 2)] = 1.0;
            }
            col += n_steps;
        }
        match spec {
            ModelSpec::StepwiseLinearCov | ModelSpec::FixedTimePlusStepwiseCov => {
                x[(r, col)] = o.covariate
            }
            ModelSpec::FixedTimePlusBaselineCov => {
                x[(r, col)] = dataset.individuals[o.individual].baseline_covariate
            }
            ModelSpec::FixedTime => {}
        }
        y[r] = o.outcome;
        clusters.push(o.cluster);
        individuals.push(o.individual);
    }
    let mut contrast = DVector::zeros(p);
    contrast[1] = 1.0;
    ModelMatrices::new(x, y, &clusters, &individuals, contrast, names)
}
