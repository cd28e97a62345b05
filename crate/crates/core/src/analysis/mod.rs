//! Covariate-shift measurement and the multi-seed comparison statistics.

mod nn;
mod stats;

use nalgebra::{SMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub use nn::NearestTree;
pub use stats::{ln_gamma, paired_t_test, regularized_incomplete_beta, student_t_cdf, PairedTestResult, TestFlag};

use crate::data::{DemoSet, Trajectory, STATE_DIM};
use crate::error::{Error, Result};

type Vector = [f64; STATE_DIM];

/// Principal axes of standardized states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vector,
    /// Per-dimension sample std used for standardizing (1 for constant dims).
    pub scale: Vector,
    /// Orthonormal rows, ordered by decreasing explained variance.
    pub components: Vec<Vector>,
    pub explained_variance: Vec<f64>,
    /// Trace of the standardized covariance.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn dims(&self) -> usize {
        self.components.len()
    }

    pub fn standardize(&self, x: &Vector) -> Vector {
        std::array::from_fn(|d| (x[d] - self.mean[d]) / self.scale[d])
    }

    pub fn project(&self, x: &Vector) -> Vec<f64> {
        let z = self.standardize(x);
        self.components.iter().map(|c| dot(c, &z)).collect()
    }

    /// Sum of squared residuals off the principal subspace, divided by `n - 1`
    /// like the covariance.
    pub fn reconstruction_error(&self, states: &[Vector]) -> Result<f64> {
        if states.len() < 2 {
            return Err(Error::InsufficientData("reconstruction error needs 2 states".into()));
        }
        let mut sum = 0.0;
        for x in states {
            let mut z = self.standardize(x);
            for c in &self.components {
                let a = dot(c, &z);
                for d in 0..STATE_DIM {
                    z[d] -= a * c[d];
                }
            }
            sum += dot(&z, &z);
        }
        Ok(sum / (states.len() - 1) as f64)
    }
}

fn dot(a: &Vector, b: &Vector) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relative eigenvalue threshold below which a direction counts as empty.
const RANK_TOL: f64 = 1e-10;

/// Fit the top `dims` principal components of the standardized states.
pub fn pca_fit(states: &[Vector], dims: usize) -> Result<PcaModel> {
    if dims == 0 || dims > STATE_DIM {
        return Err(Error::InvalidArgument(format!("PCA dims must lie in 1..={STATE_DIM}, got {dims}")));
    }
    if states.len() < 2 {
        return Err(Error::InsufficientData(format!("PCA needs at least 2 states, got {}", states.len())));
    }
    if states.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("PCA input contains non-finite values".into()));
    }
    let n = states.len() as f64;
    let mut mean = [0.0; STATE_DIM];
    for x in states {
        for d in 0..STATE_DIM {
            mean[d] += x[d] / n;
        }
    }
    let mut var = [0.0; STATE_DIM];
    for x in states {
        for d in 0..STATE_DIM {
            var[d] += (x[d] - mean[d]).powi(2) / (n - 1.0);
        }
    }
    let scale = var.map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });

    let mut cov = SMatrix::<f64, STATE_DIM, STATE_DIM>::zeros();
    for x in states {
        let z: Vector = std::array::from_fn(|d| (x[d] - mean[d]) / scale[d]);
        for i in 0..STATE_DIM {
            for j in i..STATE_DIM {
                cov[(i, j)] += z[i] * z[j] / (n - 1.0);
            }
        }
    }
    for i in 0..STATE_DIM {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..STATE_DIM).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let tol = RANK_TOL * total_variance.max(f64::MIN_POSITIVE);
    let achievable = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
    if achievable < dims {
        return Err(Error::ReducedRank {
            requested: dims,
            achievable,
        });
    }
    let mut components = Vec::with_capacity(dims);
    let mut explained_variance = Vec::with_capacity(dims);
    for &i in order.iter().take(dims) {
        let mut c: Vector = std::array::from_fn(|d| eig.eigenvectors[(d, i)]);
        // Deterministic sign: largest-magnitude entry positive.
        let lead = (0..STATE_DIM).fold(0, |m, d| if c[d].abs() > c[m].abs() { d } else { m });
        if c[lead] < 0.0 {
            c = c.map(|v| -v);
        }
        components.push(c);
        explained_variance.push(eig.eigenvalues[i]);
    }
    Ok(PcaModel {
        mean,
        scale,
        components,
        explained_variance,
        total_variance,
    })
}

/// Every state of every trajectory, flattened.
pub fn flatten_states<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Vec<Vector> {
    trajectories
        .into_iter()
        .flat_map(|t| t.steps.iter().map(|s| s.state.to_array()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub agent_name: String,
    /// Mean distance from each rollout state to its nearest demo state,
    /// measured in the standardized 11-D state space.
    pub mean_nn_distance: f64,
    pub p95_nn_distance: f64,
    pub projected_points: Vec<Vec<f64>>,
    pub demo_projected: Vec<Vec<f64>>,
}

impl ShiftReport {
    /// `x,y,source,agent` rows for the first two principal coordinates.
    pub fn point_cloud_csv(&self, header: bool) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        if header {
            out.push_str("x,y,source,agent\n");
        }
        let xy = |p: &Vec<f64>| (p[0], p.get(1).copied().unwrap_or(0.0));
        for (src, pts) in [("demo", &self.demo_projected), ("rollout", &self.projected_points)] {
            for p in pts {
                let (x, y) = xy(p);
                let _ = writeln!(out, "{x},{y},{src},{}", self.agent_name);
            }
        }
        out
    }
}

/// Distance-to-support of the states an agent visited.
pub fn shift_metric(agent_name: &str, demos: &DemoSet, rollouts: &[Trajectory], pca: &PcaModel) -> Result<ShiftReport> {
    let visited = flatten_states(rollouts);
    if visited.is_empty() {
        return Err(Error::InvalidArgument("shift metric needs at least one rollout state".into()));
    }
    if let Some(t) = rollouts.iter().find(|t| t.frame().is_some_and(|f| f != demos.frame())) {
        return Err(Error::Validation(format!(
            "rollout {} is {} but the demonstrations are {}",
            t.id,
            t.frame().expect("nonempty"),
            demos.frame()
        )));
    }
    let demo_states = flatten_states(demos.trajectories());
    let tree = NearestTree::new(demo_states.iter().map(|x| pca.standardize(x)).collect())?;
    let mut dists: Vec<f64> = visited.iter().map(|x| tree.nearest(&pca.standardize(x)).1).collect();
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    dists.sort_by(f64::total_cmp);
    let p95 = crate::ensemble::quantile(&dists, 0.95)?;
    Ok(ShiftReport {
        agent_name: agent_name.to_string(),
        mean_nn_distance: mean,
        p95_nn_distance: p95,
        projected_points: visited.iter().map(|x| pca.project(x)).collect(),
        demo_projected: demo_states.iter().map(|x| pca.project(x)).collect(),
    })
}
