//! Dirichlet-process mixture inference for sparse count vectors.
//!
//! Restricted Gibbs sampling with instantiated cluster weights and
//! parameters keeps the cluster count fixed and is data-parallel over
//! points; every cluster additionally maintains a two-way sub-cluster
//! partition refreshed alongside the assignments. Cluster-count moves
//! happen only through the split/merge Metropolis-Hastings step, which
//! proposes seeded sequential allocations and prices them exactly.

mod sampling;
mod splitmerge;

pub use sampling::{sample_assignments, sample_cluster_params};
pub use splitmerge::{
    log_h_merge, log_h_split, log_marginal_dirmult, propose_merges, propose_splits,
};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, PH_INIT};

/// One data point: sparse (category, count) pairs.
pub type SparsePoint = Vec<(u32, u64)>;

/// Dirichlet base-measure hyperparameter; a scalar broadcasts to a
/// symmetric vector of the data dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Beta {
    Scalar(f64),
    PerCategory(Vec<f64>),
}

impl Beta {
    pub fn to_vec(&self, dim: usize) -> Result<Vec<f64>> {
        let v = match self {
            Beta::Scalar(b) => vec![*b; dim],
            Beta::PerCategory(v) => {
                if v.len() != dim {
                    return Err(Error::invalid(format!(
                        "beta vector has length {}, data dimension is {dim}",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if v.iter().any(|b| !b.is_finite() || *b <= 0.0) {
            return Err(Error::invalid("beta components must be positive"));
        }
        Ok(v)
    }
}

fn default_workers() -> usize {
    4
}

fn default_burn_in() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpmmConfig {
    /// DP concentration.
    pub gamma: f64,
    pub beta: Beta,
    pub iterations: usize,
    /// Usually overwritten by the caller's seed fan-out; 0 when omitted.
    #[serde(default)]
    pub seed: u64,
    /// Number of deterministic point chunks; fixes the RNG stream layout, so
    /// it is part of the reproducibility key.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in_fraction: f64,
    /// Assert sufficient-statistic conservation every iteration.
    #[serde(default)]
    pub check_invariants: bool,
}

impl DpmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::invalid("gamma must be positive"));
        }
        if let Beta::Scalar(b) = self.beta {
            if !b.is_finite() || b <= 0.0 {
                return Err(Error::invalid("beta components must be positive"));
            }
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::invalid("burn_in_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Half of a cluster's auxiliary two-way partition.
#[derive(Debug, Clone)]
pub struct SubCluster {
    pub count: usize,
    pub stat: Vec<u64>,
    pub log_param: Vec<f64>,
    pub log_weight: f64,
}

impl SubCluster {
    fn empty(dim: usize) -> Self {
        Self {
            count: 0,
            stat: vec![0; dim],
            log_param: vec![0.0; dim],
            log_weight: f64::ln(0.5),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    /// N_k: number of assigned points.
    pub count: usize,
    /// T_k: elementwise sum of assigned points.
    pub stat: Vec<u64>,
    pub log_param: Vec<f64>,
    pub log_weight: f64,
    pub left: SubCluster,
    pub right: SubCluster,
}

impl ClusterState {
    fn empty(dim: usize) -> Self {
        Self {
            count: 0,
            stat: vec![0; dim],
            log_param: vec![0.0; dim],
            log_weight: 0.0,
            left: SubCluster::empty(dim),
            right: SubCluster::empty(dim),
        }
    }
}

/// Full sampler state: clusters plus per-point cluster and sub-cluster labels.
#[derive(Debug)]
pub struct DpmmState {
    pub clusters: Vec<ClusterState>,
    pub labels: Vec<u32>,
    /// Sub-cluster side per point: true = left.
    pub left_side: Vec<bool>,
    pub(crate) dim: usize,
    pub(crate) beta: Vec<f64>,
    pub(crate) sum_beta: f64,
    pub(crate) gamma: f64,
}

impl DpmmState {
    /// Single cluster holding every point, sub-cluster sides uniform at random.
    pub fn init(points: &[SparsePoint], dim: usize, beta: Vec<f64>, gamma: f64, seed: u64) -> Self {
        let mut rng = derive_rng(seed, &[PH_INIT, 0, 0]);
        let left_side: Vec<bool> = points.iter().map(|_| rand::Rng::gen(&mut rng)).collect();
        let mut state = Self {
            clusters: vec![ClusterState::empty(dim)],
            labels: vec![0; points.len()],
            left_side,
            dim,
            sum_beta: beta.iter().sum(),
            beta,
            gamma,
        };
        state.rebuild_stats(points);
        state
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    /// Recomputes every cluster and sub-cluster count/stat from the labels.
    pub(crate) fn rebuild_stats(&mut self, points: &[SparsePoint]) {
        for cl in &mut self.clusters {
            cl.count = 0;
            cl.stat.iter_mut().for_each(|t| *t = 0);
            for side in [&mut cl.left, &mut cl.right] {
                side.count = 0;
                side.stat.iter_mut().for_each(|t| *t = 0);
            }
        }
        for (i, point) in points.iter().enumerate() {
            let cl = &mut self.clusters[self.labels[i] as usize];
            cl.count += 1;
            let side = if self.left_side[i] {
                &mut cl.left
            } else {
                &mut cl.right
            };
            side.count += 1;
            for &(j, x) in point {
                cl.stat[j as usize] += x;
                let side = if self.left_side[i] {
                    &mut cl.left
                } else {
                    &mut cl.right
                };
                side.stat[j as usize] += x;
            }
        }
    }

    /// Drops empty clusters and compacts labels to 0..K-1.
    pub(crate) fn prune_empty(&mut self) {
        if self.clusters.iter().all(|c| c.count > 0) {
            return;
        }
        let mut remap = vec![u32::MAX; self.clusters.len()];
        let mut kept = Vec::with_capacity(self.clusters.len());
        for (k, cl) in std::mem::take(&mut self.clusters).into_iter().enumerate() {
            if cl.count > 0 {
                remap[k] = kept.len() as u32;
                kept.push(cl);
            }
        }
        self.clusters = kept;
        for label in &mut self.labels {
            *label = remap[*label as usize];
            debug_assert!(*label != u32::MAX);
        }
    }

    /// Panics unless counts and statistics are conserved exactly.
    pub(crate) fn assert_conservation(&self, global_stat: &[u64], n_points: usize) {
        let total: usize = self.clusters.iter().map(|c| c.count).sum();
        assert_eq!(
            total, n_points,
            "cluster counts must sum to the point count"
        );
        let mut stat = vec![0u64; self.dim];
        for cl in &self.clusters {
            assert_eq!(
                cl.left.count + cl.right.count,
                cl.count,
                "sub-cluster counts must sum to the cluster count"
            );
            for (j, acc) in stat.iter_mut().enumerate() {
                *acc += cl.stat[j];
                assert_eq!(
                    cl.left.stat[j] + cl.right.stat[j],
                    cl.stat[j],
                    "sub-cluster stats must sum to the cluster stat"
                );
            }
        }
        assert_eq!(
            stat, global_stat,
            "cluster stats must sum to the data totals"
        );
    }
}

/// Per-iteration cluster labels (compacted) and cluster counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentTrace {
    pub labels: Vec<Vec<u32>>,
    pub k: Vec<u32>,
}

impl AssignmentTrace {
    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    /// Full trace: one row per (iteration, point).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("iteration,point_index,label\n");
        for (it, labels) in self.labels.iter().enumerate() {
            for (i, l) in labels.iter().enumerate() {
                let _ = writeln!(out, "{it},{i},{l}");
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Cluster-count trace: one row per iteration.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("iteration,k\n");
        for (it, k) in self.k.iter().enumerate() {
            let _ = writeln!(out, "{it},{k}");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Runs the sampler on rows-as-points data of the given dimension.
///
/// Each iteration refreshes weights and parameters, reassigns points and
/// sub-cluster sides in parallel, then proposes one round of splits and one
/// round of merges. Labels are recorded after compaction every iteration.
pub fn run_dpmm(points: &[SparsePoint], dim: usize, cfg: &DpmmConfig) -> Result<AssignmentTrace> {
    cfg.validate()?;
    if points.is_empty() || dim == 0 {
        return Err(Error::invalid("need at least one point and one category"));
    }
    let beta = cfg.beta.to_vec(dim)?;

    let totals: Vec<u64> = points
        .iter()
        .map(|p| p.iter().map(|&(_, x)| x).sum())
        .collect();
    let zero_points = totals.iter().filter(|&&t| t == 0).count();
    if zero_points == points.len() {
        return Err(Error::invalid("every point has zero total"));
    }
    if zero_points > 0 {
        log::warn!(
            "{zero_points} of {} points have zero total; each is assigned uniformly at random",
            points.len()
        );
    }
    let mut global_stat = vec![0u64; dim];
    for p in points {
        for &(j, x) in p {
            global_stat[j as usize] += x;
        }
    }

    let mut state = DpmmState::init(points, dim, beta, cfg.gamma, cfg.seed);
    let mut trace = AssignmentTrace {
        labels: Vec::with_capacity(cfg.iterations),
        k: Vec::with_capacity(cfg.iterations),
    };
    let check = cfg.check_invariants || cfg!(debug_assertions);
    for iter in 0..cfg.iterations {
        sample_cluster_params(&mut state, cfg.seed, iter);
        sample_assignments(points, &totals, &mut state, cfg.seed, iter, cfg.workers);
        state.prune_empty();
        propose_splits(&mut state, points, cfg.seed, iter);
        propose_merges(&mut state, points, cfg.seed, iter);
        if check {
            state.assert_conservation(&global_stat, points.len());
        }
        trace.labels.push(state.labels.clone());
        trace.k.push(state.k() as u32);
    }
    Ok(trace)
}
