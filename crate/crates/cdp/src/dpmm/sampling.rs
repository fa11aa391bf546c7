//! Log-space posterior sampling for weights, parameters, and assignments.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use super::{DpmmState, SparsePoint};
use crate::rng::{derive_rng, PH_ASSIGN, PH_PARAMS};

/// log(sum(exp(xs))) with max shifting; -inf for an empty slice.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Draws log-probabilities from Dirichlet(alphas) without leaving log space,
/// so tiny concentrations cannot round a component to exactly zero.
///
/// Each coordinate is a Gamma(alpha) draw; for alpha < 1 the draw is
/// represented as log(Gamma(alpha + 1) draw) + log(U)/alpha, which stays
/// finite where a direct Gamma(alpha) sample underflows.
pub(crate) fn sample_log_dirichlet(rng: &mut ChaCha8Rng, alphas: &[f64]) -> Vec<f64> {
    debug_assert!(alphas.iter().all(|a| a.is_finite() && *a > 0.0));
    let mut logs: Vec<f64> = alphas
        .iter()
        .map(|&a| {
            if a < 1.0 {
                let x = Gamma::new(a + 1.0, 1.0).expect("valid shape").sample(rng);
                let u: f64 = 1.0 - rng.gen::<f64>();
                x.max(f64::MIN_POSITIVE).ln() + u.ln() / a
            } else {
                let x = Gamma::new(a, 1.0).expect("valid shape").sample(rng);
                x.max(f64::MIN_POSITIVE).ln()
            }
        })
        .collect();
    let norm = log_sum_exp(&logs);
    for l in &mut logs {
        *l -= norm;
    }
    logs
}

/// Samples an index proportional to exp(log_weights), max-shifted.
pub(crate) fn sample_categorical_log(rng: &mut ChaCha8Rng, log_weights: &[f64]) -> usize {
    debug_assert!(!log_weights.is_empty());
    let m = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(m.is_finite(), "all categorical weights vanished");
    let probs: Vec<f64> = log_weights.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = probs.iter().sum();
    debug_assert!(total > 0.0);
    let mut u = rng.gen::<f64>() * total;
    for (k, p) in probs.iter().enumerate() {
        u -= p;
        if u < 0.0 {
            return k;
        }
    }
    probs.len() - 1
}

/// Refreshes cluster weights, cluster parameters, and both sub-cluster
/// halves from their Dirichlet posteriors.
///
/// Cluster weights include one auxiliary component with concentration gamma
/// for the unoccupied remainder of the process; it is sampled and dropped.
/// Each cluster consumes its own derived RNG stream, so the refresh is
/// independent of cluster iteration order.
pub fn sample_cluster_params(state: &mut DpmmState, seed: u64, iter: usize) {
    let gamma = state.gamma;
    let beta = state.beta.clone();
    state
        .clusters
        .par_iter_mut()
        .enumerate()
        .for_each(|(k, cl)| {
            let mut rng = derive_rng(seed, &[PH_PARAMS, iter as u64, k as u64]);
            let post: Vec<f64> = beta
                .iter()
                .zip(&cl.stat)
                .map(|(b, &t)| b + t as f64)
                .collect();
            cl.log_param = sample_log_dirichlet(&mut rng, &post);
            for side in [&mut cl.left, &mut cl.right] {
                let post: Vec<f64> = beta
                    .iter()
                    .zip(&side.stat)
                    .map(|(b, &t)| b + t as f64)
                    .collect();
                side.log_param = sample_log_dirichlet(&mut rng, &post);
            }
            let sub = sample_log_dirichlet(
                &mut rng,
                &[
                    cl.left.count as f64 + gamma / 2.0,
                    cl.right.count as f64 + gamma / 2.0,
                ],
            );
            cl.left.log_weight = sub[0];
            cl.right.log_weight = sub[1];
        });

    // Mixture weights, with the auxiliary empty-cluster mass appended.
    let mut rng = derive_rng(seed, &[PH_PARAMS, iter as u64, u64::MAX]);
    let mut alphas: Vec<f64> = state.clusters.iter().map(|c| c.count as f64).collect();
    alphas.push(gamma);
    // Occupied clusters always have count >= 1; the auxiliary term is gamma > 0.
    let logw = sample_log_dirichlet(&mut rng, &alphas);
    for (cl, lw) in state.clusters.iter_mut().zip(&logw) {
        cl.log_weight = *lw;
    }
}

/// Log-likelihood of a sparse point under fixed log category probabilities.
#[inline]
fn log_lik(point: &SparsePoint, log_param: &[f64]) -> f64 {
    point
        .iter()
        .map(|&(j, x)| x as f64 * log_param[j as usize])
        .sum()
}

/// Per-chunk partial sufficient statistics, merged in chunk order.
struct ChunkOut {
    start: usize,
    labels: Vec<u32>,
    left_side: Vec<bool>,
    count: Vec<usize>,
    stat: Vec<Vec<u64>>,
    left_count: Vec<usize>,
    left_stat: Vec<Vec<u64>>,
}

/// Reassigns every point to a cluster and a sub-cluster side, holding the
/// cluster count fixed.
///
/// Points are processed in `workers` contiguous chunks, each with its own
/// derived RNG stream, and partial statistics are reduced in chunk order;
/// the result is identical for any rayon thread count. Zero-total points
/// carry no likelihood and are assigned uniformly at random.
pub fn sample_assignments(
    points: &[SparsePoint],
    totals: &[u64],
    state: &mut DpmmState,
    seed: u64,
    iter: usize,
    workers: usize,
) {
    let n = points.len();
    let k = state.k();
    let dim = state.dim;
    let chunk = n.div_ceil(workers.max(1));
    let clusters = &state.clusters;

    let outputs: Vec<ChunkOut> = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let start = c * chunk;
            let end = (start + chunk).min(n);
            let mut rng = derive_rng(seed, &[PH_ASSIGN, iter as u64, c as u64]);
            let mut out = ChunkOut {
                start,
                labels: Vec::with_capacity(end - start),
                left_side: Vec::with_capacity(end - start),
                count: vec![0; k],
                stat: vec![vec![0; dim]; k],
                left_count: vec![0; k],
                left_stat: vec![vec![0; dim]; k],
            };
            let mut logp = vec![0.0; k];
            for i in start..end {
                let point = &points[i];
                let label = if totals[i] == 0 {
                    rng.gen_range(0..k)
                } else {
                    for (z, cl) in clusters.iter().enumerate() {
                        logp[z] = cl.log_weight + log_lik(point, &cl.log_param);
                    }
                    sample_categorical_log(&mut rng, &logp)
                };
                let cl = &clusters[label];
                let side = if totals[i] == 0 {
                    rng.gen::<bool>()
                } else {
                    let lq = [
                        cl.left.log_weight + log_lik(point, &cl.left.log_param),
                        cl.right.log_weight + log_lik(point, &cl.right.log_param),
                    ];
                    sample_categorical_log(&mut rng, &lq) == 0
                };
                out.labels.push(label as u32);
                out.left_side.push(side);
                out.count[label] += 1;
                if side {
                    out.left_count[label] += 1;
                }
                for &(j, x) in point {
                    out.stat[label][j as usize] += x;
                    if side {
                        out.left_stat[label][j as usize] += x;
                    }
                }
            }
            out
        })
        .collect();

    for cl in &mut state.clusters {
        cl.count = 0;
        cl.stat.iter_mut().for_each(|t| *t = 0);
        for side in [&mut cl.left, &mut cl.right] {
            side.count = 0;
            side.stat.iter_mut().for_each(|t| *t = 0);
        }
    }
    for out in outputs {
        state.labels[out.start..out.start + out.labels.len()].copy_from_slice(&out.labels);
        for (i, side) in out.left_side.iter().enumerate() {
            state.left_side[out.start + i] = *side;
        }
        for (z, cl) in state.clusters.iter_mut().enumerate() {
            cl.count += out.count[z];
            cl.left.count += out.left_count[z];
            for j in 0..dim {
                cl.stat[j] += out.stat[z][j];
                cl.left.stat[j] += out.left_stat[z][j];
            }
        }
    }
    for cl in &mut state.clusters {
        cl.right.count = cl.count - cl.left.count;
        for j in 0..dim {
            cl.right.stat[j] = cl.stat[j] - cl.left.stat[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpmm::ClusterState;
    use approx::assert_abs_diff_eq;

    fn rng(tag: u64) -> ChaCha8Rng {
        derive_rng(tag, &[99, 0, 0])
    }

    #[test]
    fn log_dirichlet_draws_normalize() {
        let mut r = rng(1);
        for alphas in [
            vec![1.0, 1.0, 1.0],
            vec![0.01, 0.02, 5.0],
            vec![1e-4, 1e-4],
            vec![1e6, 1.0],
        ] {
            for _ in 0..50 {
                let logs = sample_log_dirichlet(&mut r, &alphas);
                assert!(logs.iter().all(|l| l.is_finite() && *l <= 0.0));
                let total: f64 = logs.iter().map(|l| l.exp()).sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn log_dirichlet_concentrates_on_heavy_component() {
        // Posterior after one component absorbs 1e6 observations: its
        // probability must be overwhelmingly close to one on every draw.
        let mut r = rng(2);
        for _ in 0..20 {
            let logs = sample_log_dirichlet(&mut r, &[1e6 + 0.5, 0.5]);
            assert!(logs[0] > (0.99f64).ln(), "heavy draw {}", logs[0]);
            assert!(logs[1] < (0.01f64).ln());
        }
    }

    #[test]
    fn log_dirichlet_mean_matches_alpha_ratio() {
        let mut r = rng(3);
        let alphas = [2.0, 6.0];
        let mut mean = 0.0;
        let draws = 20_000;
        for _ in 0..draws {
            mean += sample_log_dirichlet(&mut r, &alphas)[0].exp();
        }
        mean /= draws as f64;
        // E[p0] = 0.25, sd of the estimator ~= 0.15/sqrt(draws) ~= 0.0011.
        assert_abs_diff_eq!(mean, 0.25, epsilon = 0.005);
    }

    #[test]
    fn categorical_respects_dominant_weight() {
        let mut r = rng(4);
        let lw = [(1e-12f64).ln(), 0.0];
        for _ in 0..200 {
            assert_eq!(sample_categorical_log(&mut r, &lw), 1);
        }
        let lw = [-1e4, -1e4 + (1e12f64).ln()];
        for _ in 0..200 {
            assert_eq!(sample_categorical_log(&mut r, &lw), 1);
        }
    }

    #[test]
    fn categorical_frequencies_track_weights() {
        let mut r = rng(5);
        let lw = [(0.2f64).ln(), (0.5f64).ln(), (0.3f64).ln()];
        let mut hits = [0usize; 3];
        let draws = 30_000;
        for _ in 0..draws {
            hits[sample_categorical_log(&mut r, &lw)] += 1;
        }
        for (h, p) in hits.iter().zip([0.2, 0.5, 0.3]) {
            assert_abs_diff_eq!(*h as f64 / draws as f64, p, epsilon = 0.01);
        }
    }

    fn toy_state(points: &[SparsePoint], labels: Vec<u32>, k: usize) -> DpmmState {
        let mut state = DpmmState {
            clusters: (0..k).map(|_| ClusterState::empty(2)).collect(),
            left_side: vec![true; points.len()],
            labels,
            dim: 2,
            beta: vec![0.5, 0.5],
            sum_beta: 1.0,
            gamma: 1.0,
        };
        state.rebuild_stats(points);
        state
    }

    #[test]
    fn assignments_follow_disjoint_support() {
        // Two clusters with near-disjoint parameter support: every point
        // must land on the cluster carrying its category.
        let points: Vec<SparsePoint> = (0..40)
            .map(|i| {
                if i % 2 == 0 {
                    vec![(0u32, 5u64)]
                } else {
                    vec![(1u32, 5u64)]
                }
            })
            .collect();
        let totals: Vec<u64> = vec![5; 40];
        let mut state = toy_state(&points, vec![0; 40], 2);
        state.clusters[0].log_param = vec![(0.999f64).ln(), (0.001f64).ln()];
        state.clusters[1].log_param = vec![(0.001f64).ln(), (0.999f64).ln()];
        for k in 0..2 {
            let cl = &mut state.clusters[k];
            cl.log_weight = (0.5f64).ln();
            for side in [&mut cl.left, &mut cl.right] {
                side.log_weight = (0.5f64).ln();
                side.log_param = vec![(0.5f64).ln(); 2];
            }
        }
        sample_assignments(&points, &totals, &mut state, 7, 0, 3);
        for (i, l) in state.labels.iter().enumerate() {
            assert_eq!(*l as usize, i % 2);
        }
        assert_eq!(state.clusters[0].count, 20);
        assert_eq!(state.clusters[0].stat, vec![100, 0]);
        assert_eq!(
            state.clusters[0].left.stat[0] + state.clusters[0].right.stat[0],
            100
        );
    }

    #[test]
    fn assignments_are_stable_across_rayon_threading() {
        let points: Vec<SparsePoint> = (0..97).map(|i| vec![(i % 2, 1 + i as u64 % 4)]).collect();
        let totals: Vec<u64> = points.iter().map(|p| p[0].1).collect();
        let labels: Vec<u32> = (0..97).map(|i| i % 2).collect();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let mut state = toy_state(&points, labels.clone(), 2);
                sample_cluster_params(&mut state, 3, 0);
                sample_assignments(&points, &totals, &mut state, 3, 0, 4);
                (state.labels.clone(), state.left_side.clone())
            })
        };
        assert_eq!(run(1), run(8));
    }

    #[test]
    fn params_are_deterministic_per_seed() {
        let points: Vec<SparsePoint> = vec![vec![(0, 3)], vec![(1, 2)]];
        let mut a = toy_state(&points, vec![0, 1], 2);
        let mut b = toy_state(&points, vec![0, 1], 2);
        sample_cluster_params(&mut a, 42, 7);
        sample_cluster_params(&mut b, 42, 7);
        for (x, y) in a.clusters.iter().zip(&b.clusters) {
            assert_eq!(x.log_param, y.log_param);
            assert_eq!(x.log_weight, y.log_weight);
            assert_eq!(x.left.log_weight, y.left.log_weight);
        }
        sample_cluster_params(&mut b, 42, 8);
        assert_ne!(a.clusters[0].log_param, b.clusters[0].log_param);
    }

    #[test]
    fn weights_include_auxiliary_mass() {
        // With one cluster the weight posterior is Dirichlet(count, gamma),
        // so the cluster weight must be strictly below one.
        let points: Vec<SparsePoint> = vec![vec![(0, 1)]; 10];
        let mut state = toy_state(&points, vec![0; 10], 1);
        sample_cluster_params(&mut state, 1, 0);
        let w = state.clusters[0].log_weight.exp();
        assert!(w < 1.0 && w > 0.0);
    }
}
