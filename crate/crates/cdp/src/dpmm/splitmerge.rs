//! Split and merge moves with exact Metropolis-Hastings accounting.
//!
//! Every move starts from a uniformly drawn ordered pair of distinct points.
//! A pair inside one cluster proposes a split: the two points seed new left
//! and right groups and the remaining members are allocated one at a time by
//! a size-weighted Dirichlet-multinomial predictive, whose total probability
//! is charged against the acceptance ratio. A pair straddling two clusters
//! proposes their merge, scored by the probability that the same allocation
//! pass would have rebuilt exactly those two clusters. Both directions run
//! the identical allocation code, so each accept probability is the exact
//! Hastings ratio for the partition posterior and the chain leaves it
//! invariant.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

use super::{ClusterState, DpmmState, SparsePoint, SubCluster};
use crate::dpmm::sampling::log_sum_exp;
use crate::rng::{derive_rng, PH_MERGE, PH_SPLIT};

/// Split and merge attempts per phase per iteration. Fixed ahead of time:
/// making the attempt count depend on the current cluster count would change
/// how often each kernel runs as a function of the state and bias the chain.
const SPLIT_MERGE_ATTEMPTS: u64 = 8;

/// Log marginal likelihood of a count vector under a Dirichlet prior,
/// without the multinomial coefficient:
/// lnGamma(sum beta) - lnGamma(sum beta + n) + sum_j [lnGamma(beta_j + T_j) - lnGamma(beta_j)].
///
/// Zero-count categories contribute nothing and are skipped, which keeps the
/// evaluation O(support) for sparse statistics.
pub fn log_marginal_dirmult(stat: &[u64], beta: &[f64], sum_beta: f64) -> f64 {
    debug_assert_eq!(stat.len(), beta.len());
    let n: u64 = stat.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let mut acc = ln_gamma(sum_beta) - ln_gamma(sum_beta + n as f64);
    for (&t, &b) in stat.iter().zip(beta) {
        if t > 0 {
            acc += ln_gamma(b + t as f64) - ln_gamma(b);
        }
    }
    acc
}

/// Log posterior ratio for splitting a cluster of n points (marginal ll)
/// into parts of n_l and n_r points:
/// ln gamma + lnGamma(n_l) + ll_l + lnGamma(n_r) + ll_r - lnGamma(n) - ll.
pub fn log_h_split(
    gamma: f64,
    n_l: usize,
    ll_l: f64,
    n_r: usize,
    ll_r: f64,
    n: usize,
    ll: f64,
) -> f64 {
    debug_assert!(n_l > 0 && n_r > 0 && n_l + n_r == n);
    gamma.ln() + ln_gamma(n_l as f64) + ll_l + ln_gamma(n_r as f64) + ll_r - ln_gamma(n as f64) - ll
}

/// Companion closed-form merge ratio: the reciprocal of the corresponding
/// split ratio, times the prior urn probability of the two-way size
/// configuration,
/// lnGamma(gamma) - 2 lnGamma(gamma/2) - lnGamma(n_m + gamma)
/// + lnGamma(n_1 + gamma/2) + lnGamma(n_2 + gamma/2).
///
/// `propose_merges` replaces the urn term with the probability of the
/// specific member allocation it reverses; this form is the limit in which
/// that allocation is scored by sizes alone.
pub fn log_h_merge(
    gamma: f64,
    n_1: usize,
    ll_1: f64,
    n_2: usize,
    ll_2: f64,
    n_m: usize,
    ll_m: f64,
) -> f64 {
    -log_h_split(gamma, n_1, ll_1, n_2, ll_2, n_m, ll_m) + ln_gamma(gamma)
        - 2.0 * ln_gamma(gamma / 2.0)
        - ln_gamma(n_m as f64 + gamma)
        + ln_gamma(n_1 as f64 + gamma / 2.0)
        + ln_gamma(n_2 as f64 + gamma / 2.0)
}

/// ln U with U uniform on (0, 1]; accept a move iff this is below log H.
fn log_uniform(rng: &mut ChaCha8Rng) -> f64 {
    (1.0 - rng.gen::<f64>()).ln()
}

/// Uniform ordered pair of distinct point indices.
fn draw_point_pair(rng: &mut ChaCha8Rng, n: usize) -> (usize, usize) {
    debug_assert!(n >= 2);
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

/// ln(1 + e^t) without overflow for large |t|.
fn ln_1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Dirichlet-multinomial log predictive of one point given side totals:
/// ln f(T + x) - ln f(T), evaluated in O(|x|) over the point's support.
fn log_predictive(
    point: &SparsePoint,
    stat: &[u64],
    total: u64,
    beta: &[f64],
    sum_beta: f64,
) -> f64 {
    let m: u64 = point.iter().map(|&(_, x)| x).sum();
    if m == 0 {
        return 0.0;
    }
    let mut acc = ln_gamma(sum_beta + total as f64) - ln_gamma(sum_beta + (total + m) as f64);
    for &(j, x) in point {
        if x > 0 {
            let base = beta[j as usize] + stat[j as usize] as f64;
            acc += ln_gamma(base + x as f64) - ln_gamma(base);
        }
    }
    acc
}

/// Constant model inputs read by every allocation and scoring step.
struct Prior<'a> {
    beta: &'a [f64],
    sum_beta: f64,
    gamma: f64,
    dim: usize,
}

/// How `seq_alloc` decides each member's side.
enum AllocMode<'a> {
    /// Draw from the predictive weights.
    Sample(&'a mut ChaCha8Rng),
    /// Follow the given sides (true = left), indexed like `rest`; used to
    /// score the allocation a merge would have to reverse.
    Follow(&'a [bool]),
}

/// Outcome of one sequential two-way allocation: members and statistics per
/// side (seeds included) and the log probability of the chosen sides.
struct SeqAlloc {
    left: Vec<usize>,
    right: Vec<usize>,
    left_stat: Vec<u64>,
    right_stat: Vec<u64>,
    log_q: f64,
}

/// Allocates `rest` (already permuted) one point at a time to the side
/// seeded by `seed_left` or `seed_right`. Each point goes left with
/// probability proportional to (side size + gamma/2) times the side's
/// Dirichlet-multinomial predictive; sampling and scoring share this code so
/// the two directions of a move price the same path identically.
fn seq_alloc(
    points: &[SparsePoint],
    seed_left: usize,
    seed_right: usize,
    rest: &[usize],
    mut mode: AllocMode,
    prior: &Prior,
) -> SeqAlloc {
    let mut out = SeqAlloc {
        left: vec![seed_left],
        right: vec![seed_right],
        left_stat: vec![0; prior.dim],
        right_stat: vec![0; prior.dim],
        log_q: 0.0,
    };
    let mut left_total = 0u64;
    let mut right_total = 0u64;
    for &(j, x) in &points[seed_left] {
        out.left_stat[j as usize] += x;
        left_total += x;
    }
    for &(j, x) in &points[seed_right] {
        out.right_stat[j as usize] += x;
        right_total += x;
    }
    let half = prior.gamma / 2.0;
    for (t, &p) in rest.iter().enumerate() {
        let w_l = (out.left.len() as f64 + half).ln()
            + log_predictive(
                &points[p],
                &out.left_stat,
                left_total,
                prior.beta,
                prior.sum_beta,
            );
        let w_r = (out.right.len() as f64 + half).ln()
            + log_predictive(
                &points[p],
                &out.right_stat,
                right_total,
                prior.beta,
                prior.sum_beta,
            );
        let d = w_r - w_l;
        let lp_left = -ln_1p_exp(d);
        let lp_right = -ln_1p_exp(-d);
        let goes_left = match &mut mode {
            AllocMode::Sample(rng) => rng.gen::<f64>() < lp_left.exp(),
            AllocMode::Follow(sides) => sides[t],
        };
        if goes_left {
            out.log_q += lp_left;
            out.left.push(p);
            for &(j, x) in &points[p] {
                out.left_stat[j as usize] += x;
                left_total += x;
            }
        } else {
            out.log_q += lp_right;
            out.right.push(p);
            for &(j, x) in &points[p] {
                out.right_stat[j as usize] += x;
                right_total += x;
            }
        }
    }
    out
}

/// Replaces cluster `k` by the two sides of an accepted allocation, in place
/// at `k` and `k + 1`. Children inherit the parent's parameter until the
/// next sweep refreshes it; members draw fresh uniform sub-cluster sides.
fn apply_seq_split(
    state: &mut DpmmState,
    points: &[SparsePoint],
    k: usize,
    alloc: &SeqAlloc,
    rng: &mut ChaCha8Rng,
) {
    let parent = state.clusters.remove(k);
    let dim = state.dim;
    for label in &mut state.labels {
        if *label as usize > k {
            *label += 1;
        }
    }
    let mut children = Vec::with_capacity(2);
    for (members, stat, label) in [
        (&alloc.left, &alloc.left_stat, k as u32),
        (&alloc.right, &alloc.right_stat, k as u32 + 1),
    ] {
        let mut child = ClusterState {
            count: members.len(),
            stat: stat.clone(),
            log_param: parent.log_param.clone(),
            log_weight: parent.log_weight + f64::ln(0.5),
            left: SubCluster::empty(dim),
            right: SubCluster::empty(dim),
        };
        for &p in members {
            state.labels[p] = label;
            let side = rng.gen::<bool>();
            state.left_side[p] = side;
            let half = if side {
                &mut child.left
            } else {
                &mut child.right
            };
            half.count += 1;
            for &(j, x) in &points[p] {
                half.stat[j as usize] += x;
            }
        }
        children.push(child);
    }
    state.clusters.insert(k, children.pop().unwrap());
    state.clusters.insert(k, children.pop().unwrap());
}

/// Fuses clusters `a` and `b` into one cluster at min(a, b); the former
/// clusters become its left and right sub-clusters in that order.
pub(crate) fn apply_merge(state: &mut DpmmState, a: usize, b: usize) {
    debug_assert_ne!(a, b);
    let hi = a.max(b);
    let lo = a.min(b);
    let second = state.clusters.remove(hi);
    let first = state.clusters.remove(lo);
    let (left_src, right_src) = if a < b {
        (first, second)
    } else {
        (second, first)
    };

    let stat: Vec<u64> = left_src
        .stat
        .iter()
        .zip(&right_src.stat)
        .map(|(x, y)| x + y)
        .collect();
    let to_half = |c: &ClusterState| SubCluster {
        count: c.count,
        stat: c.stat.clone(),
        log_param: c.log_param.clone(),
        log_weight: f64::ln(0.5),
    };
    let merged = ClusterState {
        count: left_src.count + right_src.count,
        stat,
        log_param: left_src.log_param.clone(),
        log_weight: log_sum_exp(&[left_src.log_weight, right_src.log_weight]),
        left: to_half(&left_src),
        right: to_half(&right_src),
    };
    state.clusters.insert(lo, merged);

    let (a32, b32) = (a as u32, b as u32);
    for (label, side) in state.labels.iter_mut().zip(&mut state.left_side) {
        if *label == a32 {
            *label = lo as u32;
            *side = true;
        } else if *label == b32 {
            *label = lo as u32;
            *side = false;
        } else if *label as usize > hi {
            *label -= 1;
        }
    }
}

/// One pair-driven move attempt. The drawn pair decides the direction:
/// both points in one cluster proposes that cluster's split, points in two
/// clusters proposes their merge. Housing both directions in the one kernel
/// is what makes each attempt reversible; a round of only splits (or only
/// merges) has no return flow and would not leave the posterior invariant.
fn pair_move(state: &mut DpmmState, points: &[SparsePoint], rng: &mut ChaCha8Rng, prior: &Prior) {
    let n = points.len();
    let (i, j) = draw_point_pair(rng, n);
    let (a, b) = (state.labels[i] as usize, state.labels[j] as usize);
    if a == b {
        // Split: the pair seeds the two sides, the rest of the cluster is
        // allocated sequentially, and the move accepts with probability
        // min(1, H_split / q) where q is the allocation probability. A
        // cluster of two points has q = 1, so its decision reduces to the
        // closed-form ratio. Singleton clusters never reach here.
        let mut rest: Vec<usize> = (0..n)
            .filter(|&p| p != i && p != j && state.labels[p] as usize == a)
            .collect();
        rest.shuffle(rng);
        let alloc = seq_alloc(points, i, j, &rest, AllocMode::Sample(rng), prior);
        let cl = &state.clusters[a];
        debug_assert_eq!(alloc.left.len() + alloc.right.len(), cl.count);
        let ll_l = log_marginal_dirmult(&alloc.left_stat, prior.beta, prior.sum_beta);
        let ll_r = log_marginal_dirmult(&alloc.right_stat, prior.beta, prior.sum_beta);
        let ll = log_marginal_dirmult(&cl.stat, prior.beta, prior.sum_beta);
        let log_h = log_h_split(
            prior.gamma,
            alloc.left.len(),
            ll_l,
            alloc.right.len(),
            ll_r,
            cl.count,
            ll,
        ) - alloc.log_q;
        if log_uniform(rng) < log_h {
            apply_seq_split(state, points, a, &alloc, rng);
        }
    } else {
        // Merge: accepts with probability min(1, q / H_split), where
        // H_split is the ratio for splitting the would-be merged cluster
        // back into the current two and q is the probability that the
        // allocation pass reproduces them (forced sides, fresh order).
        let mut rest: Vec<usize> = (0..n)
            .filter(|&p| {
                p != i && p != j && (state.labels[p] as usize == a || state.labels[p] as usize == b)
            })
            .collect();
        rest.shuffle(rng);
        let sides: Vec<bool> = rest
            .iter()
            .map(|&p| state.labels[p] as usize == a)
            .collect();
        let alloc = seq_alloc(points, i, j, &rest, AllocMode::Follow(&sides), prior);
        let (ca, cb) = (&state.clusters[a], &state.clusters[b]);
        debug_assert_eq!(alloc.left_stat, ca.stat);
        debug_assert_eq!(alloc.right_stat, cb.stat);
        let merged_stat: Vec<u64> = ca.stat.iter().zip(&cb.stat).map(|(x, y)| x + y).collect();
        let ll_1 = log_marginal_dirmult(&ca.stat, prior.beta, prior.sum_beta);
        let ll_2 = log_marginal_dirmult(&cb.stat, prior.beta, prior.sum_beta);
        let ll_m = log_marginal_dirmult(&merged_stat, prior.beta, prior.sum_beta);
        let log_h = alloc.log_q
            - log_h_split(
                prior.gamma,
                ca.count,
                ll_1,
                cb.count,
                ll_2,
                ca.count + cb.count,
                ll_m,
            );
        if log_uniform(rng) < log_h {
            apply_merge(state, a, b);
        }
    }
}

/// One round of pair-driven move attempts on the split phase's RNG stream.
/// Pairs falling inside a cluster propose splits; cross-cluster pairs
/// propose merges (see `pair_move`). No-op with fewer than two points.
pub fn propose_splits(state: &mut DpmmState, points: &[SparsePoint], seed: u64, iter: usize) {
    let n = points.len();
    if n < 2 {
        return;
    }
    let beta = state.beta.clone();
    let prior = Prior {
        beta: &beta,
        sum_beta: state.sum_beta,
        gamma: state.gamma,
        dim: state.dim,
    };
    for attempt in 0..SPLIT_MERGE_ATTEMPTS {
        let mut rng = derive_rng(seed, &[PH_SPLIT, iter as u64, attempt]);
        pair_move(state, points, &mut rng, &prior);
    }
}

/// A second round of the same pair-driven attempts on the merge phase's RNG
/// stream, so every iteration gets two rounds of cluster-count moves.
pub fn propose_merges(state: &mut DpmmState, points: &[SparsePoint], seed: u64, iter: usize) {
    let n = points.len();
    if n < 2 {
        return;
    }
    let beta = state.beta.clone();
    let prior = Prior {
        beta: &beta,
        sum_beta: state.sum_beta,
        gamma: state.gamma,
        dim: state.dim,
    };
    for attempt in 0..SPLIT_MERGE_ATTEMPTS {
        let mut rng = derive_rng(seed, &[PH_MERGE, iter as u64, attempt]);
        pair_move(state, points, &mut rng, &prior);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpmm::{Beta, DpmmConfig};
    use approx::assert_abs_diff_eq;

    #[test]
    fn marginal_matches_closed_forms() {
        // Empty statistics integrate to exactly one.
        assert_eq!(log_marginal_dirmult(&[0, 0], &[0.3, 0.9], 1.2), 0.0);
        // One observation under a uniform prior on two categories: 1/2.
        let b = [1.0, 1.0];
        assert_abs_diff_eq!(
            log_marginal_dirmult(&[1, 0], &b, 2.0),
            -0.6931471805599453,
            epsilon = 1e-12
        );
        // One observation in each of two categories: B(2,2)/B(1,1) = 1/6.
        assert_abs_diff_eq!(
            log_marginal_dirmult(&[1, 1], &b, 2.0),
            -1.791759469228055,
            epsilon = 1e-12
        );
    }

    #[test]
    fn marginal_matches_dense_reference() {
        // The sparse evaluation (zero-count terms skipped) must agree with a
        // dense loop over every category.
        let stat = [3u64, 0, 2, 0, 7];
        let beta = [0.5, 1.5, 0.1, 2.0, 0.9];
        let sum_beta: f64 = beta.iter().sum();
        let n: u64 = stat.iter().sum();
        let mut dense = ln_gamma(sum_beta) - ln_gamma(sum_beta + n as f64);
        for (&t, &b) in stat.iter().zip(&beta) {
            dense += ln_gamma(b + t as f64) - ln_gamma(b);
        }
        assert_abs_diff_eq!(
            log_marginal_dirmult(&stat, &beta, sum_beta),
            dense,
            epsilon = 1e-12
        );
    }

    #[test]
    fn marginal_is_a_probability_over_exchangeable_sequences() {
        // Summing exp(ll) times multinomial coefficients over all count
        // vectors with n = 2, d = 2 must give exactly one.
        let b = [0.7, 1.3];
        let coeff = [1.0, 2.0, 1.0];
        let mut total = 0.0;
        for (stat, c) in [
            ([2u64, 0u64], coeff[0]),
            ([1, 1], coeff[1]),
            ([0, 2], coeff[2]),
        ] {
            total += c * log_marginal_dirmult(&stat, &b, 2.0).exp();
        }
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn split_ratio_matches_desk_example() {
        // gamma = 1, halves {(2,0)} and {(0,2)} of a 2-point cluster,
        // beta = (0.1, 0.1).
        let beta = [0.1, 0.1];
        let ll_l = log_marginal_dirmult(&[2, 0], &beta, 0.2);
        let ll_r = log_marginal_dirmult(&[0, 2], &beta, 0.2);
        let ll = log_marginal_dirmult(&[2, 2], &beta, 0.2);
        let log_h = log_h_split(1.0, 1, ll_l, 1, ll_r, 2, ll);
        assert_abs_diff_eq!(log_h, 3.3787245258100973, epsilon = 1e-10);
        // Independent check: the ratio collapses algebraically to
        // gamma * Gamma(1)^2/Gamma(2) * f_l * f_r / f, with
        // f_l = f_r = (0.1 * 1.1) / (0.2 * 1.2) and
        // f = (0.1*1.1)^2 / (0.2*1.2*2.2*3.2).
        let f_half = (0.1 * 1.1) / (0.2 * 1.2);
        let f_all = (0.1f64 * 1.1).powi(2) / (0.2 * 1.2 * 2.2 * 3.2);
        assert_abs_diff_eq!(log_h, (f_half * f_half / f_all).ln(), epsilon = 1e-10);
    }

    #[test]
    fn merge_ratio_matches_desk_example() {
        let beta = [0.1, 0.1];
        let ll_1 = log_marginal_dirmult(&[2, 0], &beta, 0.2);
        let ll_2 = log_marginal_dirmult(&[0, 2], &beta, 0.2);
        let ll_m = log_marginal_dirmult(&[2, 2], &beta, 0.2);
        let log_h = log_h_merge(1.0, 1, ll_1, 1, ll_2, 2, ll_m);
        assert_abs_diff_eq!(log_h, -5.458166067489932, epsilon = 1e-10);
        // Independent check against the unsimplified product:
        // H_merge = 1/H_split * [Gamma(1) / Gamma(1/2)^2] * [Gamma(3/2)^2 / Gamma(3)].
        let h_split = log_h_split(1.0, 1, ll_1, 1, ll_2, 2, ll_m);
        let g = |x: f64| ln_gamma(x);
        let direct = -h_split + g(1.0) - 2.0 * g(0.5) + 2.0 * g(1.5) - g(3.0);
        assert_abs_diff_eq!(log_h, direct, epsilon = 1e-12);
    }

    fn two_cluster_state(points: &[SparsePoint]) -> DpmmState {
        let cfg = DpmmConfig {
            gamma: 1.0,
            beta: Beta::Scalar(0.5),
            iterations: 1,
            seed: 0,
            workers: 1,
            burn_in_fraction: 0.5,
            check_invariants: true,
        };
        let beta = cfg.beta.to_vec(2).unwrap();
        let mut state = DpmmState::init(points, 2, beta, cfg.gamma, cfg.seed);
        state.clusters.push(ClusterState::empty(2));
        state.labels = vec![0, 0, 1];
        state.left_side = vec![true, false, true];
        state.rebuild_stats(points);
        state
    }

    #[test]
    fn merge_keeps_former_clusters_and_forced_resplit_restores_them() {
        let points: Vec<SparsePoint> = vec![vec![(0, 4)], vec![(0, 2), (1, 1)], vec![(1, 3)]];
        let mut state = two_cluster_state(&points);
        let global = [6u64, 4u64];

        apply_merge(&mut state, 0, 1);
        assert_eq!(state.k(), 1);
        assert_eq!(state.labels, vec![0, 0, 0]);
        assert_eq!(state.left_side, vec![true, true, false]);
        let cl = &state.clusters[0];
        assert_eq!(cl.count, 3);
        assert_eq!(cl.stat, vec![6, 4]);
        assert_eq!(cl.left.count, 2);
        assert_eq!(cl.left.stat, vec![6, 1]);
        assert_eq!(cl.right.stat, vec![0, 3]);
        state.assert_conservation(&global, 3);

        // Rebuild the former clusters through the same allocation code a
        // merge uses for scoring: seed one point from each, force the
        // remaining member to its old side, and apply the resulting split.
        let beta = state.beta.clone();
        let prior = Prior {
            beta: &beta,
            sum_beta: state.sum_beta,
            gamma: state.gamma,
            dim: 2,
        };
        let alloc = seq_alloc(&points, 0, 2, &[1], AllocMode::Follow(&[true]), &prior);
        assert_eq!(alloc.left, vec![0, 1]);
        assert_eq!(alloc.right, vec![2]);
        assert_eq!(alloc.left_stat, vec![6, 1]);
        assert_eq!(alloc.right_stat, vec![0, 3]);
        assert!(
            alloc.log_q < 0.0,
            "a forced two-way choice has probability below one"
        );
        let mut rng = derive_rng(0, &[PH_SPLIT, 0, 0]);
        apply_seq_split(&mut state, &points, 0, &alloc, &mut rng);
        assert_eq!(state.k(), 2);
        assert_eq!(state.labels, vec![0, 0, 1]);
        assert_eq!(state.clusters[0].stat, vec![6, 1]);
        assert_eq!(state.clusters[1].stat, vec![0, 3]);
        state.assert_conservation(&global, 3);
    }

    #[test]
    fn merge_remaps_labels_of_later_clusters() {
        let points: Vec<SparsePoint> = vec![vec![(0, 1)], vec![(0, 1)], vec![(1, 1)], vec![(1, 2)]];
        let mut state = two_cluster_state(&points[..3]);
        // Extend to three clusters over four points.
        state.clusters.push(ClusterState::empty(2));
        state.labels = vec![0, 1, 2, 2];
        state.left_side = vec![true, true, true, false];
        state.rebuild_stats(&points);
        apply_merge(&mut state, 1, 0);
        // a = 1 goes left, b = 0 goes right; cluster 2 slides down to 1.
        assert_eq!(state.labels, vec![0, 0, 1, 1]);
        assert_eq!(state.left_side, vec![false, true, true, false]);
        assert_eq!(state.clusters[0].left.stat, vec![1, 0]);
        state.assert_conservation(&[2, 3], 4);
    }

    #[test]
    fn forced_scoring_matches_the_sampled_path() {
        // Sampling an allocation and then rescoring the same sides in Follow
        // mode must walk the identical probability path: this equality is
        // what makes a merge price exactly the split it reverses.
        let points: Vec<SparsePoint> = vec![
            vec![(0, 3)],
            vec![(0, 2), (1, 2)],
            vec![(1, 4)],
            vec![(2, 3)],
            vec![(0, 1), (2, 2)],
            vec![(1, 1), (2, 1)],
        ];
        let beta = vec![0.4, 0.7, 1.1];
        let prior = Prior {
            beta: &beta,
            sum_beta: beta.iter().sum(),
            gamma: 1.5,
            dim: 3,
        };
        let rest = [2usize, 3, 4, 5];
        let mut rng = derive_rng(42, &[PH_SPLIT, 0, 0]);
        let sampled = seq_alloc(&points, 0, 1, &rest, AllocMode::Sample(&mut rng), &prior);
        let sides: Vec<bool> = rest.iter().map(|p| sampled.left.contains(p)).collect();
        let forced = seq_alloc(&points, 0, 1, &rest, AllocMode::Follow(&sides), &prior);
        assert_eq!(sampled.log_q, forced.log_q);
        assert_eq!(sampled.left, forced.left);
        assert_eq!(sampled.right, forced.right);
        assert_eq!(sampled.left_stat, forced.left_stat);
        assert_eq!(sampled.right_stat, forced.right_stat);
        assert!(sampled.log_q < 0.0 && sampled.log_q.is_finite());
    }

    #[test]
    fn two_point_cluster_split_decision_is_the_closed_form_ratio() {
        // A two-point cluster has a seeds-only allocation, so q = 1 and the
        // accept probability is exactly min(1, H_split). Here log H is
        // +3.3787 > 0: the first attempt (any pair draw lands in the single
        // cluster) must split, whatever the seed.
        let points: Vec<SparsePoint> = vec![vec![(0, 2)], vec![(1, 2)]];
        let mut state = DpmmState::init(&points, 2, vec![0.1, 0.1], 1.0, 7);
        propose_splits(&mut state, &points, 7, 0);
        assert_eq!(state.k(), 2, "a certain-accept split must fire immediately");
        assert_eq!(state.clusters[0].count, 1);
        assert_eq!(state.clusters[1].count, 1);
        state.assert_conservation(&[2, 2], 2);
    }

    #[test]
    fn singleton_clusters_are_never_split() {
        let points: Vec<SparsePoint> = vec![vec![(0, 9)], vec![(1, 9)]];
        let mut state = DpmmState::init(&points, 2, vec![0.5, 0.5], 1.0, 3);
        state.clusters.push(ClusterState::empty(2));
        state.labels = vec![0, 1];
        state.rebuild_stats(&points);
        for iter in 0..50 {
            propose_splits(&mut state, &points, 3, iter);
        }
        assert_eq!(state.k(), 2, "every pair draw straddles the two singletons");
    }

    #[test]
    fn decisive_split_fires_and_recovers_the_true_grouping() {
        // Two tight, widely separated groups in one cluster: a pair seeding
        // both groups appears within a round or two, the allocation then
        // separates the rest decisively, and log H is far above zero.
        let points: Vec<SparsePoint> = (0..20)
            .map(|i| {
                if i < 10 {
                    vec![(0u32, 30u64)]
                } else {
                    vec![(1u32, 30u64)]
                }
            })
            .collect();
        let mut state = DpmmState::init(&points, 2, vec![0.1, 0.1], 1.0, 5);
        let mut rounds = 0;
        for iter in 0..20 {
            propose_splits(&mut state, &points, 5, iter);
            rounds = iter + 1;
            if state.k() == 2 {
                break;
            }
        }
        assert_eq!(state.k(), 2, "separated groups must split within 20 rounds");
        assert!(
            rounds <= 5,
            "the decisive split should fire quickly, took {rounds}"
        );
        let first = state.labels[0];
        assert!(state.labels[..10].iter().all(|&l| l == first));
        assert!(state.labels[10..].iter().all(|&l| l != first));
        state.assert_conservation(&[300, 300], 20);
    }

    #[test]
    fn homogeneous_data_stays_coarse() {
        // Sixty identical points over a four-category composition: the
        // posterior puts almost all its mass on one cluster, because any
        // split re-pays the composition's parameter cost for no gain.
        // Exploratory splits are possible but rare and fold straight back.
        let points: Vec<SparsePoint> = (0..60)
            .map(|_| vec![(0u32, 8u64), (1u32, 7u64), (2u32, 5u64), (3u32, 5u64)])
            .collect();
        let mut state = DpmmState::init(&points, 4, vec![0.1; 4], 1.0, 6);
        let mut coarse = 0;
        for iter in 0..40 {
            propose_splits(&mut state, &points, 6, iter);
            propose_merges(&mut state, &points, 6, iter);
            if state.k() == 1 {
                coarse += 1;
            }
        }
        assert!(
            coarse >= 36,
            "homogeneous data must stay coarse, K=1 in {coarse}/40 rounds"
        );
    }

    #[test]
    fn merge_of_identical_clusters_is_taken() {
        // Two clusters with the same composition: merging raises the
        // posterior, so some round accepts quickly.
        let points: Vec<SparsePoint> = (0..30).map(|_| vec![(0u32, 2u64), (1u32, 2u64)]).collect();
        let mut state = DpmmState::init(&points, 2, vec![0.5, 0.5], 1.0, 8);
        state.clusters.push(state.clusters[0].clone());
        state.labels = (0..30).map(|i| (i % 2) as u32).collect();
        state.rebuild_stats(&points);
        let mut merged = false;
        for iter in 0..30 {
            propose_merges(&mut state, &points, 8, iter);
            if state.k() == 1 {
                merged = true;
                break;
            }
        }
        assert!(merged, "identical clusters should merge within 30 rounds");
        state.assert_conservation(&[60, 60], 30);
        assert_eq!(
            state.clusters[0].left.count + state.clusters[0].right.count,
            30
        );
    }

    #[test]
    fn separated_clusters_resist_merging() {
        // Two populations with disjoint support. Splits of a pure cluster
        // are fair game (single-category data carries little composition
        // evidence), but a cross-population merge pays the full likelihood
        // price and never happens: no cluster may ever mix the categories.
        let points: Vec<SparsePoint> = (0..40)
            .map(|i| {
                if i % 2 == 0 {
                    vec![(0u32, 25u64)]
                } else {
                    vec![(1u32, 25u64)]
                }
            })
            .collect();
        let mut state = DpmmState::init(&points, 2, vec![0.1, 0.1], 1.0, 13);
        state.clusters.push(state.clusters[0].clone());
        state.labels = (0..40).map(|i| (i % 2) as u32).collect();
        state.rebuild_stats(&points);
        for iter in 0..50 {
            propose_splits(&mut state, &points, 13, iter);
            propose_merges(&mut state, &points, 13, iter);
            assert!(state.k() >= 2);
            for cl in &state.clusters {
                assert!(
                    cl.stat[0] == 0 || cl.stat[1] == 0,
                    "cluster mixes disjoint populations at iter {iter}: {:?}",
                    cl.stat
                );
            }
        }
    }
}
