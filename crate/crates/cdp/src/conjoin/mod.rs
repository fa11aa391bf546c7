//! Conjoined inference over rows and columns of one count matrix.
//!
//! Two independent mixture runs give row groups and column groups; their
//! modal cluster counts fix the topic dimensions. Every unit of count then
//! becomes a token carrying a row topic and a column topic, and mutual
//! Gibbs sweeps couple the two sides through a joint topic-pair table.
//! The fitted membership matrices and topic-pair weights support direct
//! bicluster extraction.

mod extract;
mod sweep;

pub use extract::{extract_biclusters, Bicluster};
pub use sweep::{conditional_zc, conditional_zr, mutual_update_sweep, CountTables};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::countmat::{SparseCountMatrix, TokenTable};
use crate::dpmm::{run_dpmm, AssignmentTrace, DpmmConfig};
use crate::error::{Error, Result};

fn default_iter_u() -> usize {
    50
}

fn default_tau_theta() -> f64 {
    0.5
}

fn default_tau_member() -> f64 {
    0.2
}

/// Hyperparameters of the conjoined phase plus extraction thresholds.
///
/// alpha_r, alpha_c, and lambda are smoothing masses on the row-membership,
/// column-membership, and topic-pair tables; all three default to zero, so
/// the zero-denominator guards in the parameter formulas are reachable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CdpHyper {
    #[serde(default)]
    pub alpha_r: f64,
    #[serde(default)]
    pub alpha_c: f64,
    #[serde(default)]
    pub lambda: f64,
    /// Number of mutual update sweeps.
    #[serde(default = "default_iter_u")]
    pub iter_u: usize,
    /// A topic pair is heavy when its theta reaches this fraction of the max.
    #[serde(default = "default_tau_theta")]
    pub tau_theta: f64,
    /// Minimum fraction of a row's tokens on a topic for membership.
    #[serde(default = "default_tau_member")]
    pub tau_row: f64,
    #[serde(default = "default_tau_member")]
    pub tau_col: f64,
}

impl Default for CdpHyper {
    fn default() -> Self {
        Self {
            alpha_r: 0.0,
            alpha_c: 0.0,
            lambda: 0.0,
            iter_u: default_iter_u(),
            tau_theta: default_tau_theta(),
            tau_row: default_tau_member(),
            tau_col: default_tau_member(),
        }
    }
}

impl CdpHyper {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_r", self.alpha_r),
            ("alpha_c", self.alpha_c),
            ("lambda", self.lambda),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "{name} must be finite and nonnegative"
                )));
            }
        }
        if self.iter_u == 0 {
            return Err(Error::invalid("iter_u must be at least 1"));
        }
        for (name, v) in [
            ("tau_theta", self.tau_theta),
            ("tau_row", self.tau_row),
            ("tau_col", self.tau_col),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Fitted model: topic counts, membership matrices, topic-pair weights, and
/// the count tables they were computed from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CdpModel {
    pub k_r: usize,
    pub k_c: usize,
    /// n_rows x k_r; each column is a distribution over rows.
    pub phi_r: Vec<Vec<f64>>,
    /// n_cols x k_c; each column is a distribution over columns.
    pub phi_c: Vec<Vec<f64>>,
    /// k_r x k_c topic-pair weights, summing to one.
    pub theta: Vec<Vec<f64>>,
    /// n_rows x k_r token counts from the last sweep.
    pub count_r: Vec<Vec<u64>>,
    /// n_cols x k_c token counts from the last sweep.
    pub count_c: Vec<Vec<u64>>,
    /// k_r x k_c token counts from the last sweep.
    pub count_joint: Vec<Vec<u64>>,
    pub hyper: CdpHyper,
    pub seed_rows: u64,
    pub seed_cols: u64,
}

impl CdpModel {
    pub fn n_rows(&self) -> usize {
        self.phi_r.len()
    }

    pub fn n_cols(&self) -> usize {
        self.phi_c.len()
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("model serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Modal cluster count over the post-burn-in window, ties toward the
/// smaller count; returns that count with the labels of the last
/// qualifying iteration.
pub fn map_k(trace: &AssignmentTrace, burn_in_fraction: f64) -> Result<(usize, Vec<u32>)> {
    if !(0.0..1.0).contains(&burn_in_fraction) {
        return Err(Error::invalid("burn_in_fraction must lie in [0, 1)"));
    }
    let start = (burn_in_fraction * trace.len() as f64).floor() as usize;
    if start >= trace.len() {
        return Err(Error::invalid("no iterations remain after burn-in"));
    }
    let window = &trace.k[start..];
    let max_k = *window.iter().max().expect("nonempty window") as usize;
    let mut hist = vec![0usize; max_k + 1];
    for &k in window {
        hist[k as usize] += 1;
    }
    let modal = hist
        .iter()
        .enumerate()
        .max_by(|(ka, na), (kb, nb)| na.cmp(nb).then(kb.cmp(ka)))
        .map(|(k, _)| k)
        .expect("nonempty histogram");
    let offset = window
        .iter()
        .rposition(|&k| k as usize == modal)
        .expect("modal count occurs");
    let labels = trace.labels[start + offset].clone();
    debug_assert_eq!(
        labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0),
        modal,
        "trace labels must be compacted"
    );
    Ok((modal, labels))
}

/// Stamps every token with its row's and column's group labels.
pub fn init_token_assignments(tokens: &mut TokenTable, z_r: &[u32], z_c: &[u32]) -> Result<()> {
    if z_r.len() != tokens.n_rows {
        return Err(Error::invalid(format!(
            "missing label: got {} row labels for {} rows",
            z_r.len(),
            tokens.n_rows
        )));
    }
    if z_c.len() != tokens.n_cols {
        return Err(Error::invalid(format!(
            "missing label: got {} column labels for {} columns",
            z_c.len(),
            tokens.n_cols
        )));
    }
    tokens.zr = tokens.row_of.iter().map(|&r| z_r[r as usize]).collect();
    tokens.zc = tokens.col_of.iter().map(|&c| z_c[c as usize]).collect();
    Ok(())
}

/// (count + alpha) / (topic total + n * alpha) per entry; a topic with zero
/// denominator gets a uniform column.
fn normalize_membership(counts: &[Vec<f64>], alpha: f64, what: &str) -> Vec<Vec<f64>> {
    let n = counts.len();
    let k = counts.first().map_or(0, |r| r.len());
    let mut totals = vec![0.0f64; k];
    for row in counts {
        for (t, &c) in totals.iter_mut().zip(row) {
            *t += c;
        }
    }
    let mut phi = vec![vec![0.0; k]; n];
    for (j, &tot) in totals.iter().enumerate() {
        let den = tot + n as f64 * alpha;
        if den <= 0.0 {
            log::warn!("{what}: topic {j} has zero mass, using a uniform column");
            for row in &mut phi {
                row[j] = 1.0 / n as f64;
            }
        } else {
            for (row, counts_row) in phi.iter_mut().zip(counts) {
                row[j] = (counts_row[j] + alpha) / den;
            }
        }
    }
    phi
}

fn to_f64(counts: &[Vec<u64>]) -> Vec<Vec<f64>> {
    counts
        .iter()
        .map(|r| r.iter().map(|&c| c as f64).collect())
        .collect()
}

/// Row-membership matrix: phi_r[n][j] = (C_nj + alpha_r) / (sum_n' C_n'j + n_rows * alpha_r).
pub fn compute_phi_r(count_r: &[Vec<u64>], alpha_r: f64) -> Vec<Vec<f64>> {
    normalize_membership(&to_f64(count_r), alpha_r, "phi_r")
}

/// Column-membership matrix, same form with alpha_c over columns.
pub fn compute_phi_c(count_c: &[Vec<u64>], alpha_c: f64) -> Vec<Vec<f64>> {
    normalize_membership(&to_f64(count_c), alpha_c, "phi_c")
}

fn normalize_joint(joint: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
    let cells = joint.iter().map(|r| r.len()).sum::<usize>();
    let total: f64 = joint.iter().flatten().sum::<f64>() + lambda * cells as f64;
    if total <= 0.0 {
        log::warn!("theta: all topic-pair counts are zero, using a uniform table");
        return joint
            .iter()
            .map(|r| r.iter().map(|_| 1.0 / cells as f64).collect())
            .collect();
    }
    joint
        .iter()
        .map(|r| r.iter().map(|&c| (c + lambda) / total).collect())
        .collect()
}

/// Topic-pair weights: theta_ij = (C_ij + lambda) / sum(C + lambda).
pub fn compute_theta(count_joint: &[Vec<u64>], lambda: f64) -> Vec<Vec<f64>> {
    normalize_joint(&to_f64(count_joint), lambda)
}

/// Model probability of one unit of count landing in cell (r, c):
/// sum_ij phi_r[r][i] * theta[i][j] * phi_c[c][j].
pub fn joint_prob(model: &CdpModel, r: usize, c: usize) -> Result<f64> {
    if r >= model.n_rows() || c >= model.n_cols() {
        return Err(Error::invalid(format!(
            "index out of bounds: ({r}, {c}) in a {}x{} model",
            model.n_rows(),
            model.n_cols()
        )));
    }
    let mut p = 0.0;
    for i in 0..model.k_r {
        for j in 0..model.k_c {
            p += model.phi_r[r][i] * model.theta[i][j] * model.phi_c[c][j];
        }
    }
    Ok(p)
}

/// Whether mutual sweeps run exactly sequentially or batch-parallel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    Serial,
    Batched,
}

/// Which sweep's count tables parameterize phi and theta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountMode {
    /// Use the final sweep's tables.
    #[default]
    Final,
    /// Use tables averaged over all sweeps.
    Averaged,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub mode: ExecMode,
    pub count_mode: CountMode,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            mode: ExecMode::Batched,
            count_mode: CountMode::Final,
        }
    }
}

/// Wall-clock seconds per fitting stage.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct FitTimings {
    pub rows_s: f64,
    pub cols_s: f64,
    pub mutual_s: f64,
    pub total_s: f64,
}

/// Everything produced by one fit.
#[derive(Debug)]
pub struct CdpFit {
    pub model: CdpModel,
    pub tokens: TokenTable,
    pub trace_rows: AssignmentTrace,
    pub trace_cols: AssignmentTrace,
    /// Tokens that fell back to a uniform draw because every topic weight
    /// vanished (possible when the smoothing masses are zero).
    pub uniform_fallbacks: u64,
    pub timings: FitTimings,
}

/// Fits the full model: two mixture runs, modal topic counts, then iter_u
/// mutual sweeps over tokens.
///
/// The row run clusters rows of `m`; the column run clusters rows of the
/// transpose. Both execute concurrently and are independently seeded.
pub fn fit_cdp(
    m: &SparseCountMatrix,
    cfg_rows: &DpmmConfig,
    cfg_cols: &DpmmConfig,
    hyper: &CdpHyper,
    opts: FitOptions,
) -> Result<CdpFit> {
    hyper.validate()?;
    cfg_rows.validate()?;
    cfg_cols.validate()?;
    let t0 = Instant::now();

    let row_points = m.rows_as_points();
    let transposed = m.transpose();
    let col_points = transposed.rows_as_points();
    let (rows_out, cols_out) = rayon::join(
        || {
            let t = Instant::now();
            run_dpmm(&row_points, m.n_cols(), cfg_rows).map(|tr| (tr, t.elapsed().as_secs_f64()))
        },
        || {
            let t = Instant::now();
            run_dpmm(&col_points, m.n_rows(), cfg_cols).map(|tr| (tr, t.elapsed().as_secs_f64()))
        },
    );
    let (trace_rows, rows_s) = rows_out?;
    let (trace_cols, cols_s) = cols_out?;

    let (k_r, z_r) = map_k(&trace_rows, cfg_rows.burn_in_fraction)?;
    let (k_c, z_c) = map_k(&trace_cols, cfg_cols.burn_in_fraction)?;

    let mut tokens = m.to_tokens()?;
    init_token_assignments(&mut tokens, &z_r, &z_c)?;
    let mut tables = CountTables::from_tokens(&tokens, k_r, k_c);

    let t_mutual = Instant::now();
    let sweep_mode = opts.mode;
    let mut fallbacks = 0u64;
    let mut mean_r: Vec<Vec<f64>> = vec![vec![0.0; k_r]; m.n_rows()];
    let mut mean_c: Vec<Vec<f64>> = vec![vec![0.0; k_c]; m.n_cols()];
    let mut mean_joint: Vec<Vec<f64>> = vec![vec![0.0; k_c]; k_r];
    for sweep in 0..hyper.iter_u {
        fallbacks += mutual_update_sweep(
            &mut tokens,
            &mut tables,
            hyper,
            cfg_rows.seed,
            sweep,
            sweep_mode,
        );
        if opts.count_mode == CountMode::Averaged {
            let w = 1.0 / hyper.iter_u as f64;
            accumulate(&mut mean_r, &tables.count_r, w);
            accumulate(&mut mean_c, &tables.count_c, w);
            accumulate(&mut mean_joint, &tables.joint, w);
        }
    }
    let mutual_s = t_mutual.elapsed().as_secs_f64();
    if fallbacks > 0 {
        log::warn!("{fallbacks} token updates fell back to a uniform draw");
    }

    let (phi_r, phi_c, theta) = match opts.count_mode {
        CountMode::Final => (
            compute_phi_r(&tables.count_r, hyper.alpha_r),
            compute_phi_c(&tables.count_c, hyper.alpha_c),
            compute_theta(&tables.joint, hyper.lambda),
        ),
        CountMode::Averaged => (
            normalize_membership(&mean_r, hyper.alpha_r, "phi_r"),
            normalize_membership(&mean_c, hyper.alpha_c, "phi_c"),
            normalize_joint(&mean_joint, hyper.lambda),
        ),
    };

    let model = CdpModel {
        k_r,
        k_c,
        phi_r,
        phi_c,
        theta,
        count_r: tables.count_r,
        count_c: tables.count_c,
        count_joint: tables.joint,
        hyper: hyper.clone(),
        seed_rows: cfg_rows.seed,
        seed_cols: cfg_cols.seed,
    };
    Ok(CdpFit {
        model,
        tokens,
        trace_rows,
        trace_cols,
        uniform_fallbacks: fallbacks,
        timings: FitTimings {
            rows_s,
            cols_s,
            mutual_s,
            total_s: t0.elapsed().as_secs_f64(),
        },
    })
}

fn accumulate(acc: &mut [Vec<f64>], table: &[Vec<u64>], w: f64) {
    for (a, t) in acc.iter_mut().zip(table) {
        for (x, &c) in a.iter_mut().zip(t) {
            *x += w * c as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpmm::Beta;
    use approx::assert_abs_diff_eq;

    fn trace(ks: &[u32]) -> AssignmentTrace {
        // Labels: iteration t has point labels [0, t % k] padded to length 2,
        // enough to distinguish iterations while staying compacted.
        let labels = ks
            .iter()
            .map(|&k| if k == 1 { vec![0, 0] } else { vec![0, k - 1] })
            .collect();
        AssignmentTrace {
            labels,
            k: ks.to_vec(),
        }
    }

    #[test]
    fn map_k_picks_mode_and_last_occurrence() {
        let t = trace(&[1, 2, 3, 3, 3, 2]);
        let (k, z) = map_k(&t, 0.0).unwrap();
        assert_eq!(k, 3);
        assert_eq!(z, t.labels[4], "labels come from 0-indexed iteration 4");
    }

    #[test]
    fn map_k_breaks_ties_toward_smaller_k() {
        let (k, z) = map_k(&trace(&[2, 2, 3, 3]), 0.0).unwrap();
        assert_eq!(k, 2);
        assert_eq!(z, vec![0, 1], "labels from iteration 1, the last with K=2");
    }

    #[test]
    fn map_k_constant_trace() {
        let (k, z) = map_k(&trace(&[1, 1, 1]), 0.0).unwrap();
        assert_eq!(k, 1);
        assert_eq!(z, vec![0, 0]);
    }

    #[test]
    fn map_k_respects_burn_in() {
        // Burn-in removes the first half, where K=5 dominates.
        let t = trace(&[5, 5, 5, 5, 2, 2, 2, 3]);
        let (k, _) = map_k(&t, 0.5).unwrap();
        assert_eq!(k, 2);
        assert!(map_k(&trace(&[]), 0.0).is_err());
    }

    #[test]
    fn token_init_stamps_group_labels() {
        let m = SparseCountMatrix::from_triplets(4, 8, [(3, 7, 2), (0, 0, 1)]).unwrap();
        let mut tokens = m.to_tokens().unwrap();
        let z_r = vec![0, 0, 1, 1];
        let z_c = vec![0, 1, 0, 1, 0, 1, 0, 0];
        init_token_assignments(&mut tokens, &z_r, &z_c).unwrap();
        assert_eq!(tokens.len(), 3);
        // Tokens are in (row, col) order: (0,0) then (3,7) twice.
        assert_eq!(tokens.zr, vec![0, 1, 1]);
        assert_eq!(tokens.zc, vec![0, 0, 0]);
        assert!(init_token_assignments(&mut tokens, &z_r[..3], &z_c).is_err());
        assert!(init_token_assignments(&mut tokens, &z_r, &z_c[..7]).is_err());
    }

    #[test]
    fn phi_matches_hand_example() {
        let phi = compute_phi_c(&[vec![3, 0], vec![1, 2]], 0.0);
        assert_eq!(phi, vec![vec![0.75, 0.0], vec![0.25, 1.0]]);
    }

    #[test]
    fn phi_all_zero_counts_with_alpha_is_uniform() {
        let phi = compute_phi_r(&[vec![0, 0], vec![0, 0]], 0.7);
        for row in &phi {
            for &p in row {
                assert_abs_diff_eq!(p, 0.5, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn phi_zero_topic_column_guard_is_uniform() {
        let phi = compute_phi_c(&[vec![3, 0], vec![1, 0]], 0.0);
        assert_eq!(phi[0][0], 0.75);
        assert_abs_diff_eq!(phi[0][1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(phi[1][1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn theta_matches_hand_examples() {
        let theta = compute_theta(&[vec![3, 1], vec![0, 4]], 0.0);
        assert_eq!(theta, vec![vec![0.375, 0.125], vec![0.0, 0.5]]);
        let theta = compute_theta(&[vec![3, 1], vec![0, 4]], 1.0);
        for (i, row) in theta.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let c = [[3.0, 1.0], [0.0, 4.0]][i][j];
                assert_abs_diff_eq!(v, (c + 1.0) / 12.0, epsilon = 1e-15);
            }
        }
        let theta = compute_theta(&[vec![0, 0], vec![0, 0]], 0.0);
        assert!(theta.iter().flatten().all(|&v| v == 0.25));
    }

    #[test]
    fn joint_prob_examples_and_bounds() {
        let model = CdpModel {
            k_r: 2,
            k_c: 2,
            phi_r: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            phi_c: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            theta: vec![vec![0.7, 0.0], vec![0.0, 0.3]],
            count_r: vec![],
            count_c: vec![],
            count_joint: vec![],
            hyper: CdpHyper::default(),
            seed_rows: 0,
            seed_cols: 0,
        };
        assert_abs_diff_eq!(joint_prob(&model, 0, 0).unwrap(), 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(joint_prob(&model, 1, 1).unwrap(), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(joint_prob(&model, 0, 1).unwrap(), 0.0, epsilon = 1e-15);
        assert!(joint_prob(&model, 2, 0).is_err());
        assert!(joint_prob(&model, 0, 2).is_err());
        let total: f64 = (0..2)
            .flat_map(|r| (0..2).map(move |c| (r, c)))
            .map(|(r, c)| joint_prob(&model, r, c).unwrap())
            .sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    fn quick_cfg(seed: u64) -> DpmmConfig {
        DpmmConfig {
            gamma: 1.0,
            beta: Beta::Scalar(0.5),
            iterations: 30,
            seed,
            workers: 2,
            burn_in_fraction: 0.5,
            check_invariants: true,
        }
    }

    #[test]
    fn single_cell_matrix_fits_to_one_topic_pair() {
        let m = SparseCountMatrix::from_triplets(1, 1, [(0, 0, 5)]).unwrap();
        let hyper = CdpHyper {
            iter_u: 3,
            ..CdpHyper::default()
        };
        let fit = fit_cdp(
            &m,
            &quick_cfg(1),
            &quick_cfg(2),
            &hyper,
            FitOptions::default(),
        )
        .unwrap();
        assert_eq!(fit.model.k_r, 1);
        assert_eq!(fit.model.k_c, 1);
        assert_eq!(fit.model.theta, vec![vec![1.0]]);
        assert_eq!(fit.model.count_joint, vec![vec![5]]);
        assert_eq!(fit.model.phi_r, vec![vec![1.0]]);
    }

    #[test]
    fn fit_conserves_counts_and_is_reproducible() {
        let m = SparseCountMatrix::from_triplets(
            6,
            5,
            [
                (0, 0, 7),
                (0, 1, 3),
                (1, 0, 5),
                (2, 3, 6),
                (3, 3, 4),
                (3, 4, 2),
                (4, 2, 1),
                (5, 1, 2),
            ],
        )
        .unwrap();
        let hyper = CdpHyper {
            alpha_r: 0.1,
            alpha_c: 0.1,
            lambda: 0.1,
            iter_u: 5,
            ..CdpHyper::default()
        };
        let fit = fit_cdp(
            &m,
            &quick_cfg(3),
            &quick_cfg(4),
            &hyper,
            FitOptions::default(),
        )
        .unwrap();
        let n = m.total();
        let joint_total: u64 = fit.model.count_joint.iter().flatten().sum();
        assert_eq!(joint_total, n);
        let row_totals: Vec<u64> = fit.model.count_r.iter().map(|r| r.iter().sum()).collect();
        for (n_idx, point) in m.rows_as_points().iter().enumerate() {
            let expect: u64 = point.iter().map(|&(_, x)| x).sum();
            assert_eq!(row_totals[n_idx], expect);
        }
        let theta_total: f64 = fit.model.theta.iter().flatten().sum();
        assert_abs_diff_eq!(theta_total, 1.0, epsilon = 1e-9);
        for j in 0..fit.model.k_r {
            let col: f64 = fit.model.phi_r.iter().map(|r| r[j]).sum();
            assert_abs_diff_eq!(col, 1.0, epsilon = 1e-9);
        }

        let again = fit_cdp(
            &m,
            &quick_cfg(3),
            &quick_cfg(4),
            &hyper,
            FitOptions::default(),
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&fit.model).unwrap(),
            serde_json::to_string(&again.model).unwrap()
        );

        let serial = FitOptions {
            mode: ExecMode::Serial,
            ..FitOptions::default()
        };
        let s1 = fit_cdp(&m, &quick_cfg(3), &quick_cfg(4), &hyper, serial).unwrap();
        let s2 = fit_cdp(&m, &quick_cfg(3), &quick_cfg(4), &hyper, serial).unwrap();
        assert_eq!(
            serde_json::to_string(&s1.model).unwrap(),
            serde_json::to_string(&s2.model).unwrap()
        );
    }

    #[test]
    fn averaged_count_mode_still_normalizes() {
        let m = SparseCountMatrix::from_triplets(3, 3, [(0, 0, 4), (1, 1, 4), (2, 2, 4)]).unwrap();
        let hyper = CdpHyper {
            lambda: 0.5,
            iter_u: 4,
            ..CdpHyper::default()
        };
        let opts = FitOptions {
            count_mode: CountMode::Averaged,
            ..FitOptions::default()
        };
        let fit = fit_cdp(&m, &quick_cfg(5), &quick_cfg(6), &hyper, opts).unwrap();
        let theta_total: f64 = fit.model.theta.iter().flatten().sum();
        assert_abs_diff_eq!(theta_total, 1.0, epsilon = 1e-9);
        for j in 0..fit.model.k_c {
            let col: f64 = fit.model.phi_c.iter().map(|r| r[j]).sum();
            assert_abs_diff_eq!(col, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn hyper_validation_rejects_out_of_range() {
        let rejects = |tweak: fn(&mut CdpHyper)| {
            let mut h = CdpHyper::default();
            tweak(&mut h);
            h.validate().is_err()
        };
        assert!(rejects(|h| h.alpha_r = -0.1));
        assert!(rejects(|h| h.iter_u = 0));
        assert!(rejects(|h| h.tau_theta = 0.0));
        assert!(rejects(|h| h.tau_col = 1.5));
        assert!(CdpHyper::default().validate().is_ok());
    }
}
