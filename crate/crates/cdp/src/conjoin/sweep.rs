//! Token-level mutual updates coupling row topics and column topics.
//!
//! One sweep resamples every token's row topic, then every token's column
//! topic, each from a leave-one-out conditional that multiplies the token's
//! membership ratio by the joint topic-pair count. Batched execution
//! parallelizes over rows (then columns) against a phase-start snapshot of
//! the shared tables: counts local to the batch's own row or column stay
//! exact, everything shared is read stale minus the token's own
//! contribution, and all tables are rebuilt at the phase boundary. Serial
//! execution maintains every table exactly after each token.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{CdpHyper, ExecMode};
use crate::countmat::TokenTable;
use crate::rng::{derive_rng, PH_ZC, PH_ZR};

/// Stream tag for the single-threaded exact mode, outside the row/column
/// index range.
const SERIAL_TAG: u64 = u64::MAX;

/// All count tables the conditionals read, kept mutually consistent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountTables {
    /// n_rows x k_r: tokens of row n on row-topic i.
    pub count_r: Vec<Vec<u64>>,
    /// n_cols x k_c: tokens of column m on column-topic j.
    pub count_c: Vec<Vec<u64>>,
    /// k_r x k_c co-assignment counts.
    pub joint: Vec<Vec<u64>>,
    /// Per row-topic total, sum of count_r over rows.
    pub tot_r: Vec<u64>,
    /// Per column-topic total.
    pub tot_c: Vec<u64>,
    pub k_r: usize,
    pub k_c: usize,
}

impl CountTables {
    pub fn from_tokens(tokens: &TokenTable, k_r: usize, k_c: usize) -> Self {
        let mut t = Self {
            count_r: vec![vec![0; k_r]; tokens.n_rows],
            count_c: vec![vec![0; k_c]; tokens.n_cols],
            joint: vec![vec![0; k_c]; k_r],
            tot_r: vec![0; k_r],
            tot_c: vec![0; k_c],
            k_r,
            k_c,
        };
        t.rebuild(tokens);
        t
    }

    /// Recomputes every table from the token assignments.
    pub(crate) fn rebuild(&mut self, tokens: &TokenTable) {
        for row in &mut self.count_r {
            row.iter_mut().for_each(|c| *c = 0);
        }
        for col in &mut self.count_c {
            col.iter_mut().for_each(|c| *c = 0);
        }
        for row in &mut self.joint {
            row.iter_mut().for_each(|c| *c = 0);
        }
        self.tot_r.iter_mut().for_each(|c| *c = 0);
        self.tot_c.iter_mut().for_each(|c| *c = 0);
        for t in 0..tokens.len() {
            let (n, m) = (tokens.row_of[t] as usize, tokens.col_of[t] as usize);
            let (i, j) = (tokens.zr[t] as usize, tokens.zc[t] as usize);
            debug_assert!(i < self.k_r && j < self.k_c);
            self.count_r[n][i] += 1;
            self.count_c[m][j] += 1;
            self.joint[i][j] += 1;
            self.tot_r[i] += 1;
            self.tot_c[j] += 1;
        }
    }
}

/// Unnormalized conditional weights shared by both update directions:
/// w[k] = ((own[k] + alpha) / (tot[k] + n_side * alpha)) * (joint_k[k] + lambda),
/// with a vanishing denominator contributing zero. Returns true when every
/// weight is zero (uniform fallback required).
#[inline]
fn fill_weights(
    buf: &mut [f64],
    own: &[u64],
    tot: &[u64],
    joint_k: &[u64],
    alpha: f64,
    lambda: f64,
    n_side: usize,
) -> bool {
    let mut any = false;
    for k in 0..buf.len() {
        let den = tot[k] as f64 + n_side as f64 * alpha;
        buf[k] = if den > 0.0 {
            let w = (own[k] as f64 + alpha) / den * (joint_k[k] as f64 + lambda);
            any |= w > 0.0;
            w
        } else {
            0.0
        };
    }
    !any
}

#[inline]
fn sample_weights(rng: &mut ChaCha8Rng, buf: &[f64], fallback: bool) -> (u32, bool) {
    if fallback {
        return (rng.gen_range(0..buf.len()) as u32, true);
    }
    let total: f64 = buf.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, w) in buf.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return (k as u32, false);
        }
    }
    (buf.len() as u32 - 1, false)
}

/// Leave-one-out conditional over column topics for a token in column `col`
/// whose row topic is `zr_t`; `tables` must already exclude the token.
/// An all-zero weight vector falls back to uniform.
pub fn conditional_zc(tables: &CountTables, col: usize, zr_t: u32, hyper: &CdpHyper) -> Vec<f64> {
    let n_cols = tables.count_c.len();
    let mut buf = vec![0.0; tables.k_c];
    let fallback = fill_weights(
        &mut buf,
        &tables.count_c[col],
        &tables.tot_c,
        &tables.joint[zr_t as usize],
        hyper.alpha_c,
        hyper.lambda,
        n_cols,
    );
    if fallback {
        log::warn!("column-topic conditional vanished for column {col}; using uniform");
        return vec![1.0 / tables.k_c as f64; tables.k_c];
    }
    let total: f64 = buf.iter().sum();
    buf.iter_mut().for_each(|w| *w /= total);
    buf
}

/// Leave-one-out conditional over row topics for a token in row `row` whose
/// column topic is `zc_t`; symmetric to [`conditional_zc`].
pub fn conditional_zr(tables: &CountTables, row: usize, zc_t: u32, hyper: &CdpHyper) -> Vec<f64> {
    let n_rows = tables.count_r.len();
    let joint_col: Vec<u64> = (0..tables.k_r)
        .map(|i| tables.joint[i][zc_t as usize])
        .collect();
    let mut buf = vec![0.0; tables.k_r];
    let fallback = fill_weights(
        &mut buf,
        &tables.count_r[row],
        &tables.tot_r,
        &joint_col,
        hyper.alpha_r,
        hyper.lambda,
        n_rows,
    );
    if fallback {
        log::warn!("row-topic conditional vanished for row {row}; using uniform");
        return vec![1.0 / tables.k_r as f64; tables.k_r];
    }
    let total: f64 = buf.iter().sum();
    buf.iter_mut().for_each(|w| *w /= total);
    buf
}

/// Contiguous token range per row; rows are contiguous in token order.
fn row_ranges(tokens: &TokenTable) -> Vec<(usize, usize)> {
    let mut ranges = vec![(0usize, 0usize); tokens.n_rows];
    let mut t = 0;
    while t < tokens.len() {
        let n = tokens.row_of[t] as usize;
        let start = t;
        while t < tokens.len() && tokens.row_of[t] as usize == n {
            t += 1;
        }
        ranges[n] = (start, t);
    }
    ranges
}

/// Token order grouped by column (counting sort, stable) plus the range of
/// each column inside it.
fn col_order(tokens: &TokenTable) -> (Vec<u32>, Vec<(usize, usize)>) {
    let mut counts = vec![0usize; tokens.n_cols];
    for &m in &tokens.col_of {
        counts[m as usize] += 1;
    }
    let mut starts = vec![0usize; tokens.n_cols];
    let mut acc = 0;
    for (s, &c) in starts.iter_mut().zip(&counts) {
        *s = acc;
        acc += c;
    }
    let ranges: Vec<(usize, usize)> = starts
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (s, s + c))
        .collect();
    let mut order = vec![0u32; tokens.len()];
    let mut cursor = starts;
    for (t, &m) in tokens.col_of.iter().enumerate() {
        order[cursor[m as usize]] = t as u32;
        cursor[m as usize] += 1;
    }
    (order, ranges)
}

/// One full mutual sweep: a row-topic pass over every token, then a
/// column-topic pass. Returns the number of uniform fallbacks taken.
pub fn mutual_update_sweep(
    tokens: &mut TokenTable,
    tables: &mut CountTables,
    hyper: &CdpHyper,
    seed: u64,
    sweep: usize,
    mode: ExecMode,
) -> u64 {
    match mode {
        ExecMode::Serial => {
            let a = serial_zr_pass(tokens, tables, hyper, seed, sweep);
            let b = serial_zc_pass(tokens, tables, hyper, seed, sweep);
            a + b
        }
        ExecMode::Batched => {
            let a = batched_zr_pass(tokens, tables, hyper, seed, sweep);
            tables.rebuild(tokens);
            let b = batched_zc_pass(tokens, tables, hyper, seed, sweep);
            tables.rebuild(tokens);
            a + b
        }
    }
}

fn serial_zr_pass(
    tokens: &mut TokenTable,
    tables: &mut CountTables,
    hyper: &CdpHyper,
    seed: u64,
    sweep: usize,
) -> u64 {
    let mut rng = derive_rng(seed, &[PH_ZR, sweep as u64, SERIAL_TAG]);
    let n_rows = tokens.n_rows;
    let mut buf = vec![0.0; tables.k_r];
    let mut joint_col = vec![0u64; tables.k_r];
    let mut fallbacks = 0;
    for t in 0..tokens.len() {
        let n = tokens.row_of[t] as usize;
        let i_old = tokens.zr[t] as usize;
        let j = tokens.zc[t] as usize;
        tables.count_r[n][i_old] -= 1;
        tables.tot_r[i_old] -= 1;
        tables.joint[i_old][j] -= 1;
        for (i, jc) in joint_col.iter_mut().enumerate() {
            *jc = tables.joint[i][j];
        }
        let fb = fill_weights(
            &mut buf,
            &tables.count_r[n],
            &tables.tot_r,
            &joint_col,
            hyper.alpha_r,
            hyper.lambda,
            n_rows,
        );
        let (i_new, fell) = sample_weights(&mut rng, &buf, fb);
        fallbacks += fell as u64;
        let i_new_us = i_new as usize;
        tokens.zr[t] = i_new;
        tables.count_r[n][i_new_us] += 1;
        tables.tot_r[i_new_us] += 1;
        tables.joint[i_new_us][j] += 1;
    }
    fallbacks
}

fn serial_zc_pass(
    tokens: &mut TokenTable,
    tables: &mut CountTables,
    hyper: &CdpHyper,
    seed: u64,
    sweep: usize,
) -> u64 {
    let mut rng = derive_rng(seed, &[PH_ZC, sweep as u64, SERIAL_TAG]);
    let n_cols = tokens.n_cols;
    let mut buf = vec![0.0; tables.k_c];
    let mut fallbacks = 0;
    for t in 0..tokens.len() {
        let m = tokens.col_of[t] as usize;
        let i = tokens.zr[t] as usize;
        let j_old = tokens.zc[t] as usize;
        tables.count_c[m][j_old] -= 1;
        tables.tot_c[j_old] -= 1;
        tables.joint[i][j_old] -= 1;
        let fb = fill_weights(
            &mut buf,
            &tables.count_c[m],
            &tables.tot_c,
            &tables.joint[i],
            hyper.alpha_c,
            hyper.lambda,
            n_cols,
        );
        let (j_new, fell) = sample_weights(&mut rng, &buf, fb);
        fallbacks += fell as u64;
        let j_new_us = j_new as usize;
        tokens.zc[t] = j_new;
        tables.count_c[m][j_new_us] += 1;
        tables.tot_c[j_new_us] += 1;
        tables.joint[i][j_new_us] += 1;
    }
    fallbacks
}

fn batched_zr_pass(
    tokens: &mut TokenTable,
    tables: &CountTables,
    hyper: &CdpHyper,
    seed: u64,
    sweep: usize,
) -> u64 {
    let n_rows = tokens.n_rows;
    let ranges = row_ranges(tokens);
    let tot_snap = tables.tot_r.clone();
    let joint_snap = tables.joint.clone();
    let k_r = tables.k_r;
    let zr = &tokens.zr;
    let zc = &tokens.zc;

    let outputs: Vec<(usize, Vec<u32>, u64)> = ranges
        .par_iter()
        .enumerate()
        .filter(|(_, (s, e))| e > s)
        .map(|(n, &(s, e))| {
            let mut rng = derive_rng(seed, &[PH_ZR, sweep as u64, n as u64]);
            let mut local_row = tables.count_r[n].clone();
            let mut buf = vec![0.0; k_r];
            let mut tot_eff = vec![0u64; k_r];
            let mut joint_col = vec![0u64; k_r];
            let mut out = Vec::with_capacity(e - s);
            let mut fallbacks = 0;
            for t in s..e {
                let i_old = zr[t] as usize;
                let j = zc[t] as usize;
                local_row[i_old] -= 1;
                tot_eff.copy_from_slice(&tot_snap);
                tot_eff[i_old] -= 1;
                for (i, jc) in joint_col.iter_mut().enumerate() {
                    *jc = joint_snap[i][j];
                }
                joint_col[i_old] -= 1;
                let fb = fill_weights(
                    &mut buf,
                    &local_row,
                    &tot_eff,
                    &joint_col,
                    hyper.alpha_r,
                    hyper.lambda,
                    n_rows,
                );
                let (i_new, fell) = sample_weights(&mut rng, &buf, fb);
                fallbacks += fell as u64;
                local_row[i_new as usize] += 1;
                out.push(i_new);
            }
            (s, out, fallbacks)
        })
        .collect();

    let mut fallbacks = 0;
    for (s, out, fb) in outputs {
        fallbacks += fb;
        tokens.zr[s..s + out.len()].copy_from_slice(&out);
    }
    fallbacks
}

fn batched_zc_pass(
    tokens: &mut TokenTable,
    tables: &CountTables,
    hyper: &CdpHyper,
    seed: u64,
    sweep: usize,
) -> u64 {
    let n_cols = tokens.n_cols;
    let (order, ranges) = col_order(tokens);
    let tot_snap = tables.tot_c.clone();
    let joint_snap = tables.joint.clone();
    let k_c = tables.k_c;
    let zr = &tokens.zr;
    let zc = &tokens.zc;

    let outputs: Vec<(usize, Vec<u32>, u64)> = ranges
        .par_iter()
        .enumerate()
        .filter(|(_, (s, e))| e > s)
        .map(|(m, &(s, e))| {
            let mut rng = derive_rng(seed, &[PH_ZC, sweep as u64, m as u64]);
            let mut local_col = tables.count_c[m].clone();
            let mut buf = vec![0.0; k_c];
            let mut tot_eff = vec![0u64; k_c];
            let mut joint_row = vec![0u64; k_c];
            let mut out = Vec::with_capacity(e - s);
            let mut fallbacks = 0;
            for &t in &order[s..e] {
                let t = t as usize;
                let i = zr[t] as usize;
                let j_old = zc[t] as usize;
                local_col[j_old] -= 1;
                tot_eff.copy_from_slice(&tot_snap);
                tot_eff[j_old] -= 1;
                joint_row.copy_from_slice(&joint_snap[i]);
                joint_row[j_old] -= 1;
                let fb = fill_weights(
                    &mut buf,
                    &local_col,
                    &tot_eff,
                    &joint_row,
                    hyper.alpha_c,
                    hyper.lambda,
                    n_cols,
                );
                let (j_new, fell) = sample_weights(&mut rng, &buf, fb);
                fallbacks += fell as u64;
                local_col[j_new as usize] += 1;
                out.push(j_new);
            }
            (s, out, fallbacks)
        })
        .collect();

    let mut fallbacks = 0;
    for (s, out, fb) in outputs {
        fallbacks += fb;
        for (idx, &j_new) in out.iter().enumerate() {
            tokens.zc[order[s + idx] as usize] = j_new;
        }
    }
    fallbacks
}
