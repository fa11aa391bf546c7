//! Planted-block benchmark generator with exact ground truth.
//!
//! A synthetic dataset is one multinomial draw of N tokens over an R x C
//! cell probability matrix that concentrates a chosen fraction of its mass
//! on square diagonal blocks. The block layout, the probability matrix, and
//! the draw are all deterministic given the generator spec and seed.

use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::conjoin::Bicluster;
use crate::countmat::SparseCountMatrix;
use crate::error::{Error, Result};
use crate::rng::{derive_rng, PH_SIM};

/// Half-open index ranges of one planted block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

impl Block {
    pub fn area(&self) -> usize {
        (self.row_end - self.row_start) * (self.col_end - self.col_start)
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        (self.row_start..self.row_end).contains(&r) && (self.col_start..self.col_end).contains(&c)
    }
}

/// Everything needed to generate one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    /// Total token count of the drawn matrix.
    pub tokens: u64,
    /// Fraction of probability mass planted inside the blocks, in (0, 1).
    pub signal: f64,
    pub blocks: Vec<Block>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid("matrix dimensions must be positive"));
        }
        if !(self.signal > 0.0 && self.signal < 1.0) {
            return Err(Error::invalid(
                "signal mass must lie strictly between 0 and 1",
            ));
        }
        if self.blocks.is_empty() {
            return Err(Error::invalid("at least one block is required"));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if block.row_start >= block.row_end || block.col_start >= block.col_end {
                return Err(Error::invalid(format!("block {b} has zero area")));
            }
            if block.row_end > self.rows || block.col_end > self.cols {
                return Err(Error::invalid(format!(
                    "block {b} exceeds the matrix bounds"
                )));
            }
        }
        Ok(())
    }
}

/// The four standard constructions: equal square blocks on the main
/// diagonal, each of side floor(min(R, C) / (blocks + 1)); construction 3
/// shifts its third block up so it shares half its rows and columns with
/// the second.
pub fn case_preset(case_id: u32, seed: u64) -> Result<SynthSpec> {
    let (rows, cols, tokens, signal, n_blocks) = match case_id {
        1 => (50, 50, 4000, 0.8, 1),
        2 => (20, 20, 4000, 0.5, 2),
        3 => (50, 50, 4000, 0.7, 3),
        4 => (100, 100, 10_000, 0.7, 5),
        other => {
            return Err(Error::invalid(format!(
                "unknown case {other}: valid cases are 1 through 4"
            )))
        }
    };
    let side = rows.min(cols) / (n_blocks + 1);
    let mut blocks: Vec<Block> = (0..n_blocks)
        .map(|b| Block {
            row_start: b * side,
            row_end: (b + 1) * side,
            col_start: b * side,
            col_end: (b + 1) * side,
        })
        .collect();
    if case_id == 3 {
        // Blocks 2 and 3 overlap in half their rows and columns.
        let shift = side / 2;
        let b3 = &mut blocks[2];
        b3.row_start -= shift;
        b3.row_end -= shift;
        b3.col_start -= shift;
        b3.col_end -= shift;
    }
    let spec = SynthSpec {
        rows,
        cols,
        tokens,
        signal,
        blocks,
        seed,
    };
    spec.validate().expect("presets are valid");
    Ok(spec)
}

/// Cell probability matrix: the signal mass is split equally across blocks
/// and uniformly within each block (overlap cells add their blocks' shares);
/// the rest is uniform over cells outside every block. The result is
/// normalized by its own sum, which only deviates from one when the blocks
/// cover the whole matrix and leave the off-block mass nowhere to go.
pub fn make_theta(spec: &SynthSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let per_block = spec.signal / spec.blocks.len() as f64;
    let mut theta = vec![vec![0.0f64; spec.cols]; spec.rows];
    for block in &spec.blocks {
        let cell_mass = per_block / block.area() as f64;
        for row in theta.iter_mut().take(block.row_end).skip(block.row_start) {
            for v in row.iter_mut().take(block.col_end).skip(block.col_start) {
                *v += cell_mass;
            }
        }
    }
    let outside = (0..spec.rows)
        .flat_map(|r| (0..spec.cols).map(move |c| (r, c)))
        .filter(|&(r, c)| !spec.blocks.iter().any(|b| b.contains(r, c)))
        .count();
    if outside > 0 {
        let cell_mass = (1.0 - spec.signal) / outside as f64;
        for (r, row) in theta.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                if !spec.blocks.iter().any(|b| b.contains(r, c)) {
                    *v = cell_mass;
                }
            }
        }
    }
    let total: f64 = theta.iter().flatten().sum();
    for row in &mut theta {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(theta)
}

/// One multinomial draw of `n` tokens over the cells of `theta`, realized
/// as sequential conditional binomials in row-major cell order.
pub fn sample_counts(theta: &[Vec<f64>], n: u64, seed: u64) -> Result<SparseCountMatrix> {
    let rows = theta.len();
    let cols = theta.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("matrix dimensions must be positive"));
    }
    let mut rng = derive_rng(seed, &[PH_SIM, 0, 0]);
    let mut remaining = n;
    let mut mass_left = 1.0f64;
    let mut triplets = Vec::new();
    'outer: for (r, row) in theta.iter().enumerate() {
        for (c, &p_cell) in row.iter().enumerate() {
            if remaining == 0 {
                break 'outer;
            }
            let p = if mass_left > 0.0 {
                (p_cell / mass_left).clamp(0.0, 1.0)
            } else {
                1.0
            };
            let x = if p >= 1.0 {
                remaining
            } else if p <= 0.0 {
                0
            } else {
                Binomial::new(remaining, p)
                    .expect("valid binomial")
                    .sample(&mut rng)
            };
            if x > 0 {
                triplets.push((r, c, x));
                remaining -= x;
            }
            mass_left -= p_cell;
        }
    }
    if remaining > 0 {
        // Numerically exhausted mass with tokens left over; park them on the
        // last cell, matching the conditional-binomial telescoping.
        match triplets.last_mut() {
            Some(last) if last.0 == rows - 1 && last.1 == cols - 1 => last.2 += remaining,
            _ => triplets.push((rows - 1, cols - 1, remaining)),
        }
    }
    SparseCountMatrix::from_triplets(rows, cols, triplets)
}

/// The planted blocks as ground-truth biclusters; block b gets topic pair
/// (b, b) and an equal share of the signal mass as its weight.
pub fn true_biclusters(spec: &SynthSpec) -> Vec<Bicluster> {
    let weight = spec.signal / spec.blocks.len() as f64;
    spec.blocks
        .iter()
        .enumerate()
        .map(|(b, block)| Bicluster {
            rows: (block.row_start..block.row_end).collect(),
            cols: (block.col_start..block.col_end).collect(),
            weight,
            topic_pair: (b, b),
        })
        .collect()
}
