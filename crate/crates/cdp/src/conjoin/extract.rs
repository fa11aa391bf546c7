//! Heavy-bicluster readout from a fitted model.

use serde::{Deserialize, Serialize};

use super::{CdpHyper, CdpModel};

/// One extracted bicluster: member indices, the topic-pair weight behind it,
/// and which topic pair produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bicluster {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub weight: f64,
    pub topic_pair: (usize, usize),
}

/// Members of one side: indices whose token fraction on the given topic
/// reaches tau. An index with no tokens belongs to nothing.
fn members(counts: &[Vec<u64>], topic: usize, tau: f64) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .filter(|(_, row)| {
            let total: u64 = row.iter().sum();
            total > 0 && row[topic] as f64 / total as f64 >= tau
        })
        .map(|(n, _)| n)
        .collect()
}

/// Extracts one bicluster per heavy topic pair.
///
/// A pair (i, j) is heavy when theta[i][j] reaches tau_theta times the
/// maximum theta entry; its rows are those with at least a tau_row fraction
/// of their tokens on row-topic i, columns analogous with tau_col. Pairs
/// with an empty side are dropped. Memberships may overlap across pairs.
/// The result is ordered by descending weight, then topic pair.
pub fn extract_biclusters(model: &CdpModel, hyper: &CdpHyper) -> Vec<Bicluster> {
    let theta_max = model
        .theta
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::new();
    for i in 0..model.k_r {
        for j in 0..model.k_c {
            if model.theta[i][j] < hyper.tau_theta * theta_max {
                continue;
            }
            let rows = members(&model.count_r, i, hyper.tau_row);
            if rows.is_empty() {
                continue;
            }
            let cols = members(&model.count_c, j, hyper.tau_col);
            if cols.is_empty() {
                continue;
            }
            out.push(Bicluster {
                rows,
                cols,
                weight: model.theta[i][j],
                topic_pair: (i, j),
            });
        }
    }
    out.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .expect("theta entries are finite")
            .then(a.topic_pair.cmp(&b.topic_pair))
    });
    if out.is_empty() {
        log::warn!("no heavy topic pair has nonempty row and column membership");
    }
    out
}
