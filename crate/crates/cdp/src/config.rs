//! Run configuration: one JSON document per pipeline run.
//!
//! Command-line flags override individual fields; the file is the durable,
//! shareable record of a run's settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conjoin::{CdpHyper, CountMode, ExecMode};
use crate::dpmm::{Beta, DpmmConfig};
use crate::error::{Error, Result};

/// Whether input rows are the composite units (documents, cells) and columns
/// the parts (words, genes), or the transpose of that.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// Rows stay rows; fit the matrix as given.
    #[default]
    RowsAreComposites,
    /// Transpose before fitting so parts become rows.
    RowsAreParts,
}

fn default_dpmm() -> DpmmConfig {
    DpmmConfig {
        gamma: 1.0,
        beta: Beta::Scalar(1.0),
        iterations: 200,
        seed: 0,
        workers: 4,
        burn_in_fraction: 0.5,
        check_invariants: false,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_dpmm")]
    pub dpmm_rows: DpmmConfig,
    #[serde(default = "default_dpmm")]
    pub dpmm_cols: DpmmConfig,
    #[serde(default)]
    pub hyper: CdpHyper,
    #[serde(default)]
    pub orientation: Orientation,
    /// Exact single-threaded sweeps instead of batched parallel ones.
    #[serde(default)]
    pub serial: bool,
    #[serde(default)]
    pub count_mode: CountMode,
    /// Sum rows sharing a label before dropping empty rows/columns.
    #[serde(default)]
    pub merge_duplicate_labels: bool,
    /// Benchmark seeds; flags may replace this list.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dpmm_rows: default_dpmm(),
            dpmm_cols: default_dpmm(),
            hyper: CdpHyper::default(),
            orientation: Orientation::default(),
            serial: false,
            count_mode: CountMode::default(),
            merge_duplicate_labels: false,
            seeds: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dpmm_rows.validate()?;
        self.dpmm_cols.validate()?;
        self.hyper.validate()
    }

    pub fn exec_mode(&self) -> ExecMode {
        if self.serial {
            ExecMode::Serial
        } else {
            ExecMode::Batched
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
