//! Command-line pipeline: simulate, fit, extract, score, benchmark.
//!
//! Every command reads an optional JSON run configuration and applies flag
//! overrides on top. All randomness derives from the single --seed value, so
//! repeating a command reproduces its primary outputs byte for byte (timing
//! and log output excluded).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Orientation, RunConfig};
use crate::conjoin::{extract_biclusters, fit_cdp, Bicluster, CdpModel, FitOptions};
use crate::countmat::{PreprocessMap, SparseCountMatrix};
use crate::error::{Error, Result};
use crate::eval::{self, RunRecord};
use crate::rng::child_seed;
use crate::synth::{self, SynthSpec};

#[derive(Parser, Debug)]
#[command(
    name = "cdp",
    version,
    about = "Nonparametric biclustering of sparse count matrices"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Shared {
    /// Master seed; every random stream derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sampler chunk count per side (overrides the config file).
    #[arg(long)]
    workers: Option<usize>,
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for output files (created if missing).
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Which axis of the input holds the composite units.
    #[arg(long, value_enum)]
    orientation: Option<Orientation>,
    /// Exact single-threaded token sweeps instead of batched parallel ones.
    #[arg(long)]
    serial: bool,
}

impl Shared {
    /// Config file (or defaults) with flag overrides applied.
    fn load_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(w) = self.workers {
            cfg.dpmm_rows.workers = w;
            cfg.dpmm_cols.workers = w;
        }
        if let Some(o) = self.orientation {
            cfg.orientation = o;
        }
        if self.serial {
            cfg.serial = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn ensure_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a planted-block benchmark matrix and its ground truth.
    Simulate {
        #[command(flatten)]
        shared: Shared,
        /// Preset case id.
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=4), conflicts_with = "spec")]
        case: Option<u32>,
        /// Custom generator spec (JSON) instead of a preset.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Fit the dual mixture model and extract heavy biclusters.
    Fit {
        #[command(flatten)]
        shared: Shared,
        /// Input matrix: .mtx coordinate format or dense .csv.
        #[arg(long)]
        input: PathBuf,
        /// Dense CSV input carries a header row and a label column.
        #[arg(long)]
        labeled_csv: bool,
        /// Sum rows that share a label before fitting.
        #[arg(long)]
        merge_duplicate_labels: bool,
        /// Also write full per-iteration, per-point assignment traces.
        #[arg(long)]
        full_trace: bool,
    },
    /// Re-threshold a saved model into biclusters without refitting.
    Extract {
        #[command(flatten)]
        shared: Shared,
        /// Model JSON written by fit.
        #[arg(long)]
        model: PathBuf,
        /// Index map written by fit; translates output to raw input indices.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Heavy-pair threshold as a fraction of the largest topic-pair mass.
        #[arg(long)]
        tau_theta: Option<f64>,
        /// Row membership threshold (fraction of a row's tokens).
        #[arg(long)]
        tau_row: Option<f64>,
        /// Column membership threshold (fraction of a column's tokens).
        #[arg(long)]
        tau_col: Option<f64>,
    },
    /// Score an estimated bicluster file against a reference one.
    Score {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        estimated: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Run simulate -> fit -> score over preset cases and many seeds.
    Benchmark {
        #[command(flatten)]
        shared: Shared,
        /// Comma-separated preset case ids.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4",
              value_parser = clap::value_parser!(u32).range(1..=4))]
        cases: Vec<u32>,
        /// Seeds per case, counting up from --seed.
        #[arg(long, default_value_t = 10)]
        num_seeds: usize,
        /// Explicit seed list (overrides --num-seeds and the config list).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Skip the per-run heatmap exports.
        #[arg(long)]
        no_heatmaps: bool,
    },
}

/// Parses the process arguments, runs the command, and maps errors to a
/// nonzero exit status.
pub fn run() -> std::process::ExitCode {
    let cli = Cli::parse();
    init_logging();
    match dispatch(cli.command) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("CDP_LOG_LEVEL", "info");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { shared, case, spec } => cmd_simulate(&shared, case, spec.as_deref()),
        Command::Fit {
            shared,
            input,
            labeled_csv,
            merge_duplicate_labels,
            full_trace,
        } => cmd_fit(
            &shared,
            &input,
            labeled_csv,
            merge_duplicate_labels,
            full_trace,
        ),
        Command::Extract {
            shared,
            model,
            map,
            tau_theta,
            tau_row,
            tau_col,
        } => cmd_extract(&shared, &model, map.as_deref(), tau_theta, tau_row, tau_col),
        Command::Score {
            shared,
            estimated,
            truth,
        } => cmd_score(&shared, &estimated, &truth),
        Command::Benchmark {
            shared,
            cases,
            num_seeds,
            seeds,
            no_heatmaps,
        } => cmd_benchmark(&shared, &cases, num_seeds, seeds, !no_heatmaps),
    }
}

fn cmd_simulate(shared: &Shared, case: Option<u32>, spec_path: Option<&Path>) -> Result<()> {
    let spec = match (case, spec_path) {
        (Some(id), None) => synth::case_preset(id, shared.seed)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut spec: SynthSpec =
                serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
            spec.seed = shared.seed;
            spec.validate()?;
            spec
        }
        _ => return Err(Error::invalid("pass exactly one of --case or --spec")),
    };
    shared.ensure_out_dir()?;
    let theta = synth::make_theta(&spec)?;
    let matrix = synth::sample_counts(&theta, spec.tokens, spec.seed)?;
    let truth = synth::true_biclusters(&spec);

    matrix.save_matrix_market(&shared.out_dir.join("matrix.mtx"))?;
    eval::save_biclusters(&shared.out_dir.join("truth.json"), &truth)?;
    let spec_out = shared.out_dir.join("spec.json");
    let text = serde_json::to_string_pretty(&spec).expect("spec serializes");
    std::fs::write(&spec_out, text).map_err(|e| Error::io(&spec_out, e))?;
    log::info!(
        "simulated {}x{} matrix, {} tokens, {} planted biclusters",
        matrix.n_rows(),
        matrix.n_cols(),
        matrix.total(),
        truth.len()
    );
    Ok(())
}

fn load_matrix(path: &Path, labeled_csv: bool) -> Result<SparseCountMatrix> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => SparseCountMatrix::load_dense_csv(path, labeled_csv),
        _ => SparseCountMatrix::load_matrix_market(path),
    }
}

/// Translates fit-space biclusters back to raw input indices. `transposed`
/// means the model was fitted on the transposed input, so the axes swap
/// back; topic pairs stay in model space either way.
fn to_input_coords(bics: &[Bicluster], map: &PreprocessMap, transposed: bool) -> Vec<Bicluster> {
    bics.iter()
        .map(|b| {
            let rows: Vec<usize> = b.rows.iter().map(|&r| map.rows[r]).collect();
            let cols: Vec<usize> = b.cols.iter().map(|&c| map.cols[c]).collect();
            let (rows, cols) = if transposed {
                (cols, rows)
            } else {
                (rows, cols)
            };
            Bicluster {
                rows,
                cols,
                weight: b.weight,
                topic_pair: b.topic_pair,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct RunSummary<'a> {
    input: &'a Path,
    master_seed: u64,
    seed_rows: u64,
    seed_cols: u64,
    k_rows: usize,
    k_cols: usize,
    biclusters: usize,
    uniform_fallbacks: u64,
    timings: &'a crate::conjoin::FitTimings,
}

fn cmd_fit(
    shared: &Shared,
    input: &Path,
    labeled_csv: bool,
    merge_flag: bool,
    full_trace: bool,
) -> Result<()> {
    let cfg = shared.load_config()?;
    let raw = load_matrix(input, labeled_csv)?;
    let transposed = cfg.orientation == Orientation::RowsAreParts;
    let oriented = if transposed { raw.transpose() } else { raw };
    let merge = merge_flag || cfg.merge_duplicate_labels;
    let (matrix, map) = oriented.preprocess(merge)?;
    log::info!(
        "input {}x{} -> fitting {}x{}, {} tokens",
        if transposed {
            matrix.n_cols()
        } else {
            matrix.n_rows()
        },
        if transposed {
            matrix.n_rows()
        } else {
            matrix.n_cols()
        },
        matrix.n_rows(),
        matrix.n_cols(),
        matrix.total()
    );

    let mut cfg_rows = cfg.dpmm_rows.clone();
    cfg_rows.seed = child_seed(shared.seed, "rows");
    let mut cfg_cols = cfg.dpmm_cols.clone();
    cfg_cols.seed = child_seed(shared.seed, "cols");
    let opts = FitOptions {
        mode: cfg.exec_mode(),
        count_mode: cfg.count_mode,
    };
    let fit = fit_cdp(&matrix, &cfg_rows, &cfg_cols, &cfg.hyper, opts)?;
    let bics = extract_biclusters(&fit.model, &cfg.hyper);
    let translated = to_input_coords(&bics, &map, transposed);

    shared.ensure_out_dir()?;
    let out = &shared.out_dir;
    fit.model.save_json(&out.join("model.json"))?;
    eval::save_biclusters(&out.join("biclusters.json"), &translated)?;
    let map_path = out.join("preprocess_map.json");
    let text = serde_json::to_string_pretty(&map).expect("map serializes");
    std::fs::write(&map_path, text).map_err(|e| Error::io(&map_path, e))?;
    fit.trace_rows
        .write_summary_csv(&out.join("trace_rows_k.csv"))?;
    fit.trace_cols
        .write_summary_csv(&out.join("trace_cols_k.csv"))?;
    if full_trace {
        fit.trace_rows.write_csv(&out.join("trace_rows_full.csv"))?;
        fit.trace_cols.write_csv(&out.join("trace_cols_full.csv"))?;
    }
    let summary = RunSummary {
        input,
        master_seed: shared.seed,
        seed_rows: cfg_rows.seed,
        seed_cols: cfg_cols.seed,
        k_rows: fit.model.k_r,
        k_cols: fit.model.k_c,
        biclusters: translated.len(),
        uniform_fallbacks: fit.uniform_fallbacks,
        timings: &fit.timings,
    };
    let summary_path = out.join("run_summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    log::info!(
        "fit done: K_rows={} K_cols={} biclusters={} (rows {:.2}s, cols {:.2}s, mutual {:.2}s)",
        fit.model.k_r,
        fit.model.k_c,
        translated.len(),
        fit.timings.rows_s,
        fit.timings.cols_s,
        fit.timings.mutual_s
    );
    Ok(())
}

fn cmd_extract(
    shared: &Shared,
    model_path: &Path,
    map_path: Option<&Path>,
    tau_theta: Option<f64>,
    tau_row: Option<f64>,
    tau_col: Option<f64>,
) -> Result<()> {
    let model = CdpModel::load_json(model_path)?;
    let mut hyper = model.hyper.clone();
    if let Some(t) = tau_theta {
        hyper.tau_theta = t;
    }
    if let Some(t) = tau_row {
        hyper.tau_row = t;
    }
    if let Some(t) = tau_col {
        hyper.tau_col = t;
    }
    hyper.validate()?;
    let bics = extract_biclusters(&model, &hyper);
    let transposed = shared.orientation == Some(Orientation::RowsAreParts);
    let out_bics = match map_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let map: PreprocessMap = serde_json::from_str(&text).map_err(|e| Error::json(p, e))?;
            to_input_coords(&bics, &map, transposed)
        }
        None => bics,
    };
    shared.ensure_out_dir()?;
    eval::save_biclusters(&shared.out_dir.join("biclusters.json"), &out_bics)?;
    log::info!("extracted {} biclusters", out_bics.len());
    Ok(())
}

fn cmd_score(shared: &Shared, estimated: &Path, truth: &Path) -> Result<()> {
    let est = eval::load_biclusters(estimated)?;
    let tru = eval::load_biclusters(truth)?;
    let score = eval::jaccard_score(&est, &tru);
    println!("{score}");
    shared.ensure_out_dir()?;
    let path = shared.out_dir.join("score.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({ "jaccard": score }))
        .expect("score serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// One full simulate -> fit -> extract -> score cycle on a preset case.
/// Failures become a zero-score record with the flag set; when `run_dir` is
/// given, the matrix, truth, model, biclusters, and optional heatmaps land
/// there.
pub fn bench_run(
    case_id: u32,
    seed: u64,
    cfg: &RunConfig,
    run_dir: Option<&Path>,
    heatmaps: bool,
) -> RunRecord {
    let started = Instant::now();
    match bench_run_inner(case_id, seed, cfg, run_dir, heatmaps) {
        Ok(jaccard) => RunRecord {
            case_id,
            method: "cdp".into(),
            seed,
            jaccard,
            runtime_s: started.elapsed().as_secs_f64(),
            failed: false,
        },
        Err(e) => {
            log::error!("case {case_id} seed {seed} failed: {e}");
            RunRecord {
                case_id,
                method: "cdp".into(),
                seed,
                jaccard: 0.0,
                runtime_s: started.elapsed().as_secs_f64(),
                failed: true,
            }
        }
    }
}

fn bench_run_inner(
    case_id: u32,
    seed: u64,
    cfg: &RunConfig,
    run_dir: Option<&Path>,
    heatmaps: bool,
) -> Result<f64> {
    let spec = synth::case_preset(case_id, seed)?;
    let theta = synth::make_theta(&spec)?;
    let matrix = synth::sample_counts(&theta, spec.tokens, seed)?;
    let truth = synth::true_biclusters(&spec);
    let (pre, map) = matrix.preprocess(false)?;

    let mut cfg_rows = cfg.dpmm_rows.clone();
    cfg_rows.seed = child_seed(seed, "rows");
    let mut cfg_cols = cfg.dpmm_cols.clone();
    cfg_cols.seed = child_seed(seed, "cols");
    let opts = FitOptions {
        mode: cfg.exec_mode(),
        count_mode: cfg.count_mode,
    };
    let fit = fit_cdp(&pre, &cfg_rows, &cfg_cols, &cfg.hyper, opts)?;
    let est = to_input_coords(&extract_biclusters(&fit.model, &cfg.hyper), &map, false);
    let score = eval::jaccard_score(&est, &truth);

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        matrix.save_matrix_market(&dir.join("matrix.mtx"))?;
        eval::save_biclusters(&dir.join("truth.json"), &truth)?;
        fit.model.save_json(&dir.join("model.json"))?;
        eval::save_biclusters(&dir.join("biclusters.json"), &est)?;
        if heatmaps {
            matrix.save_dense_csv(&dir.join("heatmap.csv"))?;
            write_heatmap_pgm(&matrix, &dir.join("heatmap.pgm"))?;
        }
    }
    Ok(score)
}

/// 8-bit binary PGM of log(1+count), scaled so the largest count maps to
/// white; row and column order match the matrix.
fn write_heatmap_pgm(m: &SparseCountMatrix, path: &Path) -> Result<()> {
    let (h, w) = (m.n_rows(), m.n_cols());
    let mut dense = vec![0u64; h * w];
    for e in m.entries() {
        dense[e.row * w + e.col] = e.count;
    }
    let cmax = dense.iter().copied().max().unwrap_or(0);
    let denom = (1.0 + cmax as f64).ln();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(dense.iter().map(|&c| {
        if denom > 0.0 {
            (255.0 * (1.0 + c as f64).ln() / denom).round() as u8
        } else {
            0
        }
    }));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn cmd_benchmark(
    shared: &Shared,
    cases: &[u32],
    num_seeds: usize,
    seeds: Option<Vec<u64>>,
    heatmaps: bool,
) -> Result<()> {
    let cfg = shared.load_config()?;
    let seeds: Vec<u64> = match seeds {
        Some(s) => s,
        None if !cfg.seeds.is_empty() => cfg.seeds.clone(),
        None => (0..num_seeds as u64).map(|i| shared.seed + i).collect(),
    };
    if cases.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("need at least one case and one seed"));
    }
    shared.ensure_out_dir()?;

    // Runs execute one after another so each run's wall clock reflects the
    // full machine; every fit parallelizes internally.
    let mut records = Vec::with_capacity(cases.len() * seeds.len());
    for &case_id in cases {
        for &seed in &seeds {
            let run_dir = shared.out_dir.join(format!("case{case_id}_seed{seed}"));
            let rec = bench_run(case_id, seed, &cfg, Some(&run_dir), heatmaps);
            log::info!(
                "case {} seed {}: jaccard {:.4} in {:.1}s{}",
                rec.case_id,
                rec.seed,
                rec.jaccard,
                rec.runtime_s,
                if rec.failed { " (FAILED)" } else { "" }
            );
            records.push(rec);
        }
    }

    let rows = eval::benchmark_report(&records)?;
    eval::write_report_csv(&shared.out_dir.join("report.csv"), &rows)?;
    eval::write_report_json(&shared.out_dir.join("report.json"), &rows)?;
    let runs_path = shared.out_dir.join("runs.json");
    let text = serde_json::to_string_pretty(&records).expect("records serialize");
    std::fs::write(&runs_path, text).map_err(|e| Error::io(&runs_path, e))?;

    println!("case,method,seeds,mean_jaccard,sd_jaccard,mean_runtime_s");
    for r in &rows {
        println!(
            "{},{},{},{:.4},{:.4},{:.2}",
            r.case_id, r.method, r.seeds, r.mean_jaccard, r.sd_jaccard, r.mean_runtime_s
        );
    }

    let failures = records.iter().filter(|r| r.failed).count();
    if failures > 0 {
        return Err(Error::invalid(format!(
            "{failures} of {} runs failed",
            records.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_declaration_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn coordinate_translation_maps_back_and_swaps_axes() {
        let map = PreprocessMap {
            rows: vec![1, 3, 4],
            cols: vec![0, 2],
            merged_rows: false,
        };
        let b = Bicluster {
            rows: vec![0, 2],
            cols: vec![1],
            weight: 0.5,
            topic_pair: (0, 1),
        };
        let plain = to_input_coords(std::slice::from_ref(&b), &map, false);
        assert_eq!(plain[0].rows, vec![1, 4]);
        assert_eq!(plain[0].cols, vec![2]);
        let swapped = to_input_coords(std::slice::from_ref(&b), &map, true);
        assert_eq!(swapped[0].rows, vec![2]);
        assert_eq!(swapped[0].cols, vec![1, 4]);
        assert_eq!(swapped[0].topic_pair, (0, 1));
    }

    #[test]
    fn heatmap_pgm_has_correct_dimensions_and_scaling() {
        let m = SparseCountMatrix::from_triplets(2, 3, vec![(0usize, 0usize, 9u64), (1, 2, 3)])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heatmap.pgm");
        write_heatmap_pgm(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let pixels = &bytes[header.len()..];
        assert_eq!(pixels.len(), 6);
        assert_eq!(pixels[0], 255);
        assert_eq!(pixels[1], 0);
        let expected = (255.0 * 4f64.ln() / 10f64.ln()).round() as u8;
        assert_eq!(pixels[5], expected);
    }
}
