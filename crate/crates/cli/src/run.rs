use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;

use mgk_core::complexity::{ratio_sweep, to_csv};
use mgk_core::diagnostics::{attention_matrices, head_similarity, rank_distribution, scores_csv, RankHistogram};
use mgk_core::equivalence::{equivalence_suite, reduction_identity, EquivalenceReport};
use mgk_core::gradcheck::{gradient_suite, GradCheckReport, TOLERANCE};
use mgk_core::training::{dataset_csv, generate_task, train, TrainReport};

use crate::config::{Command, ExperimentConfig};
use crate::error::CliError;

/// Writes `{"payload": ..., "metadata": ...}`. Everything that varies between
/// identical runs (clock readings) lives in `metadata`.
fn write_envelope<T: Serialize>(path: &Path, command: &str, payload: &T, started: Instant) -> Result<(), CliError> {
    let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let doc = json!({
        "payload": payload,
        "metadata": {
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "finished_unix_secs": unix,
            "wall_time_secs": started.elapsed().as_secs_f64(),
        }
    });
    fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct MeanRank {
    layer: usize,
    head: usize,
    mean_rank: f64,
}

#[derive(Debug, Serialize)]
struct LayerSimilarity {
    layer: usize,
    /// `H×H` mean absolute score difference on the first test sequence.
    matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct DiagnoseReport {
    training: TrainReport,
    ranks: Vec<RankHistogram>,
    mean_ranks: Vec<MeanRank>,
    head_similarity: Vec<LayerSimilarity>,
    /// Relative to the output directory.
    attention_files: Vec<String>,
}

#[derive(Debug, Serialize)]
struct GradcheckPayload {
    seed: u64,
    tolerance: f64,
    cases: Vec<GradCheckReport>,
    passed: bool,
}

/// Runs the experiment in `config`, writing its reports into `out`.
/// Returns the paths written.
pub fn run(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    config.validate()?;
    fs::create_dir_all(out)
        .map_err(|e| CliError::Validation(format!("cannot create output directory {}: {e}", out.display())))?;
    let started = Instant::now();
    let mut written = Vec::new();
    match config.command {
        Command::Train => {
            let task = config.task_spec();
            let outcome = train(&config.model_spec(), &task, &config.train_config())?;
            let report = out.join("train_report.json");
            write_envelope(&report, "train", &outcome.report, started)?;
            let data = out.join("dataset.csv");
            fs::write(&data, dataset_csv(&generate_task(&task)?))?;
            written.extend([report, data]);
        }
        Command::Diagnose => {
            let task = config.task_spec();
            let outcome = train(&config.model_spec(), &task, &config.train_config())?;
            let data = generate_task(&task)?;
            let ranks = rank_distribution(
                &outcome.model,
                &data.test,
                config.rank_samples,
                config.rank_threshold,
                config.seed,
            )?;
            let mean_ranks = ranks
                .iter()
                .map(|h| MeanRank {
                    layer: h.layer,
                    head: h.head,
                    mean_rank: h.mean_rank(),
                })
                .collect();
            let layers = attention_matrices(&outcome.model, &data.test[0].tokens)?;
            let mut similarity = Vec::new();
            let mut files = Vec::new();
            for (l, heads) in layers.iter().enumerate() {
                if heads.len() >= 2 {
                    let m = head_similarity(heads)?;
                    similarity.push(LayerSimilarity {
                        layer: l,
                        matrix: m.to_rows(),
                    });
                }
                if config.dump_attention {
                    let dir = out.join("attention").join(format!("layer_{l}"));
                    fs::create_dir_all(&dir)?;
                    for (h, a) in heads.iter().enumerate() {
                        let rel = format!("attention/layer_{l}/head_{h}.csv");
                        fs::write(dir.join(format!("head_{h}.csv")), scores_csv(a))?;
                        written.push(out.join(&rel));
                        files.push(rel);
                    }
                }
            }
            let report = DiagnoseReport {
                training: outcome.report,
                ranks,
                mean_ranks,
                head_similarity: similarity,
                attention_files: files,
            };
            let path = out.join("diagnose_report.json");
            write_envelope(&path, "diagnose", &report, started)?;
            written.push(path);
        }
        Command::SweepComplexity => {
            let grid: Vec<(u64, u64)> = config
                .sweep_n
                .iter()
                .flat_map(|&n| config.sweep_d.iter().map(move |&d| (n, d)))
                .collect();
            let rows = ratio_sweep(
                &grid,
                config.sweep_heads,
                config.sweep_input_dim,
                config.sweep_components,
                config.instrument,
            )?;
            let csv = out.join("complexity.csv");
            fs::write(&csv, to_csv(&rows))?;
            let report = out.join("complexity_report.json");
            write_envelope(&report, "sweep-complexity", &rows, started)?;
            written.extend([csv, report]);
        }
        Command::Gradcheck => {
            let cases = gradient_suite(config.seed)?;
            let passed = cases.iter().all(|c| c.passed);
            let payload = GradcheckPayload {
                seed: config.seed,
                tolerance: TOLERANCE,
                cases,
                passed,
            };
            let path = out.join("gradcheck.json");
            write_envelope(&path, "gradcheck", &payload, started)?;
            if !passed {
                return Err(CliError::Runtime(format!(
                    "gradient check failed; see {}",
                    path.display()
                )));
            }
            written.push(path);
        }
        Command::Equivalence => {
            let mut report: EquivalenceReport = equivalence_suite(config.seed)?;
            if let Some(p) = config.sigma2_perturbation {
                report.checks.push(reduction_identity(config.seed, 20, p)?);
                report.passed = report.checks.iter().all(|c| c.passed);
            }
            let path = out.join("equivalence.json");
            write_envelope(&path, "equivalence", &report, started)?;
            if !report.passed {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                return Err(CliError::Runtime(format!(
                    "equivalence checks failed: {}; see {}",
                    failed.join(", "),
                    path.display()
                )));
            }
            written.push(path);
        }
    }
    Ok(written)
}
