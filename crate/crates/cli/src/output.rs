//! Run artifacts: `metrics.csv`, `summary.json`, `defender_state.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use fedsim_core::engine::MetricsRecord;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, OutputFormat};
use crate::runner::RunResult;

pub const METRICS_HEADER: &str =
    "round,test_accuracy,test_loss,train_loss_mean,num_updates_aggregated,wall_time_ms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DEFENDER_STATE_FILE: &str = "defender_state.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_round: usize,
    pub rounds: Vec<MetricsRecord>,
}

impl RunSummary {
    pub fn new(config: &ExperimentConfig, records: &[MetricsRecord]) -> Self {
        let last = records.last().expect("at least one round");
        // first round reaching the maximum
        let best = records.iter().fold(last, |b, r| {
            if r.test_accuracy > b.test_accuracy
                || (r.test_accuracy == b.test_accuracy && r.round < b.round)
            {
                r
            } else {
                b
            }
        });
        Self {
            config: config.clone(),
            final_accuracy: last.test_accuracy,
            best_accuracy: best.test_accuracy,
            best_round: best.round,
            rounds: records.to_vec(),
        }
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.round,
            r.test_accuracy,
            r.test_loss,
            r.train_loss_mean,
            r.num_updates_aggregated,
            r.wall_time_ms
        ));
    }
    out
}

/// Writes the configured artifacts into `dir` (created if needed) and
/// returns the paths written.
pub fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    result: &RunResult,
) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if cfg.output.formats.contains(&OutputFormat::Csv) {
        let path = dir.join(METRICS_FILE);
        fs::write(&path, metrics_csv(&result.records))?;
        written.push(path);
    }
    if cfg.output.formats.contains(&OutputFormat::Json) && !result.records.is_empty() {
        let path = dir.join(SUMMARY_FILE);
        let summary = RunSummary::new(cfg, &result.records);
        fs::write(
            &path,
            serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )?;
        written.push(path);
    }
    if let Some(state) = &result.defender_state {
        let path = dir.join(DEFENDER_STATE_FILE);
        fs::write(&path, state)?;
        written.push(path);
    }
    Ok(written)
}
