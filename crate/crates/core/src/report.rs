//! Data files describing a search: depth histograms, score trajectory, best
//! cell and a summary JSON. No plotting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cell::{depth_distribution, CellSpec};
use crate::error::{Error, Result};
use crate::search::{FinalReport, SearchState};

/// Per-stage depth histograms of the beam as `stage,depth,count` rows.
pub fn depth_hist_csv(state: &SearchState) -> String {
    let mut s = String::from("stage,depth,count\n");
    for stage in &state.stages {
        let cells: Vec<CellSpec> = stage.beam.iter().map(|c| c.cell.clone()).collect();
        for (depth, count) in depth_distribution(&cells) {
            let _ = writeln!(s, "{},{depth},{count}", stage.stage);
        }
    }
    s
}

/// Every trained candidate as `stage,cell,predicted,observed`; missing values
/// are left empty. The cell key is quoted since it contains commas.
pub fn scores_csv(state: &SearchState) -> String {
    let mut s = String::from("stage,cell,predicted,observed\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for stage in &state.stages {
        for c in &stage.trained {
            let key = c.cell.key().replace('"', "\"\"");
            let _ = writeln!(s, "{},\"{key}\",{},{}", stage.stage, opt(c.predicted), opt(c.observed));
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSummary {
    pub stage: usize,
    pub expansions: usize,
    pub trained: usize,
    pub beam_size: usize,
    pub best_score: f64,
    pub mean_depth: f64,
    pub depth_histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchReport {
    pub version: u32,
    pub global_seed: u64,
    pub stages_completed: usize,
    pub history_len: usize,
    pub failures: usize,
    pub best_cell: Option<CellSpec>,
    pub best_score: Option<f64>,
    pub stages: Vec<StageSummary>,
    /// True when the beam's mean depth never decreases from stage to stage.
    pub depth_nondecreasing: bool,
    #[serde(rename = "final")]
    pub final_training: Option<FinalReport>,
}

pub fn summarize(state: &SearchState, final_training: Option<FinalReport>) -> SearchReport {
    let depths = state.mean_depth_per_stage();
    let stages = state
        .stages
        .iter()
        .zip(&depths)
        .map(|(s, &(_, mean_depth))| {
            let cells: Vec<CellSpec> = s.beam.iter().map(|c| c.cell.clone()).collect();
            StageSummary {
                stage: s.stage,
                expansions: s.expansions,
                trained: s.trained.len(),
                beam_size: s.beam.len(),
                best_score: s.beam.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max),
                mean_depth,
                depth_histogram: depth_distribution(&cells),
            }
        })
        .collect();
    let best = state.best();
    SearchReport {
        version: state.version,
        global_seed: state.config.global_seed,
        stages_completed: state.stage,
        history_len: state.history.len(),
        failures: state.failures.len(),
        best_cell: best.map(|b| b.cell.clone()),
        best_score: best.map(|b| b.score),
        stages,
        depth_nondecreasing: depths.windows(2).all(|w| w[1].1 >= w[0].1),
        final_training,
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes `depth_hist.csv`, `scores.csv`, `best_cell.json` and `report.json`
/// into `dir`.
pub fn emit_report(state: &SearchState, final_training: Option<FinalReport>, dir: impl AsRef<Path>) -> Result<SearchReport> {
    let dir = dir.as_ref();
    if state.stages.is_empty() {
        return Err(Error::Config("no completed stage to report".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir, "depth_hist.csv", &depth_hist_csv(state))?;
    write(dir, "scores.csv", &scores_csv(state))?;
    if let Some(best) = state.best() {
        write(dir, "best_cell.json", &format!("{}\n", best.cell.key()))?;
    }
    let report = summarize(state, final_training);
    write(dir, "report.json", &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
