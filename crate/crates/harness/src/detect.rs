//! MAD / CUSUM verdicts over logged episodes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use shiftlab_core::defense::{cusum_detect, mad_detect, CleanStats, DetectorConfig};
use shiftlab_core::env::{render, EnvConfig};
use shiftlab_core::metrics::{slot, wasserstein1, TrajectoryLog};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::eval::logs_dir;
use crate::logfile::read_log;

pub const CLEAN_CELL: &str = "nonexnone";
pub const STATS_FILE: &str = "clean_stats.txt";
pub const DETECTION_FILE: &str = "detection.csv";

/// W1 between adjacent true frames of an episode.
pub fn true_w1_series(env: &EnvConfig, log: &TrajectoryLog) -> Result<Vec<f64>> {
    let frames: Vec<_> = log
        .steps
        .iter()
        .map(|s| render(env, &s.true_state))
        .collect();
    frames
        .windows(2)
        .map(|w| Ok(wasserstein1(&w[1], &w[0])?))
        .collect()
}

/// W1 between adjacent observed frames, as logged.
pub fn observed_w1_series(log: &TrajectoryLog) -> Vec<f64> {
    log.steps
        .iter()
        .filter_map(|s| s.metrics.get(slot::W1_PREV_OBSERVED).copied())
        .collect()
}

pub fn clean_stats(env: &EnvConfig, clean: &[TrajectoryLog], env_hash: &str) -> Result<CleanStats> {
    let mut values = Vec::new();
    for log in clean {
        values.extend(true_w1_series(env, log)?);
    }
    if values.is_empty() {
        return Err(HarnessError::Config(
            "no clean episodes to estimate detector statistics".into(),
        ));
    }
    Ok(CleanStats::from_series(&values, env_hash)?)
}

/// (MAD flagged, CUSUM flagged) for one episode.
pub fn flags(
    log: &TrajectoryLog,
    stats: &CleanStats,
    det: &DetectorConfig,
) -> Result<(bool, bool)> {
    let series = observed_w1_series(log);
    Ok((
        mad_detect(&series, stats, det).contains(&true),
        cusum_detect(&series, stats, det)?.is_some(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub cell: String,
    pub episodes: usize,
    pub mad_flagged: usize,
    pub cusum_flagged: usize,
}

impl Verdict {
    /// A cell counts as detected when at least half of its episodes are flagged.
    pub fn mad_detected(&self) -> bool {
        2 * self.mad_flagged >= self.episodes && self.episodes > 0
    }

    pub fn cusum_detected(&self) -> bool {
        2 * self.cusum_flagged >= self.episodes && self.episodes > 0
    }
}

fn label(detected: bool) -> &'static str {
    if detected {
        "Detected"
    } else {
        "Undetected"
    }
}

pub fn verdicts(
    cells: &BTreeMap<String, Vec<TrajectoryLog>>,
    stats: &CleanStats,
    det: &DetectorConfig,
) -> Result<Vec<Verdict>> {
    let mut out = Vec::new();
    for (cell, logs) in cells {
        let (mut mad, mut cusum) = (0, 0);
        for log in logs {
            let (m, c) = flags(log, stats, det)?;
            mad += usize::from(m);
            cusum += usize::from(c);
        }
        out.push(Verdict {
            cell: cell.clone(),
            episodes: logs.len(),
            mad_flagged: mad,
            cusum_flagged: cusum,
        });
    }
    Ok(out)
}

/// Every logged episode under `out/logs`, grouped by the cell in its header.
pub fn read_all_logs(out: &Path) -> Result<BTreeMap<String, Vec<TrajectoryLog>>> {
    let mut cells: BTreeMap<String, Vec<TrajectoryLog>> = BTreeMap::new();
    let root = logs_dir(out);
    if !root.is_dir() {
        return Ok(cells);
    }
    let mut paths = Vec::new();
    for dir in fs::read_dir(&root)? {
        let dir = dir?.path();
        if dir.is_dir() {
            for f in fs::read_dir(&dir)? {
                let p = f?.path();
                if p.extension().is_some_and(|e| e == "log") {
                    paths.push(p);
                }
            }
        }
    }
    paths.sort();
    for p in paths {
        let (h, log) = read_log(&p)?;
        cells.entry(h.cell).or_default().push(log);
    }
    Ok(cells)
}

/// Estimates clean statistics from the `nonexnone` logs and writes the
/// verdict table for every logged cell.
pub fn cmd_detect_eval(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Verdict>> {
    let env = cfg.env_config()?;
    let cells = read_all_logs(out)?;
    let clean = cells.get(CLEAN_CELL).ok_or_else(|| {
        HarnessError::Config(format!(
            "no {CLEAN_CELL} logs under {}; run attack-eval with that cell first",
            logs_dir(out).display()
        ))
    })?;
    let stats = clean_stats(&env, clean, &cfg.hash())?;
    fs::write(out.join(STATS_FILE), stats.to_text())?;
    let rows = verdicts(&cells, &stats, &cfg.detector_config())?;
    let mut w = csv::Writer::from_path(out.join(DETECTION_FILE))?;
    w.write_record([
        "cell",
        "episodes",
        "mad_flagged",
        "cusum_flagged",
        "mad",
        "cusum",
    ])?;
    for r in &rows {
        w.write_record([
            r.cell.clone(),
            r.episodes.to_string(),
            r.mad_flagged.to_string(),
            r.cusum_flagged.to_string(),
            label(r.mad_detected()).into(),
            label(r.cusum_detected()).into(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}
