//! Attack × defense cells, episode runs and the Table-2-shaped summary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use shiftlab_core::attacks::{run_episode, AttackConfig, Defense, EpisodeModels, Variant};
use shiftlab_core::metrics::{episode_reward, mean, slot, std_dev, TrajectoryLog};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::logfile::{write_log, LogHeader};
use crate::stack::Stack;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenseKind {
    None,
    Purifier,
}

impl DefenseKind {
    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Purifier => "purifier",
        }
    }
}

/// Overrides a cell applies on top of the configured attack settings.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Modifiers {
    pub gamma2: Option<f64>,
    /// l∞ budget in units of 1/255.
    pub epsilon_255: Option<f64>,
    pub xi: Option<f64>,
    pub realism: Option<bool>,
}

/// One evaluation cell, written `ATTACK[:key=value,...]xDEFENSE`, e.g.
/// `pgd:eps=1xpurifier` or `shift-o:g2=4,realism=offxnone`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub variant: Variant,
    pub defense: DefenseKind,
    pub mods: Modifiers,
}

impl Cell {
    pub fn new(variant: Variant, defense: DefenseKind) -> Self {
        Self {
            variant,
            defense,
            mods: Modifiers::default(),
        }
    }

    pub fn with(mut self, mods: Modifiers) -> Self {
        self.mods = mods;
        self
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: &str| HarnessError::Config(format!("cell {text:?}: {m}"));
        let (attack, defense) = text
            .rsplit_once('x')
            .ok_or_else(|| bad("expected ATTACKxDEFENSE"))?;
        let defense = match defense.to_ascii_lowercase().as_str() {
            "none" => DefenseKind::None,
            "purifier" => DefenseKind::Purifier,
            _ => return Err(bad("defense must be none or purifier")),
        };
        let (name, mods_text) = attack.split_once(':').unwrap_or((attack, ""));
        let variant = Variant::parse(name)?;
        let mut mods = Modifiers::default();
        for kv in mods_text.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad("modifiers are key=value"))?;
            let num = || {
                v.parse::<f64>()
                    .map_err(|_| bad(&format!("{k} needs a number")))
            };
            match k {
                "g2" => mods.gamma2 = Some(num()?),
                "eps" => mods.epsilon_255 = Some(num()?),
                "xi" => mods.xi = Some(num()?),
                "realism" => {
                    mods.realism = Some(match v {
                        "on" => true,
                        "off" => false,
                        _ => return Err(bad("realism is on or off")),
                    })
                }
                _ => return Err(bad(&format!("unknown modifier {k}"))),
            }
        }
        Ok(Self {
            variant,
            defense,
            mods,
        })
    }

    pub fn attack_config(&self, base: &AttackConfig, seed: u64) -> AttackConfig {
        let m = &self.mods;
        AttackConfig {
            variant: self.variant,
            gamma2: m.gamma2.unwrap_or(base.gamma2),
            epsilon: m.epsilon_255.map_or(base.epsilon, |e| e / 255.0),
            xi: m.xi.unwrap_or(base.xi),
            realism: m.realism.unwrap_or(base.realism),
            seed,
            ..base.clone()
        }
    }

    pub fn defense(&self, sigma_partial: f64) -> Defense {
        match self.defense {
            DefenseKind::None => Defense::None,
            DefenseKind::Purifier => Defense::Purifier { sigma_partial },
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.mods;
        let mut parts = Vec::new();
        if let Some(v) = m.gamma2 {
            parts.push(format!("g2={v}"));
        }
        if let Some(v) = m.epsilon_255 {
            parts.push(format!("eps={v}"));
        }
        if let Some(v) = m.xi {
            parts.push(format!("xi={v}"));
        }
        if let Some(v) = m.realism {
            parts.push(format!("realism={}", if v { "on" } else { "off" }));
        }
        write!(f, "{}", self.variant.name())?;
        if !parts.is_empty() {
            write!(f, ":{}", parts.join(","))?;
        }
        write!(f, "x{}", self.defense.name())
    }
}

/// Per-episode numbers behind one summary row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub reward: f64,
    pub deviation: f64,
    pub recon: f64,
    pub wasserstein: f64,
    pub ssim: f64,
    pub attacked: usize,
}

/// Mean of a metric over attacked steps, or over all steps when nothing was attacked.
pub fn attacked_mean(log: &TrajectoryLog, key: &str) -> f64 {
    let attacked: Vec<f64> = log
        .steps
        .iter()
        .filter(|s| s.attacked)
        .filter_map(|s| s.metrics.get(key).copied())
        .collect();
    if attacked.is_empty() {
        mean(&log.metric(key))
    } else {
        mean(&attacked)
    }
}

pub fn summarize(log: &TrajectoryLog) -> EpisodeSummary {
    EpisodeSummary {
        reward: episode_reward(log),
        deviation: mean(&log.metric(slot::DEVIATED)),
        recon: attacked_mean(log, slot::RECON),
        wasserstein: attacked_mean(log, slot::W1_PREV_OBSERVED),
        ssim: attacked_mean(log, slot::SSIM),
        attacked: log.attacked_steps(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: String,
    pub episodes: usize,
    /// (mean, std) pairs.
    pub reward: (f64, f64),
    pub deviation_pct: (f64, f64),
    pub recon: (f64, f64),
    pub wasserstein: (f64, f64),
    pub ssim: (f64, f64),
}

impl CellSummary {
    pub fn from_episodes(cell: &str, eps: &[EpisodeSummary]) -> Self {
        let stat = |f: &dyn Fn(&EpisodeSummary) -> f64| {
            let v: Vec<f64> = eps.iter().map(f).collect();
            (mean(&v), std_dev(&v))
        };
        Self {
            cell: cell.to_string(),
            episodes: eps.len(),
            reward: stat(&|e| e.reward),
            deviation_pct: stat(&|e| 100.0 * e.deviation),
            recon: stat(&|e| e.recon),
            wasserstein: stat(&|e| e.wasserstein),
            ssim: stat(&|e| e.ssim),
        }
    }
}

/// A finished episode with the identifiers it was run under.
pub struct EpisodeRun {
    pub seed: u64,
    pub episode: usize,
    pub log: TrajectoryLog,
}

pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(episode as u64)
}

/// Runs every (seed, episode) of one cell; episodes run in parallel with
/// independent seeds, so the result does not depend on scheduling.
pub fn run_cell(stack: &Stack, cfg: &ExperimentConfig, cell: &Cell) -> Result<Vec<EpisodeRun>> {
    let models = EpisodeModels {
        q: &stack.q,
        denoiser: Some(&stack.denoiser),
        ae: Some(&stack.ae),
        projector: Some(&stack.projector),
        np: stack.np,
        history: stack.history,
    };
    let base = cfg.attack_config();
    let defense = cell.defense(cfg.sigma_partial());
    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..cfg.episodes_per_seed).map(move |e| (s, e)))
        .collect();
    jobs.par_iter()
        .map(|&(seed, episode)| {
            let log = run_episode(
                &stack.env,
                &models,
                &cell.attack_config(&base, seed),
                &defense,
                episode_seed(seed, episode),
            )?;
            Ok(EpisodeRun { seed, episode, log })
        })
        .collect()
}

pub const SUMMARY_FILE: &str = "summary.csv";
const SUMMARY_HEADER: [&str; 13] = [
    "cell",
    "episodes",
    "reward_mean",
    "reward_std",
    "dev_pct_mean",
    "dev_pct_std",
    "recon_mean",
    "recon_std",
    "wass_mean",
    "wass_std",
    "ssim_mean",
    "ssim_std",
    "config",
];

pub fn write_summary(path: &Path, rows: &[CellSummary], config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        let mut rec = vec![r.cell.clone(), r.episodes.to_string()];
        for (m, s) in [r.reward, r.deviation_pct, r.recon, r.wasserstein, r.ssim] {
            rec.push(m.to_string());
            rec.push(s.to_string());
        }
        rec.push(config_hash.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<CellSummary>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != SUMMARY_HEADER {
        return Err(HarnessError::Format(format!(
            "{} has an unexpected header",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec[i].parse::<f64>().map_err(|_| {
                HarnessError::Format(format!("column {} of {:?}", SUMMARY_HEADER[i], &rec[0]))
            })
        };
        rows.push(CellSummary {
            cell: rec[0].to_string(),
            episodes: rec[1]
                .parse()
                .map_err(|_| HarnessError::Format("episodes".into()))?,
            reward: (num(2)?, num(3)?),
            deviation_pct: (num(4)?, num(5)?),
            recon: (num(6)?, num(7)?),
            wasserstein: (num(8)?, num(9)?),
            ssim: (num(10)?, num(11)?),
        });
    }
    Ok(rows)
}

pub fn logs_dir(out: &Path) -> PathBuf {
    out.join("logs")
}

/// File-system friendly form of a cell label.
pub fn cell_dir_name(cell: &str) -> String {
    cell.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs the configured cells (or `only`, when given) against checkpoints in
/// `out`, writing one log per episode and the summary table.
pub fn cmd_attack_eval(
    cfg: &ExperimentConfig,
    out: &Path,
    only: &[String],
) -> Result<Vec<CellSummary>> {
    let stack = Stack::load(cfg, out)?;
    let cells: Vec<Cell> = if only.is_empty() {
        &cfg.attack.cells
    } else {
        only
    }
    .iter()
    .map(|c| Cell::parse(c))
    .collect::<Result<_>>()?;
    let hash = cfg.hash();
    let mut rows = Vec::new();
    for cell in &cells {
        let label = cell.to_string();
        let runs = run_cell(&stack, cfg, cell)?;
        let dir = logs_dir(out).join(cell_dir_name(&label));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        for r in &runs {
            let stem = format!("s{}_e{}", r.seed, r.episode);
            let header = LogHeader {
                config_hash: hash.clone(),
                cell: label.clone(),
                seed: r.seed,
                episode: r.episode,
                frames: format!("{stem}.frames"),
                size: stack.env.frame_size,
            };
            write_log(&dir, &stem, &header, &r.log)?;
        }
        let eps: Vec<EpisodeSummary> = runs.iter().map(|r| summarize(&r.log)).collect();
        rows.push(CellSummary::from_episodes(&label, &eps));
    }
    write_summary(&out.join(SUMMARY_FILE), &rows, &hash)?;
    Ok(rows)
}
