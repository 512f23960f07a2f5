//! Trajectory logs: one tab-separated record per step behind a
//! self-describing header, with frames in a packed sidecar file.
//!
//! ```text
//! shiftlab-log 1 config=<hash> cell=<ATTACKxDEFENSE> seed=<n> episode=<n> frames=<file> size=<n>
//! t  true_state  frame  action  reward  attacked  metrics
//! 0  11|0,4,8|0  0      0       0       0         omega=0.31 ssim=1 ...
//! ```
//!
//! The sidecar is `shiftlab-frames`, u32 version, u32 frame size, u64
//! count, then little-endian `f64` pixels.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use shiftlab_core::env::{Action, EnvState};
use shiftlab_core::metrics::{StepRecord, TrajectoryLog};
use shiftlab_core::Frame;

use crate::error::{HarnessError, Result};

pub const LOG_VERSION: u32 = 1;
const LOG_MAGIC: &str = "shiftlab-log";
const FRAMES_MAGIC: &[u8] = b"shiftlab-frames";
const COLUMNS: &str = "t\ttrue_state\tframe\taction\treward\tattacked\tmetrics";

#[derive(Debug, Clone, PartialEq)]
pub struct LogHeader {
    pub config_hash: String,
    pub cell: String,
    pub seed: u64,
    pub episode: usize,
    pub frames: String,
    pub size: usize,
}

fn bad(m: impl Into<String>) -> HarnessError {
    HarnessError::Format(m.into())
}

fn state_text(s: &EnvState) -> String {
    let cars: Vec<String> = s.car_cols.iter().map(usize::to_string).collect();
    format!("{}|{}|{}", s.agent_row, cars.join(","), s.tick)
}

fn parse_state(text: &str) -> Result<EnvState> {
    let parts: Vec<&str> = text.split('|').collect();
    let [row, cars, tick] = parts[..] else {
        return Err(bad(format!("state {text:?}")));
    };
    let num = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| bad(format!("state {text:?}")))
    };
    let car_cols = if cars.is_empty() {
        Vec::new()
    } else {
        cars.split(',').map(num).collect::<Result<_>>()?
    };
    Ok(EnvState {
        agent_row: num(row)?,
        car_cols,
        tick: num(tick)?,
    })
}

/// Writes `<stem>.log` and `<stem>.frames` into `dir`; returns the log path.
pub fn write_log(
    dir: &Path,
    stem: &str,
    header: &LogHeader,
    log: &TrajectoryLog,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let frames_name = format!("{stem}.frames");
    let mut packed = Vec::new();
    packed.extend_from_slice(FRAMES_MAGIC);
    packed.extend_from_slice(&LOG_VERSION.to_le_bytes());
    packed.extend_from_slice(&(header.size as u32).to_le_bytes());
    packed.extend_from_slice(&(log.len() as u64).to_le_bytes());
    let mut text = format!(
        "{LOG_MAGIC} {LOG_VERSION} config={} cell={} seed={} episode={} frames={frames_name} size={}\n{COLUMNS}\n",
        header.config_hash, header.cell, header.seed, header.episode, header.size
    );
    for (i, s) in log.steps.iter().enumerate() {
        if s.observed.size() != header.size {
            return Err(bad(format!(
                "step {} frame size {} ≠ {}",
                s.t,
                s.observed.size(),
                header.size
            )));
        }
        for v in s.observed.pixels() {
            packed.extend_from_slice(&v.to_le_bytes());
        }
        let metrics: Vec<String> = s.metrics.iter().map(|(k, v)| format!("{k}={v}")).collect();
        text.push_str(&format!(
            "{}\t{}\t{i}\t{}\t{}\t{}\t{}\n",
            s.t,
            state_text(&s.true_state),
            s.action.index(),
            s.reward,
            u8::from(s.attacked),
            metrics.join(" ")
        ));
    }
    fs::write(dir.join(&frames_name), packed)?;
    let path = dir.join(format!("{stem}.log"));
    fs::write(&path, text)?;
    Ok(path)
}

fn read_frames(path: &Path, size: usize) -> Result<Vec<Frame>> {
    let bytes = fs::read(path)?;
    let rest = bytes
        .strip_prefix(FRAMES_MAGIC)
        .ok_or_else(|| bad("frame sidecar magic"))?;
    if rest.len() < 16 {
        return Err(bad("frame sidecar truncated"));
    }
    let version = u32::from_le_bytes(rest[0..4].try_into().unwrap());
    if version != LOG_VERSION {
        return Err(bad(format!("unsupported frame sidecar version {version}")));
    }
    let stored = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(rest[8..16].try_into().unwrap()) as usize;
    let body = &rest[16..];
    if stored != size || body.len() != count * size * size * 8 {
        return Err(bad("frame sidecar does not match its header"));
    }
    Ok(body
        .chunks_exact(size * size * 8)
        .map(|c| {
            Frame::from_pixels(
                size,
                c.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            )
        })
        .collect())
}

fn parse_header(line: &str) -> Result<LogHeader> {
    let mut words = line.split(' ');
    if words.next() != Some(LOG_MAGIC) {
        return Err(bad("not a shiftlab trajectory log"));
    }
    let version = words.next().ok_or_else(|| bad("missing version"))?;
    if version != LOG_VERSION.to_string() {
        return Err(bad(format!("unsupported log version {version}")));
    }
    let fields: BTreeMap<&str, &str> = words.filter_map(|w| w.split_once('=')).collect();
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| bad(format!("header lacks {k}")))
    };
    let num = |k: &str| {
        get(k)?
            .parse::<u64>()
            .map_err(|_| bad(format!("header field {k}")))
    };
    Ok(LogHeader {
        config_hash: get("config")?.into(),
        cell: get("cell")?.into(),
        seed: num("seed")?,
        episode: num("episode")? as usize,
        frames: get("frames")?.into(),
        size: num("size")? as usize,
    })
}

pub fn read_log(path: &Path) -> Result<(LogHeader, TrajectoryLog)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = parse_header(lines.next().ok_or_else(|| bad("empty log"))?)?;
    if lines.next() != Some(COLUMNS) {
        return Err(bad("unexpected column line"));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let frames = read_frames(&dir.join(&header.frames), header.size)?;
    let mut log = TrajectoryLog::new();
    for line in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        let [t, state, frame, action, reward, attacked, metrics] = cols[..] else {
            return Err(bad(format!("record {line:?}")));
        };
        let field = |what: &str| bad(format!("{what} in {line:?}"));
        let index: usize = frame.parse().map_err(|_| field("frame index"))?;
        let observed = frames
            .get(index)
            .cloned()
            .ok_or_else(|| field("frame index"))?;
        let action = action
            .parse()
            .ok()
            .and_then(Action::from_index)
            .ok_or_else(|| field("action"))?;
        let mut m = BTreeMap::new();
        for kv in metrics.split(' ').filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| field("metric"))?;
            m.insert(k.to_string(), v.parse().map_err(|_| field("metric value"))?);
        }
        log.push(StepRecord {
            t: t.parse().map_err(|_| field("t"))?,
            true_state: parse_state(state)?,
            observed,
            action,
            reward: reward.parse().map_err(|_| field("reward"))?,
            attacked: match attacked {
                "0" => false,
                "1" => true,
                _ => return Err(field("attacked flag")),
            },
            metrics: m,
        });
    }
    Ok((header, log))
}
