//! Training pairs (next frame, history window) collected from clean rollouts,
//! and their packed on-disk form.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{HistoryBuffer, HistoryWindow};
use crate::env::{render, reset, step, Action, EnvConfig, EnvState, QTable, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::frame::Frame;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub target: Frame,
    pub cond: HistoryWindow,
    /// Exact state behind `target`.
    pub state: EnvState,
}

/// Rolls out an ε-greedy reference policy (greedy w.r.t. the exact Q*) and
/// records every (next frame, preceding k-window) pair. Half of the episodes
/// start from a uniformly drawn valid state for coverage.
pub fn collect_samples(
    cfg: &EnvConfig,
    reference: &QTable,
    episodes: usize,
    epsilon: f64,
    k: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if k == 0 {
        return Err(Error::Config("history length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = reference.space.states();
    let mut out = Vec::new();
    for ep in 0..episodes {
        let mut s = if ep % 2 == 0 {
            reset(cfg)?
        } else {
            states[rng.random_range(0..states.len())].clone()
        };
        let mut hist = HistoryBuffer::new(k);
        loop {
            let a = if rng.random::<f64>() < epsilon {
                Action::from_index(rng.random_range(0..NUM_ACTIONS)).expect("index")
            } else {
                reference
                    .greedy(&s)
                    .ok_or_else(|| Error::State("rollout left S*".into()))?
            };
            hist.push(render(cfg, &s), a);
            let o = step(cfg, &s, a)?;
            s = o.state;
            if hist.is_warm() {
                out.push(Sample {
                    target: render(cfg, &s),
                    cond: hist.window()?,
                    state: s.canonical(cfg),
                });
            }
            if o.done {
                break;
            }
        }
    }
    Ok(out)
}

const MAGIC: &[u8] = b"shiftlab-dataset";
const VERSION: u32 = 1;
const NULL_CODE: u8 = 255;

/// Layout: magic, u32 version, u32 hash length, hash bytes, u32 k,
/// u32 frame size, u32 lanes, u64 count, then per sample the target pixels,
/// k history frames (f64 LE), k action codes (255 = Null) and the state as
/// u16 agent row, u16 tick, u16 per lane.
pub fn write_dataset(path: impl AsRef<Path>, env_hash: &str, samples: &[Sample]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("empty dataset".into()))?;
    let k = first.cond.k();
    let size = first.target.size();
    let lanes = first.state.car_cols.len();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(env_hash.len() as u32).to_le_bytes());
    buf.extend_from_slice(env_hash.as_bytes());
    for v in [k as u32, size as u32, lanes as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        if s.cond.k() != k || s.target.size() != size || s.state.car_cols.len() != lanes {
            return Err(Error::Format("samples disagree on shape".into()));
        }
        for f in std::iter::once(&s.target).chain(s.cond.frames()) {
            for p in f.pixels() {
                buf.extend_from_slice(&p.to_le_bytes());
            }
        }
        for a in s.cond.actions() {
            buf.push(a.map_or(NULL_CODE, |a| a.index() as u8));
        }
        for v in [s.state.agent_row, s.state.tick]
            .iter()
            .chain(&s.state.car_cols)
        {
            buf.extend_from_slice(&(*v as u16).to_le_bytes());
        }
    }
    if let Some(dir) = path.as_ref().parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("dataset truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn frame(&mut self, size: usize) -> Result<Frame> {
        let raw = self.take(size * size * 8)?;
        Ok(Frame::from_pixels(
            size,
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ))
    }
}

/// Returns the stored environment hash and the samples.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<(String, Vec<Sample>)> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let hlen = r.u32()? as usize;
    let hash = String::from_utf8(r.take(hlen)?.to_vec())
        .map_err(|_| Error::Format("hash is not UTF-8".into()))?;
    let (k, size, lanes) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let target = r.frame(size)?;
        let frames = (0..k).map(|_| r.frame(size)).collect::<Result<Vec<_>>>()?;
        let actions = r
            .take(k)?
            .iter()
            .map(|&c| match c {
                NULL_CODE => Ok(None),
                c => Action::from_index(c as usize)
                    .map(Some)
                    .ok_or_else(|| Error::Format(format!("bad action code {c}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let agent_row = r.u16()? as usize;
        let tick = r.u16()? as usize;
        let car_cols = (0..lanes)
            .map(|_| r.u16().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample {
            target,
            cond: HistoryWindow::new(frames, actions)?,
            state: EnvState {
                agent_row,
                car_cols,
                tick,
            },
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    Ok((hash, out))
}
