//! MiniFreeway: a deterministic crossing game rendered to small grayscale
//! frames, together with exhaustive oracles over its reachable state set.
//!
//! The agent lives in a fixed column and moves between rows; one car per lane
//! slides horizontally with a constant speed and wraps around. Reaching row 0
//! scores +1, sharing a cell with a car scores −1; both send the agent back to
//! the bottom row in the same step.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frame::Frame;

pub const NUM_ACTIONS: usize = 3;

pub const AGENT_INTENSITY: f64 = 1.0;
pub const CAR_INTENSITY: f64 = 0.6;
pub const LANE_INTENSITY: f64 = 0.2;

/// Upper bound for exhaustive enumeration.
pub const MAX_STATES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Up = 0,
    Down = 1,
    Stay = 2,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Up, Action::Down, Action::Stay];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

/// Identifier of the (point-mass) start distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartState {
    /// Agent on the bottom row, car `j` at column `j · grid / lanes`.
    Staggered,
}

impl StartState {
    pub fn name(self) -> &'static str {
        "staggered"
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "staggered" => Ok(StartState::Staggered),
            other => Err(Error::Config(format!(
                "unknown initial distribution `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub grid_size: usize,
    pub num_lanes: usize,
    pub lane_speeds: Vec<i64>,
    pub frame_size: usize,
    pub episode_horizon: usize,
    pub discount: f64,
    pub initial_distribution: StartState,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid_size: 12,
            num_lanes: 3,
            lane_speeds: vec![1, -2, 3],
            frame_size: 16,
            episode_horizon: 64,
            discount: 0.95,
            initial_distribution: StartState::Staggered,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let g = self.grid_size;
        if g < 3 {
            return Err(Error::Config(format!(
                "grid_size must be at least 3, got {g}"
            )));
        }
        if self.num_lanes == 0 || self.num_lanes + 2 > g {
            return Err(Error::Config(format!(
                "num_lanes {} does not fit a grid of {g}",
                self.num_lanes
            )));
        }
        if self.lane_speeds.len() != self.num_lanes {
            return Err(Error::Config(format!(
                "expected {} lane speeds, got {}",
                self.num_lanes,
                self.lane_speeds.len()
            )));
        }
        if let Some(v) = self
            .lane_speeds
            .iter()
            .find(|v| **v == 0 || v.unsigned_abs() as usize >= g)
        {
            return Err(Error::Config(format!(
                "lane speed {v} must be nonzero with |speed| < grid_size"
            )));
        }
        if self.frame_size < g {
            return Err(Error::Config(format!(
                "frame_size {} smaller than grid_size {g}",
                self.frame_size
            )));
        }
        if self.episode_horizon == 0 {
            return Err(Error::Config("episode_horizon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Config(format!(
                "discount {} outside [0, 1)",
                self.discount
            )));
        }
        Ok(())
    }

    /// Row of lane `j`, spread evenly strictly between the goal row and the
    /// bottom row.
    pub fn lane_row(&self, lane: usize) -> usize {
        (lane + 1) * (self.grid_size - 1) / (self.num_lanes + 1)
    }

    pub fn agent_col(&self) -> usize {
        self.grid_size / 2
    }

    pub fn bottom_row(&self) -> usize {
        self.grid_size - 1
    }

    fn offset(&self) -> usize {
        (self.frame_size - self.grid_size) / 2
    }

    pub fn frame_pixels(&self) -> usize {
        self.frame_size * self.frame_size
    }

    fn start_col(&self, lane: usize) -> usize {
        match self.initial_distribution {
            StartState::Staggered => lane * self.grid_size / self.num_lanes,
        }
    }

    /// Length of the joint car cycle: after this many ticks every car is back
    /// at its start column.
    pub fn car_period(&self) -> usize {
        self.lane_speeds
            .iter()
            .map(|v| self.grid_size / gcd(self.grid_size, v.unsigned_abs() as usize))
            .fold(1, lcm)
    }

    pub fn car_col_at(&self, lane: usize, tick: usize) -> usize {
        let g = self.grid_size as i64;
        let shift = (self.lane_speeds[lane] * (tick % self.car_period()) as i64).rem_euclid(g);
        ((self.start_col(lane) as i64 + shift).rem_euclid(g)) as usize
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Exact symbolic state. `tick` counts steps since reset; states in the valid
/// set are stored with `tick` reduced modulo [`EnvConfig::car_period`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EnvState {
    pub agent_row: usize,
    pub car_cols: Vec<usize>,
    pub tick: usize,
}

impl EnvState {
    pub fn canonical(&self, cfg: &EnvConfig) -> EnvState {
        EnvState {
            tick: self.tick % cfg.car_period(),
            ..self.clone()
        }
    }

    pub fn check(&self, cfg: &EnvConfig) -> Result<()> {
        let g = cfg.grid_size;
        if self.agent_row >= g {
            return Err(Error::State(format!(
                "agent_row {} outside grid {g}",
                self.agent_row
            )));
        }
        if self.car_cols.len() != cfg.num_lanes || self.car_cols.iter().any(|&c| c >= g) {
            return Err(Error::State(format!(
                "car columns {:?} invalid for {} lanes",
                self.car_cols, cfg.num_lanes
            )));
        }
        Ok(())
    }

    fn collides(&self, cfg: &EnvConfig) -> bool {
        (0..cfg.num_lanes)
            .any(|j| cfg.lane_row(j) == self.agent_row && self.car_cols[j] == cfg.agent_col())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

pub fn reset(cfg: &EnvConfig) -> Result<EnvState> {
    cfg.validate()?;
    Ok(EnvState {
        agent_row: cfg.bottom_row(),
        car_cols: (0..cfg.num_lanes).map(|j| cfg.start_col(j)).collect(),
        tick: 0,
    })
}

/// Cars advance first, then the agent moves; events are judged on the final
/// cells.
pub fn step(cfg: &EnvConfig, state: &EnvState, action: Action) -> Result<StepOutcome> {
    state.check(cfg)?;
    let g = cfg.grid_size as i64;
    let car_cols = state
        .car_cols
        .iter()
        .zip(&cfg.lane_speeds)
        .map(|(&c, &v)| (c as i64 + v).rem_euclid(g) as usize)
        .collect();
    let agent_row = match action {
        Action::Up => state.agent_row.saturating_sub(1),
        Action::Down => (state.agent_row + 1).min(cfg.bottom_row()),
        Action::Stay => state.agent_row,
    };
    let mut next = EnvState {
        agent_row,
        car_cols,
        tick: state.tick + 1,
    };
    let mut reward = 0.0;
    if next.collides(cfg) {
        reward = -1.0;
        next.agent_row = cfg.bottom_row();
    } else if next.agent_row == 0 {
        reward = 1.0;
        next.agent_row = cfg.bottom_row();
    }
    let done = next.tick >= cfg.episode_horizon;
    Ok(StepOutcome {
        state: next,
        reward,
        done,
    })
}

/// Lane rows at 0.2, cars at 0.6, agent at 1.0, background 0.
pub fn render(cfg: &EnvConfig, state: &EnvState) -> Frame {
    let mut f = Frame::zeros(cfg.frame_size);
    let o = cfg.offset();
    for j in 0..cfg.num_lanes {
        let r = o + cfg.lane_row(j);
        for c in 0..cfg.grid_size {
            f.set(r, o + c, LANE_INTENSITY);
        }
        if let Some(&c) = state.car_cols.get(j) {
            if c < cfg.grid_size {
                f.set(r, o + c, CAR_INTENSITY);
            }
        }
    }
    if state.agent_row < cfg.grid_size {
        f.set(o + state.agent_row, o + cfg.agent_col(), AGENT_INTENSITY);
    }
    f
}

/// Exact inverse of [`render`] on canonical states.
pub fn unrender(cfg: &EnvConfig, frame: &Frame) -> Result<EnvState> {
    if frame.size() != cfg.frame_size {
        return Err(Error::NotAValidRender);
    }
    let o = cfg.offset();
    let col = o + cfg.agent_col();
    let agent_rows: Vec<usize> = (0..cfg.grid_size)
        .filter(|&r| frame.get(o + r, col) == AGENT_INTENSITY)
        .collect();
    let [agent_row] = agent_rows[..] else {
        return Err(Error::NotAValidRender);
    };
    let mut car_cols = Vec::with_capacity(cfg.num_lanes);
    for j in 0..cfg.num_lanes {
        let r = o + cfg.lane_row(j);
        let cars: Vec<usize> = (0..cfg.grid_size)
            .filter(|&c| frame.get(r, o + c) == CAR_INTENSITY)
            .collect();
        match cars[..] {
            [c] => car_cols.push(c),
            [] if agent_row == cfg.lane_row(j) => car_cols.push(cfg.agent_col()),
            _ => return Err(Error::NotAValidRender),
        }
    }
    let tick = (0..cfg.car_period())
        .find(|&t| (0..cfg.num_lanes).all(|j| cfg.car_col_at(j, t) == car_cols[j]))
        .ok_or(Error::NotAValidRender)?;
    let state = EnvState {
        agent_row,
        car_cols,
        tick,
    };
    if render(cfg, &state) != *frame {
        return Err(Error::NotAValidRender);
    }
    Ok(state)
}

/// The reachable set S* with O(1) membership and transition lookups.
#[derive(Debug, Clone)]
pub struct StateSpace {
    config: EnvConfig,
    states: Vec<EnvState>,
    index: HashMap<EnvState, usize>,
}

impl StateSpace {
    /// Breadth-first closure from the start state under every action.
    pub fn enumerate(cfg: &EnvConfig) -> Result<Self> {
        Self::enumerate_with_limit(cfg, MAX_STATES)
    }

    pub fn enumerate_with_limit(cfg: &EnvConfig, limit: usize) -> Result<Self> {
        let start = reset(cfg)?.canonical(cfg);
        let mut states = vec![start.clone()];
        let mut index = HashMap::from([(start.clone(), 0)]);
        let mut queue = VecDeque::from([start]);
        while let Some(s) = queue.pop_front() {
            for a in Action::ALL {
                let next = step(cfg, &s, a)?.state.canonical(cfg);
                if !index.contains_key(&next) {
                    if states.len() >= limit {
                        return Err(Error::Capacity { limit });
                    }
                    index.insert(next.clone(), states.len());
                    states.push(next.clone());
                    queue.push_back(next);
                }
            }
        }
        Ok(Self {
            config: cfg.clone(),
            states,
            index,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn states(&self) -> &[EnvState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Index of a state (any tick; it is reduced to canonical form first).
    pub fn index_of(&self, s: &EnvState) -> Option<usize> {
        self.index.get(&s.canonical(&self.config)).copied()
    }

    pub fn contains(&self, s: &EnvState) -> bool {
        self.index_of(s).is_some()
    }

    /// Distinct one-step successors, in action order.
    pub fn reachable_next(&self, s: &EnvState) -> Result<Vec<EnvState>> {
        if !self.contains(s) {
            return Err(Error::State(format!("{s:?} is not in the valid state set")));
        }
        let mut out: Vec<EnvState> = Vec::with_capacity(NUM_ACTIONS);
        for a in Action::ALL {
            let n = step(&self.config, s, a)?.state.canonical(&self.config);
            if !out.contains(&n) {
                out.push(n);
            }
        }
        Ok(out)
    }

    pub fn renders(&self) -> Vec<Frame> {
        self.states
            .iter()
            .map(|s| render(&self.config, s))
            .collect()
    }
}

/// Exact Q* over S* × A together with the undiscounted episode return of its
/// greedy policy from the start state.
#[derive(Debug, Clone)]
pub struct QTable {
    pub space: StateSpace,
    pub q: Vec<[f64; NUM_ACTIONS]>,
    pub optimal_return: f64,
    pub sweeps: usize,
}

impl QTable {
    pub fn values(&self, s: &EnvState) -> Option<[f64; NUM_ACTIONS]> {
        self.space.index_of(s).map(|i| self.q[i])
    }

    pub fn greedy(&self, s: &EnvState) -> Option<Action> {
        self.values(s)
            .map(|q| Action::from_index(argmax(&q)).unwrap())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn value_iteration(cfg: &EnvConfig) -> Result<QTable> {
    let space = StateSpace::enumerate(cfg)?;
    let n = space.len();
    let mut trans = Vec::with_capacity(n);
    for s in space.states() {
        let mut row = [(0usize, 0.0f64); NUM_ACTIONS];
        for a in Action::ALL {
            let out = step(cfg, s, a)?;
            row[a.index()] = (space.index_of(&out.state).expect("closure"), out.reward);
        }
        trans.push(row);
    }
    let gamma = cfg.discount;
    let mut q = vec![[0.0; NUM_ACTIONS]; n];
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let v: Vec<f64> = q
            .iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut delta = 0.0f64;
        for (qs, row) in q.iter_mut().zip(&trans) {
            for (qa, &(next, r)) in qs.iter_mut().zip(row) {
                let new = r + gamma * v[next];
                delta = delta.max((new - *qa).abs());
                *qa = new;
            }
        }
        if delta < 1e-10 || sweeps > 100_000 {
            break;
        }
    }
    let mut table = QTable {
        space,
        q,
        optimal_return: 0.0,
        sweeps,
    };
    let mut s = reset(cfg)?;
    let mut total = 0.0;
    loop {
        let a = table.greedy(&s).expect("start state reachable");
        let out = step(cfg, &s, a)?;
        total += out.reward;
        s = out.state;
        if out.done {
            break;
        }
    }
    table.optimal_return = total;
    Ok(table)
}

const STATES_MAGIC: &[u8] = b"shiftlab-states";
const STATES_VERSION: u32 = 1;

/// Packs S* as `magic, u32 version, u32 lanes, u64 count, u16 records`
/// where each record is `agent_row, tick, car_cols...`.
pub fn write_states(path: impl AsRef<Path>, space: &StateSpace) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(STATES_MAGIC);
    buf.extend_from_slice(&STATES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(space.config.num_lanes as u32).to_le_bytes());
    buf.extend_from_slice(&(space.len() as u64).to_le_bytes());
    for s in space.states() {
        for v in [s.agent_row, s.tick].iter().chain(&s.car_cols) {
            buf.extend_from_slice(&(*v as u16).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_states(path: impl AsRef<Path>) -> Result<Vec<EnvState>> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Format(format!("state cache: {m}"));
    let rest = bytes
        .strip_prefix(STATES_MAGIC)
        .ok_or_else(|| bad("missing magic"))?;
    if rest.len() < 16 {
        return Err(bad("truncated header"));
    }
    let version = u32::from_le_bytes(rest[0..4].try_into().unwrap());
    if version != STATES_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let lanes = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(rest[8..16].try_into().unwrap()) as usize;
    let rec = 2 * (2 + lanes);
    let body = &rest[16..];
    if body.len() != count * rec {
        return Err(bad("record section has the wrong length"));
    }
    Ok(body
        .chunks_exact(rec)
        .map(|r| {
            let v: Vec<usize> = r
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
                .collect();
            EnvState {
                agent_row: v[0],
                tick: v[1],
                car_cols: v[2..].to_vec(),
            }
        })
        .collect())
}
