use std::collections::BTreeMap;

use crate::env::{render, Action, EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::frame::Frame;

/// Names of the per-step metric slots written by the episode runner.
pub mod slot {
    /// Importance weight ω of the true state.
    pub const OMEGA: &str = "omega";
    /// 1 when the executed action differs from the clean greedy action.
    pub const DEVIATED: &str = "deviated";
    pub const L2_TRUE: &str = "l2_true";
    pub const SSIM: &str = "ssim";
    pub const RECON: &str = "recon";
    /// W1 between consecutive observed frames.
    pub const W1_PREV_OBSERVED: &str = "w1_prev_observed";
    /// W1 between the observed frame and the previous true frame.
    pub const W1_PREV_TRUE: &str = "w1_prev_true";
    pub const REALISM: &str = "realism";
    pub const SEMANTIC: &str = "semantic";
    pub const ALIGNED: &str = "aligned";
}

/// One environment step. `observed` is the frame the attacker emitted.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub t: usize,
    pub true_state: EnvState,
    pub observed: Frame,
    pub action: Action,
    pub reward: f64,
    pub attacked: bool,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrajectoryLog {
    pub steps: Vec<StepRecord>,
}

impl TrajectoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: StepRecord) {
        self.steps.push(record);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn attacked_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.attacked).count()
    }

    /// Values of one metric slot, skipping steps where it is absent.
    pub fn metric(&self, name: &str) -> Vec<f64> {
        self.steps
            .iter()
            .filter_map(|s| s.metrics.get(name).copied())
            .collect()
    }
}

/// Undiscounted return.
pub fn episode_reward(log: &TrajectoryLog) -> f64 {
    log.steps.iter().map(|s| s.reward).sum()
}

/// Percentage of steps where the greedy action on the observed frame differs
/// from the greedy action on the clean render of the true state.
pub fn deviation_rate<F>(log: &TrajectoryLog, cfg: &EnvConfig, mut greedy: F) -> Result<f64>
where
    F: FnMut(&Frame) -> Result<Action>,
{
    if log.is_empty() {
        return Ok(0.0);
    }
    let mut changed = 0usize;
    for s in &log.steps {
        if greedy(&s.observed)? != greedy(&render(cfg, &s.true_state))? {
            changed += 1;
        }
    }
    Ok(100.0 * changed as f64 / log.len() as f64)
}

/// Sum of L2 gaps between observed frames and clean renders over the `k`
/// steps before `t`; faithful iff the sum is at most `delta2`.
pub fn faithfulness(
    log: &TrajectoryLog,
    cfg: &EnvConfig,
    t: usize,
    k: usize,
    delta2: f64,
) -> Result<(f64, bool)> {
    if k == 0 || t < k || t > log.len() {
        return Err(Error::Warmup(format!(
            "window of {k} ending before step {t} is incomplete (log has {} steps)",
            log.len()
        )));
    }
    let score: f64 = log.steps[t - k..t]
        .iter()
        .map(|s| s.observed.l2_distance(&render(cfg, &s.true_state)))
        .sum();
    Ok((score, score <= delta2))
}
