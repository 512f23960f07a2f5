//! SHIFT-O / SHIFT-I orchestration, the importance-percentile scheduler and
//! the l∞ and geometric baselines.

mod baselines;
mod episode;
mod shift;

pub use baselines::{minbest_attack, minbest_trace, pgd_attack, rotate_attack, transform_attack};
pub use episode::{run_episode, Defense, EpisodeModels};
pub use shift::{shift_step, ShiftModels};

use crate::diffusion::{HistoryBuffer, DEFAULT_GUIDANCE_TEMPERATURE};
use crate::error::{Error, Result};
use crate::metrics::quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    None,
    Pgd,
    MinBest,
    Rotate,
    Transform,
    ShiftO,
    ShiftI,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::None,
        Variant::Pgd,
        Variant::MinBest,
        Variant::Rotate,
        Variant::Transform,
        Variant::ShiftO,
        Variant::ShiftI,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Pgd => "pgd",
            Variant::MinBest => "minbest",
            Variant::Rotate => "rotate",
            Variant::Transform => "transform",
            Variant::ShiftO => "shift-o",
            Variant::ShiftI => "shift-i",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown attack {s:?}")))
    }

    pub fn is_shift(self) -> bool {
        matches!(self, Variant::ShiftO | Variant::ShiftI)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub variant: Variant,
    /// Fraction of steps that may be attacked.
    pub xi: f64,
    /// Policy-guidance weight Γ2.
    pub gamma2: f64,
    pub temperature: f64,
    /// Apply the autoencoder realism step inside SHIFT sampling.
    pub realism: bool,
    pub realism_step_size: f64,
    /// l∞ budget of PGD and MinBest.
    pub epsilon: f64,
    pub iters: usize,
    pub degrees: f64,
    pub shift: (i32, i32),
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            variant: Variant::None,
            xi: 1.0,
            gamma2: 2.0,
            temperature: DEFAULT_GUIDANCE_TEMPERATURE,
            realism: true,
            realism_step_size: crate::realism::DEFAULT_REALISM_STEP,
            epsilon: 15.0 / 255.0,
            iters: 10,
            degrees: 1.0,
            shift: (1, 0),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(Error::Config(format!(
                "ξ must lie in [0, 1], got {}",
                self.xi
            )));
        }
        if !(self.epsilon >= 0.0) || !(self.gamma2 >= 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config(
                "ε and Γ2 must be nonnegative and the temperature positive".into(),
            ));
        }
        if self.degrees.abs() > 45.0 {
            return Err(Error::Config(format!(
                "rotation beyond 45° ({})",
                self.degrees
            )));
        }
        Ok(())
    }
}

/// Per-episode attacker bookkeeping.
#[derive(Debug, Clone)]
pub struct AttackState {
    k: usize,
    pub importance_history: Vec<f64>,
    pub attacks_so_far: usize,
    /// Clean frames and executed actions (SHIFT-O condition).
    pub true_history: HistoryBuffer,
    /// Frames shown to the victim and executed actions (SHIFT-I condition).
    pub imagined_history: HistoryBuffer,
    /// Running minimum of true-state values for the guidance positivity shift.
    pub q_floor: f64,
}

impl AttackState {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            importance_history: Vec::new(),
            attacks_so_far: 0,
            true_history: HistoryBuffer::new(k),
            imagined_history: HistoryBuffer::new(k),
            q_floor: f64::INFINITY,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Records ω for step `t` and decides whether to attack. Attacks when
    /// ω reaches the (1 − ξ)-quantile of the episode's weights so far
    /// (including ω) and fewer than t·ξ attacks were made; never during
    /// the first k steps.
    pub fn should_attack(&mut self, omega: f64, t: usize, xi: f64) -> bool {
        self.importance_history.push(omega);
        if t < self.k || xi <= 0.0 {
            return false;
        }
        let threshold = quantile(&self.importance_history, 1.0 - xi).expect("nonempty");
        let go = omega >= threshold && (self.attacks_so_far as f64) < t as f64 * xi;
        if go {
            self.attacks_so_far += 1;
        }
        go
    }
}
