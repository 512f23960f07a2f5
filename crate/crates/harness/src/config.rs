//! Experiment configuration read from TOML. Every section has defaults, so an
//! empty file is a valid configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shiftlab_core::attacks::AttackConfig;
use shiftlab_core::defense::DetectorConfig;
use shiftlab_core::diffusion::{DiffusionTrainConfig, NoiseParams};
use shiftlab_core::env::{EnvConfig, StartState};
use shiftlab_core::realism::AeConfig;
use shiftlab_core::victim::DqnConfig;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Evaluation seeds; each runs `episodes_per_seed` episodes per cell.
    pub seeds: Vec<u64>,
    pub episodes_per_seed: usize,
    pub output: PathBuf,
    pub env: EnvSection,
    pub victim: VictimSection,
    pub diffusion: DiffusionSection,
    pub autoencoder: AeSection,
    pub attack: AttackSection,
    pub detector: DetectorSection,
    pub thresholds: ThresholdSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            episodes_per_seed: 1,
            output: PathBuf::from("runs"),
            env: EnvSection::default(),
            victim: VictimSection::default(),
            diffusion: DiffusionSection::default(),
            autoencoder: AeSection::default(),
            attack: AttackSection::default(),
            detector: DetectorSection::default(),
            thresholds: ThresholdSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub grid_size: usize,
    pub lane_speeds: Vec<i64>,
    pub frame_size: usize,
    pub episode_horizon: usize,
    pub discount: f64,
    /// Start distribution; only `staggered` exists.
    pub start: String,
}

impl Default for EnvSection {
    fn default() -> Self {
        let e = EnvConfig::default();
        Self {
            grid_size: e.grid_size,
            lane_speeds: e.lane_speeds,
            frame_size: e.frame_size,
            episode_horizon: e.episode_horizon,
            discount: e.discount,
            start: e.initial_distribution.name().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimSection {
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub return_threshold: Option<f64>,
}

impl Default for VictimSection {
    fn default() -> Self {
        let d = DqnConfig::default();
        Self {
            seed: 7,
            hidden: d.hidden,
            train_steps: d.train_steps,
            learning_rate: d.learning_rate,
            return_threshold: d.return_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub seed: u64,
    /// History length k.
    pub history: usize,
    /// Reverse steps T.
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub rho: f64,
    pub hidden: Vec<usize>,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub drop_rate: f64,
    pub null_rate: f64,
    /// Episodes of ε-greedy optimal play collected for training.
    pub data_episodes: usize,
    pub data_epsilon: f64,
    pub data_seed: u64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let np = NoiseParams::default();
        let t = DiffusionTrainConfig::default();
        Self {
            seed: 3,
            history: 4,
            steps: np.steps,
            sigma_min: np.sigma_min,
            sigma_max: np.sigma_max,
            sigma_data: np.sigma_data,
            p_mean: np.p_mean,
            p_std: np.p_std,
            rho: np.rho,
            hidden: t.hidden,
            train_steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            drop_rate: t.drop_rate,
            null_rate: t.null_rate,
            data_episodes: 200,
            data_epsilon: 0.3,
            data_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeSection {
    pub seed: u64,
    pub hidden: usize,
    pub bottleneck: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub clean_error_limit: f64,
}

impl Default for AeSection {
    fn default() -> Self {
        let a = AeConfig::default();
        Self {
            seed: 4,
            hidden: a.hidden,
            bottleneck: a.bottleneck,
            epochs: a.epochs,
            learning_rate: a.learning_rate,
            clean_error_limit: a.clean_error_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Cells evaluated by `attack-eval`, written `ATTACKxDEFENSE`.
    pub cells: Vec<String>,
    pub xi: f64,
    pub gamma2: f64,
    pub temperature: f64,
    pub realism: bool,
    pub realism_step_size: f64,
    /// l∞ budget in units of 1/255.
    pub epsilon_255: f64,
    pub iters: usize,
    pub degrees: f64,
    pub shift: (i32, i32),
    /// Purifier noise level; defaults to the second rung of the ladder.
    pub sigma_partial: Option<f64>,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        let mut cells = Vec::new();
        for attack in [
            "none",
            "pgd",
            "minbest",
            "rotate",
            "transform",
            "shift-o",
            "shift-i",
        ] {
            for defense in ["none", "purifier"] {
                cells.push(format!("{attack}x{defense}"));
            }
        }
        Self {
            cells,
            xi: a.xi,
            gamma2: a.gamma2,
            temperature: a.temperature,
            realism: a.realism,
            realism_step_size: a.realism_step_size,
            epsilon_255: (a.epsilon * 255.0).round(),
            iters: a.iters,
            degrees: a.degrees,
            shift: a.shift,
            sigma_partial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub mad_threshold: f64,
    pub cusum_drift: f64,
    pub cusum_threshold: f64,
    pub window: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorConfig::default();
        Self {
            mad_threshold: d.mad_threshold,
            cusum_drift: d.cusum_drift,
            cusum_threshold: d.cusum_threshold,
            window: d.window,
        }
    }
}

/// Stealth thresholds δ1, δ2; unset values are derived from the clean render set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSection {
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Short digest of the canonical serialization, embedded in every artifact.
    pub fn hash(&self) -> String {
        nnkit::config_hash(&self.to_toml())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.episodes_per_seed == 0 {
            return Err(HarnessError::Config(
                "seed list and episodes_per_seed must be nonempty".into(),
            ));
        }
        self.env_config()?.validate()?;
        self.noise_params().validate()?;
        self.dqn_config().validate()?;
        self.attack_config().validate()?;
        self.detector_config().validate()?;
        for cell in &self.attack.cells {
            crate::eval::Cell::parse(cell)?;
        }
        Ok(())
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        let e = &self.env;
        Ok(EnvConfig {
            grid_size: e.grid_size,
            num_lanes: e.lane_speeds.len(),
            lane_speeds: e.lane_speeds.clone(),
            frame_size: e.frame_size,
            episode_horizon: e.episode_horizon,
            discount: e.discount,
            initial_distribution: StartState::parse(&e.start)?,
        })
    }

    pub fn dqn_config(&self) -> DqnConfig {
        let v = &self.victim;
        DqnConfig {
            hidden: v.hidden.clone(),
            train_steps: v.train_steps,
            learning_rate: v.learning_rate,
            return_threshold: v.return_threshold,
            ..DqnConfig::default()
        }
    }

    pub fn noise_params(&self) -> NoiseParams {
        let d = &self.diffusion;
        NoiseParams {
            sigma_data: d.sigma_data,
            p_mean: d.p_mean,
            p_std: d.p_std,
            steps: d.steps,
            sigma_min: d.sigma_min,
            sigma_max: d.sigma_max,
            rho: d.rho,
        }
    }

    pub fn diffusion_train_config(&self) -> DiffusionTrainConfig {
        let d = &self.diffusion;
        DiffusionTrainConfig {
            hidden: d.hidden.clone(),
            steps: d.train_steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            drop_rate: d.drop_rate,
            null_rate: d.null_rate,
            ..DiffusionTrainConfig::default()
        }
    }

    pub fn ae_config(&self) -> AeConfig {
        let a = &self.autoencoder;
        AeConfig {
            hidden: a.hidden,
            bottleneck: a.bottleneck,
            epochs: a.epochs,
            learning_rate: a.learning_rate,
            clean_error_limit: a.clean_error_limit,
            ..AeConfig::default()
        }
    }

    /// Attack settings before a cell picks its variant and modifiers.
    pub fn attack_config(&self) -> AttackConfig {
        let a = &self.attack;
        AttackConfig {
            xi: a.xi,
            gamma2: a.gamma2,
            temperature: a.temperature,
            realism: a.realism,
            realism_step_size: a.realism_step_size,
            epsilon: a.epsilon_255 / 255.0,
            iters: a.iters,
            degrees: a.degrees,
            shift: a.shift,
            ..AttackConfig::default()
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        let d = &self.detector;
        DetectorConfig {
            mad_threshold: d.mad_threshold,
            cusum_drift: d.cusum_drift,
            cusum_threshold: d.cusum_threshold,
            window: d.window,
        }
    }

    pub fn sigma_partial(&self) -> f64 {
        self.attack
            .sigma_partial
            .unwrap_or_else(|| shiftlab_core::defense::default_sigma_partial(&self.noise_params()))
    }
}
