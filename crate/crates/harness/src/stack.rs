//! Training and loading of the three models an evaluation needs.

use std::fs;
use std::path::{Path, PathBuf};

use nnkit::Metadata;
use shiftlab_core::diffusion::{collect_samples, train_denoiser, DenoiserModel, NoiseParams};
use shiftlab_core::env::{value_iteration, EnvConfig, StateSpace};
use shiftlab_core::metrics::{Projector, StealthThresholds};
use shiftlab_core::realism::{train_autoencoder, AeModel};
use shiftlab_core::victim::{train_dqn, CurvePoint, QModel};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const VICTIM_FILE: &str = "victim.ckpt";
pub const DENOISER_FILE: &str = "denoiser.ckpt";
pub const AE_FILE: &str = "autoencoder.ckpt";

pub struct Stack {
    pub env: EnvConfig,
    pub q: QModel,
    pub denoiser: DenoiserModel,
    pub ae: AeModel,
    pub projector: Projector,
    pub thresholds: StealthThresholds,
    pub np: NoiseParams,
    pub history: usize,
}

fn metadata(cfg: &ExperimentConfig, seed: u64) -> Metadata {
    let mut m = Metadata::new();
    m.insert("config_hash".into(), cfg.hash());
    m.insert("seed".into(), seed.to_string());
    m
}

pub fn train_victim(cfg: &ExperimentConfig) -> Result<(QModel, Vec<CurvePoint>)> {
    Ok(train_dqn(
        &cfg.env_config()?,
        &cfg.dqn_config(),
        cfg.victim.seed,
    )?)
}

pub fn train_diffusion(cfg: &ExperimentConfig) -> Result<(DenoiserModel, Vec<f64>)> {
    let env = cfg.env_config()?;
    let d = &cfg.diffusion;
    let reference = value_iteration(&env)?;
    let data = collect_samples(
        &env,
        &reference,
        d.data_episodes,
        d.data_epsilon,
        d.history,
        d.data_seed,
    )?;
    Ok(train_denoiser(
        &data,
        &cfg.noise_params(),
        &cfg.diffusion_train_config(),
        d.seed,
    )?)
}

/// Trains on every valid render and checks held-out error on frames from
/// fresh ε-greedy episodes.
pub fn train_ae(cfg: &ExperimentConfig) -> Result<(AeModel, Vec<f64>)> {
    let env = cfg.env_config()?;
    let d = &cfg.diffusion;
    let frames = StateSpace::enumerate(&env)?.renders();
    let reference = value_iteration(&env)?;
    let held: Vec<_> = collect_samples(
        &env,
        &reference,
        5,
        d.data_epsilon,
        d.history,
        d.data_seed.wrapping_add(1),
    )?
    .into_iter()
    .map(|s| s.target)
    .collect();
    Ok(train_autoencoder(
        &frames,
        &held,
        &cfg.ae_config(),
        cfg.autoencoder.seed,
    )?)
}

fn write_curve(
    path: &Path,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains the victim and writes its checkpoint plus training curve into `out`.
pub fn cmd_train_victim(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let (q, curve) = train_victim(cfg)?;
    let path = out.join(VICTIM_FILE);
    q.save(&path, metadata(cfg, cfg.victim.seed))?;
    write_curve(
        &out.join("victim_curve.csv"),
        &["step", "loss", "eval_return"],
        curve.iter().map(|p| {
            vec![
                p.step.to_string(),
                p.loss.to_string(),
                p.eval_return.to_string(),
            ]
        }),
    )?;
    Ok(path)
}

pub fn cmd_train_diffusion(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let (m, curve) = train_diffusion(cfg)?;
    let path = out.join(DENOISER_FILE);
    m.save(&path, metadata(cfg, cfg.diffusion.seed))?;
    let every = cfg.diffusion_train_config().log_every;
    write_curve(
        &out.join("diffusion_curve.csv"),
        &["step", "loss"],
        curve
            .iter()
            .enumerate()
            .map(|(i, l)| vec![((i + 1) * every).to_string(), l.to_string()]),
    )?;
    Ok(path)
}

pub fn cmd_train_ae(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let (ae, curve) = train_ae(cfg)?;
    let path = out.join(AE_FILE);
    ae.save(&path, metadata(cfg, cfg.autoencoder.seed))?;
    write_curve(
        &out.join("autoencoder_curve.csv"),
        &["epoch", "loss"],
        curve
            .iter()
            .enumerate()
            .map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]),
    )?;
    Ok(path)
}

impl Stack {
    pub fn assemble(
        cfg: &ExperimentConfig,
        q: QModel,
        denoiser: DenoiserModel,
        ae: AeModel,
    ) -> Result<Self> {
        let env = cfg.env_config()?;
        let projector = Projector::new(StateSpace::enumerate(&env)?);
        let thresholds = match (cfg.thresholds.delta1, cfg.thresholds.delta2) {
            (Some(d1), Some(d2)) => StealthThresholds::new(d1, d2)?,
            (d1, d2) => {
                let derived = StealthThresholds::from_clean(&projector, cfg.diffusion.history)?;
                StealthThresholds::new(d1.unwrap_or(derived.delta1), d2.unwrap_or(derived.delta2))?
            }
        };
        Ok(Self {
            env,
            q,
            denoiser,
            ae,
            projector,
            thresholds,
            np: cfg.noise_params(),
            history: cfg.diffusion.history,
        })
    }

    /// Trains all three models in memory.
    pub fn train(cfg: &ExperimentConfig) -> Result<Self> {
        let q = train_victim(cfg)?.0;
        let d = train_diffusion(cfg)?.0;
        let ae = train_ae(cfg)?.0;
        Self::assemble(cfg, q, d, ae)
    }

    /// Loads the checkpoints written by the training commands.
    pub fn load(cfg: &ExperimentConfig, dir: &Path) -> Result<Self> {
        let need = |name: &str| -> Result<PathBuf> {
            let p = dir.join(name);
            if p.is_file() {
                Ok(p)
            } else {
                Err(HarnessError::Config(format!(
                    "missing checkpoint {}; run the training commands first",
                    p.display()
                )))
            }
        };
        let q = QModel::load(need(VICTIM_FILE)?)?.0;
        let d = DenoiserModel::load(need(DENOISER_FILE)?)?.0;
        let ae = AeModel::load(need(AE_FILE)?)?.0;
        if d.history() != cfg.diffusion.history {
            return Err(HarnessError::Config(format!(
                "denoiser was trained with k = {}, config asks for {}",
                d.history(),
                cfg.diffusion.history
            )));
        }
        Self::assemble(cfg, q, d, ae)
    }
}
