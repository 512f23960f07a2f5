use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    minbest_attack, pgd_attack, rotate_attack, shift_step, transform_attack, AttackConfig,
    AttackState, ShiftModels, Variant,
};
use crate::defense::purify;
use crate::diffusion::{DenoiserModel, HistoryBuffer, NoiseParams};
use crate::env::{render, reset, step, EnvConfig};
use crate::error::{Error, Result};
use crate::metrics::{slot, ssim, wasserstein1, Projector, StepRecord, TrajectoryLog};
use crate::realism::AeModel;
use crate::victim::QModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Defense {
    None,
    /// Diffusion purification at the given partial noise level.
    Purifier {
        sigma_partial: f64,
    },
}

impl Defense {
    pub fn name(&self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Purifier { .. } => "purifier",
        }
    }
}

/// Everything an episode may need; SHIFT and the purifier require the
/// denoiser, the recon metric requires the autoencoder and the definition
/// metrics require the projector.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeModels<'a> {
    pub q: &'a QModel,
    pub denoiser: Option<&'a DenoiserModel>,
    pub ae: Option<&'a AeModel>,
    pub projector: Option<&'a Projector>,
    pub np: NoiseParams,
    /// History length k (warm-up and conditioning window).
    pub history: usize,
}

fn mix(a: u64, b: u64) -> u64 {
    a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(29) ^ 0xD1B5_4A32_D192_ED03
}

/// Runs one episode of the victim under `attack` (and `defense`) and logs
/// every step. `observed` in each record is the attacker's output; the
/// victim acts on its purified version when a purifier is deployed.
pub fn run_episode(
    env: &EnvConfig,
    models: &EpisodeModels,
    attack: &AttackConfig,
    defense: &Defense,
    episode_seed: u64,
) -> Result<TrajectoryLog> {
    attack.validate()?;
    let needs_denoiser = attack.variant.is_shift() || matches!(defense, Defense::Purifier { .. });
    if needs_denoiser && models.denoiser.is_none() {
        return Err(Error::Config(format!(
            "{} / {} needs a denoiser",
            attack.variant.name(),
            defense.name()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(attack.seed, episode_seed));
    let k = models.history;
    let mut st = AttackState::new(k);
    let mut victim_history = HistoryBuffer::new(k);
    let mut s = reset(env)?;
    let mut log = TrajectoryLog::new();
    let mut prev: Option<(crate::Frame, crate::Frame)> = None;
    let mut prev_projection = None;
    for t in 0..env.episode_horizon {
        let truth = render(env, &s);
        let sample_seed: u64 = rng.random();
        let purify_seed: u64 = rng.random();
        let omega = models.q.importance_weight(&truth)?;
        let (observed, attacked) = match attack.variant {
            Variant::ShiftO | Variant::ShiftI => {
                let sm = ShiftModels {
                    denoiser: models.denoiser.expect("checked"),
                    q: models.q,
                    ae: models.ae,
                    np: models.np,
                };
                shift_step(&mut st, env, &s, attack, &sm, t, sample_seed)?
            }
            Variant::None => {
                st.importance_history.push(omega);
                (truth.clone(), false)
            }
            v => {
                if st.should_attack(omega, t, attack.xi) {
                    let f = match v {
                        Variant::Pgd => pgd_attack(models.q, &truth, attack.epsilon, attack.iters)?,
                        Variant::MinBest => {
                            minbest_attack(models.q, &truth, attack.epsilon, attack.iters)?
                        }
                        Variant::Rotate => rotate_attack(&truth, attack.degrees)?,
                        Variant::Transform => {
                            transform_attack(&truth, attack.shift.0, attack.shift.1)?
                        }
                        _ => unreachable!(),
                    };
                    (f, true)
                } else {
                    (truth.clone(), false)
                }
            }
        };
        let victim_input = match (defense, models.denoiser) {
            (Defense::Purifier { sigma_partial }, Some(m)) if victim_history.is_warm() => purify(
                m,
                &observed,
                &victim_history.window()?,
                *sigma_partial,
                &models.np,
                purify_seed,
            )?,
            _ => observed.clone(),
        };
        let action = models.q.greedy_action(&victim_input)?;
        let clean_action = models.q.greedy_action(&truth)?;
        let out = step(env, &s, action)?;

        let mut m = BTreeMap::new();
        m.insert(slot::OMEGA.into(), omega);
        m.insert(
            slot::DEVIATED.into(),
            f64::from(u8::from(action != clean_action)),
        );
        m.insert(slot::L2_TRUE.into(), observed.l2_distance(&truth));
        m.insert(slot::SSIM.into(), ssim(&observed, &truth)?);
        if let Some(ae) = models.ae {
            m.insert(slot::RECON.into(), ae.reconstruction_error(&observed)?);
        }
        if let Some((prev_obs, prev_true)) = &prev {
            if let Ok(w) = wasserstein1(&observed, prev_obs) {
                m.insert(slot::W1_PREV_OBSERVED.into(), w);
            }
            if let Ok(w) = wasserstein1(&observed, prev_true) {
                m.insert(slot::W1_PREV_TRUE.into(), w);
            }
        }
        if let Some(p) = models.projector {
            let canonical = s.canonical(env);
            let (dist, projection) = p.realism_distance(&observed)?;
            m.insert(slot::REALISM.into(), dist);
            m.insert(
                slot::SEMANTIC.into(),
                f64::from(u8::from(p.is_semantics_changing(&observed, &canonical)?)),
            );
            if let Some(pp) = &prev_projection {
                m.insert(
                    slot::ALIGNED.into(),
                    f64::from(u8::from(p.is_history_aligned(&observed, pp)?)),
                );
            }
            prev_projection = Some(projection);
        }
        log.push(StepRecord {
            t,
            true_state: s.clone(),
            observed: observed.clone(),
            action,
            reward: out.reward,
            attacked,
            metrics: m,
        });

        st.record(truth.clone(), observed.clone(), action);
        victim_history.push(observed.clone(), action);
        prev = Some((observed, truth));
        s = out.state;
        if out.done {
            break;
        }
    }
    Ok(log)
}
