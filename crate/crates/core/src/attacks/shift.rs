use super::{AttackConfig, AttackState, Variant};
use crate::diffusion::{
    sample_conditional, sample_with, DenoiserModel, HistoryWindow, NoiseParams, PolicyGuidance,
    SampleOptions,
};
use crate::env::{render, Action, EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::realism::AeModel;
use crate::victim::QModel;

#[derive(Debug, Clone, Copy)]
pub struct ShiftModels<'a> {
    pub denoiser: &'a DenoiserModel,
    pub q: &'a QModel,
    pub ae: Option<&'a AeModel>,
    pub np: NoiseParams,
}

/// One SHIFT observation for step `t`: decides whether to attack from the
/// true-state importance weight, then returns `(observed, attacked)`.
///
/// SHIFT-O conditions on the true history and passes clean frames through
/// when not attacking. SHIFT-I conditions on the frames it has shown so far;
/// attacks drop the last action, non-attacks sample without policy guidance.
/// During the first k steps both variants pass the clean frame through.
pub fn shift_step(
    st: &mut AttackState,
    env: &EnvConfig,
    true_state: &EnvState,
    cfg: &AttackConfig,
    models: &ShiftModels,
    t: usize,
    seed: u64,
) -> Result<(Frame, bool)> {
    let truth = render(env, true_state);
    let q_true = models.q.q_values(&truth)?;
    st.q_floor = q_true.iter().copied().fold(st.q_floor, f64::min);
    let omega = models.q.importance_weight(&truth)?;
    let attack = st.should_attack(omega, t, cfg.xi);
    let guidance = PolicyGuidance {
        q: models.q,
        true_frame: &truth,
        gamma2: cfg.gamma2,
        temperature: cfg.temperature,
        q_floor: st.q_floor,
    };
    let opts = SampleOptions {
        guidance: Some(guidance),
        realism: if cfg.realism { models.ae } else { None },
        realism_step_size: cfg.realism_step_size,
        cf_override: None,
    };
    let guided = |cond: &HistoryWindow| {
        sample_with(models.denoiser, Some(cond), &models.np, seed, &opts).map(|t| t.frame)
    };
    let observed = match cfg.variant {
        Variant::ShiftO => {
            if attack {
                let cond = st.true_history.window()?;
                guided(&cond)?
            } else {
                truth
            }
        }
        Variant::ShiftI => {
            if !st.imagined_history.is_warm() {
                if attack {
                    return Err(Error::Warmup("imagined history".into()));
                }
                truth
            } else {
                let cond = st.imagined_history.window()?;
                if attack {
                    guided(&cond.with_null_last())?
                } else {
                    sample_conditional(models.denoiser, &cond, &models.np, seed)?
                }
            }
        }
        other => {
            return Err(Error::Config(format!(
                "{} is not a SHIFT variant",
                other.name()
            )))
        }
    };
    Ok((observed, attack))
}

impl AttackState {
    /// Slides both histories after the victim acted.
    pub fn record(&mut self, true_frame: Frame, observed: Frame, action: Action) {
        self.true_history.push(true_frame, action);
        self.imagined_history.push(observed, action);
    }
}
