//! Reverse sampling on the inference ladder.
//!
//! At reverse step `i` (T down to 1) the iterate at noise level σ is
//! optionally pushed by the policy-guidance gradient and replaced by the
//! classifier-free mixture Γ1(i)·D(x|τ) + (1 − Γ1(i))·D(x), which becomes
//! the iterate for the next level. A realism step follows when i ≠ 1.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{cf_scale, sigma_schedule, DenoiserModel, HistoryWindow, NoiseParams};
use crate::env::NUM_ACTIONS;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::realism::AeModel;
use crate::victim::QModel;

/// Steers samples toward frames on which the victim prefers actions that
/// are poor in the true state.
///
/// The victim's choice on the proposed clean output ŝ is relaxed to
/// `p = softmax(Q(ŝ)/temperature)`; the objective is
/// `log Σ_a p_a·Q̃(s, a)` with `Q̃ = softplus(Q(s, ·) − floor + 1)` and its
/// gradient w.r.t. ŝ is applied to the current iterate.
#[derive(Debug, Clone, Copy)]
pub struct PolicyGuidance<'a> {
    pub q: &'a QModel,
    pub true_frame: &'a Frame,
    pub gamma2: f64,
    pub temperature: f64,
    /// Running minimum of true-state Q-values seen so far by the caller.
    pub q_floor: f64,
}

pub const DEFAULT_GUIDANCE_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions<'a> {
    pub guidance: Option<PolicyGuidance<'a>>,
    pub realism: Option<&'a AeModel>,
    pub realism_step_size: f64,
    /// Replaces Γ1(i) at every step when set.
    pub cf_override: Option<f64>,
}

impl Default for SampleOptions<'_> {
    fn default() -> Self {
        Self {
            guidance: None,
            realism: None,
            realism_step_size: crate::realism::DEFAULT_REALISM_STEP,
            cf_override: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub frame: Frame,
    /// Updated positivity floor (min of the input floor and the true-state values).
    pub q_floor: f64,
    /// L2 norm of each applied policy-guidance update.
    pub guidance_norms: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Runs the remaining conditional-only ladder from `x` at rung `from`.
fn propose(
    m: &DenoiserModel,
    x: &[f64],
    sigmas: &[f64],
    from: usize,
    cond: Option<&HistoryWindow>,
    np: &NoiseParams,
) -> Result<Vec<f64>> {
    let mut y = x.to_vec();
    for &sigma in &sigmas[from..sigmas.len() - 1] {
        y = m.denoise(&y, sigma, cond, np)?;
    }
    Ok(y)
}

/// Gradient of the relaxed log-value objective w.r.t. the proposal.
fn policy_gradient(g: &PolicyGuidance, proposal: &[f64], floor: f64) -> Result<Vec<f64>> {
    if !(g.temperature > 0.0) {
        return Err(Error::Domain(format!(
            "guidance temperature must be positive, got {}",
            g.temperature
        )));
    }
    let q_true = g.q.q_values(g.true_frame)?;
    let shifted: Vec<f64> = q_true.iter().map(|v| softplus(v - floor + 1.0)).collect();
    let clamped: Vec<f64> = proposal.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let q_obs =
        g.q.q_values(&Frame::from_pixels(g.q.frame_size(), clamped.clone()))?;
    let top = q_obs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q_obs
        .iter()
        .map(|v| ((v - top) / g.temperature).exp())
        .collect();
    let z: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|v| v / z).collect();
    let j: f64 = p.iter().zip(&shifted).map(|(a, b)| a * b).sum();
    let mut w = [0.0; NUM_ACTIONS];
    for b in 0..NUM_ACTIONS {
        w[b] = p[b] * (shifted[b] - j) / (g.temperature * j);
    }
    let (_, grad) = g.q.input_gradient(&clamped, &w)?;
    Ok(grad)
}

/// General sampler. `cond = None` samples unconditionally.
pub fn sample_with(
    m: &DenoiserModel,
    cond: Option<&HistoryWindow>,
    np: &NoiseParams,
    seed: u64,
    opts: &SampleOptions,
) -> Result<SampleTrace> {
    np.validate()?;
    let sigmas = sigma_schedule(np);
    let t = np.steps;
    let p = m.frame_size() * m.frame_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..p)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigmas[0] * z
        })
        .collect();
    let mut floor = f64::INFINITY;
    if let Some(g) = &opts.guidance {
        if g.gamma2 < 0.0 {
            return Err(Error::Domain(format!(
                "Γ2 must be nonnegative, got {}",
                g.gamma2
            )));
        }
        let q_true = g.q.q_values(g.true_frame)?;
        floor = q_true.iter().copied().fold(g.q_floor, f64::min);
    }
    let mut norms = Vec::new();
    for j in 0..t {
        let i = t - j;
        let sigma = sigmas[j];
        if let Some(g) = opts.guidance.as_ref().filter(|g| g.gamma2 > 0.0) {
            let proposal = propose(m, &x, &sigmas, j, cond, np)?;
            let grad = policy_gradient(g, &proposal, floor)?;
            let mut sq = 0.0;
            for (xi, gi) in x.iter_mut().zip(&grad) {
                *xi -= g.gamma2 * gi;
                sq += (g.gamma2 * gi).powi(2);
            }
            norms.push(sq.sqrt());
        }
        x = match cond {
            Some(c) => {
                let w = opts.cf_override.unwrap_or_else(|| cf_scale(i, t));
                let dc = m.denoise(&x, sigma, Some(c), np)?;
                let du = m.denoise(&x, sigma, None, np)?;
                dc.iter()
                    .zip(&du)
                    .map(|(a, b)| w * a + (1.0 - w) * b)
                    .collect()
            }
            None => m.denoise(&x, sigma, None, np)?,
        };
        if let Some(ae) = opts.realism {
            if i != 1 {
                ae.realism_step_raw(&mut x, opts.realism_step_size)?;
            }
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("sampler iterate".into()));
    }
    Ok(SampleTrace {
        frame: Frame::from_pixels(m.frame_size(), x),
        q_floor: floor,
        guidance_norms: norms,
    })
}

/// Classifier-free mixed sampling conditioned on `cond`.
pub fn sample_conditional(
    m: &DenoiserModel,
    cond: &HistoryWindow,
    np: &NoiseParams,
    seed: u64,
) -> Result<Frame> {
    Ok(sample_with(m, Some(cond), np, seed, &SampleOptions::default())?.frame)
}

pub fn sample_unconditional(m: &DenoiserModel, np: &NoiseParams, seed: u64) -> Result<Frame> {
    Ok(sample_with(m, None, np, seed, &SampleOptions::default())?.frame)
}

/// Sampling with policy guidance and, when `ae` is given, realism steps.
pub fn guided_sample(
    m: &DenoiserModel,
    cond: &HistoryWindow,
    guidance: PolicyGuidance,
    ae: Option<&AeModel>,
    np: &NoiseParams,
    seed: u64,
) -> Result<SampleTrace> {
    let opts = SampleOptions {
        guidance: Some(guidance),
        realism: ae,
        ..SampleOptions::default()
    };
    sample_with(m, Some(cond), np, seed, &opts)
}
