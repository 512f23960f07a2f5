//! History-conditioned EDM denoiser over frames: preconditioning, the
//! inference noise ladder, training with condition dropping, and reverse
//! sampling with classifier-free, policy and realism guidance.

mod dataset;
pub mod gaussian;
mod sample;
mod train;

pub use dataset::{collect_samples, read_dataset, write_dataset, Sample};
pub use gaussian::{ddpm_guided_step, GaussianToyConfig};
pub use sample::{
    guided_sample, sample_conditional, sample_unconditional, sample_with, PolicyGuidance,
    SampleOptions, SampleTrace, DEFAULT_GUIDANCE_TEMPERATURE,
};
pub use train::{train_denoiser, train_step, DiffusionTrainConfig, StepStats};

use std::path::Path;

use ndarray::Array2;
use nnkit::{Activation, Architecture, Metadata, Mlp};
use rand::Rng;

use crate::env::{Action, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::frame::Frame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
    /// Number of reverse steps T.
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            sigma_data: 0.5,
            p_mean: -0.4,
            p_std: 1.2,
            steps: 5,
            sigma_min: 0.02,
            sigma_max: 5.0,
            rho: 7.0,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0)
            || self.steps == 0
            || !(self.sigma_min > 0.0)
            || !(self.sigma_min < self.sigma_max)
            || !(self.p_std > 0.0)
            || !(self.rho > 0.0)
        {
            return Err(Error::Config(format!("invalid noise parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioners {
    pub c_in: f64,
    pub c_out: f64,
    pub c_noise: f64,
    pub c_skip: f64,
}

pub fn preconditioners(sigma: f64, np: &NoiseParams) -> Result<Preconditioners> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!(
            "noise level must be positive, got {sigma}"
        )));
    }
    let sd2 = np.sigma_data * np.sigma_data;
    let s2 = sigma * sigma;
    let root = (s2 + sd2).sqrt();
    Ok(Preconditioners {
        c_in: 1.0 / root,
        c_out: sigma * np.sigma_data / root,
        c_noise: 0.25 * sigma.ln(),
        c_skip: sd2 / (sd2 + s2),
    })
}

/// `T + 1` noise levels from σ_max down to σ_min, power-interpolated with
/// exponent ρ, followed by a terminal 0.
pub fn sigma_schedule(np: &NoiseParams) -> Vec<f64> {
    let t = np.steps;
    let (lo, hi) = (
        np.sigma_min.powf(1.0 / np.rho),
        np.sigma_max.powf(1.0 / np.rho),
    );
    let mut out: Vec<f64> = if t == 1 {
        vec![np.sigma_max]
    } else {
        (0..t)
            .map(|j| (hi + j as f64 / (t - 1) as f64 * (lo - hi)).powf(np.rho))
            .collect()
    };
    out[0] = np.sigma_max;
    if t > 1 {
        out[t - 1] = np.sigma_min;
    }
    out.push(0.0);
    out
}

/// Classifier-free mixing weight Γ1(i) = max((T − i)/T, 0.3) for reverse
/// step `i` (counting down from T to 1).
pub fn cf_scale(i: usize, t: usize) -> f64 {
    (t.saturating_sub(i) as f64 / t as f64).max(0.3)
}

/// The last `k` frames and the actions taken after each of them. Only the
/// final action may be missing (`None`, the Null symbol).
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    frames: Vec<Frame>,
    actions: Vec<Option<Action>>,
}

impl HistoryWindow {
    pub fn new(frames: Vec<Frame>, actions: Vec<Option<Action>>) -> Result<Self> {
        if frames.is_empty() || frames.len() != actions.len() {
            return Err(Error::Domain(format!(
                "history needs matching non-empty frames/actions, got {}/{}",
                frames.len(),
                actions.len()
            )));
        }
        if actions[..actions.len() - 1].iter().any(Option::is_none) {
            return Err(Error::Domain(
                "Null action is only allowed in the last slot".into(),
            ));
        }
        let size = frames[0].size();
        if frames.iter().any(|f| f.size() != size) {
            return Err(Error::Domain("history frames differ in size".into()));
        }
        Ok(Self { frames, actions })
    }

    pub fn k(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn actions(&self) -> &[Option<Action>] {
        &self.actions
    }

    pub fn last_frame(&self) -> &Frame {
        self.frames.last().expect("non-empty")
    }

    /// Same window with the last action replaced by Null.
    pub fn with_null_last(&self) -> Self {
        let mut w = self.clone();
        *w.actions.last_mut().expect("non-empty") = None;
        w
    }

    /// Slides the window: drops the oldest entry and appends `(frame, action)`.
    pub fn push(&mut self, frame: Frame, action: Action) {
        self.frames.remove(0);
        self.actions.remove(0);
        self.frames.push(frame);
        self.actions.push(Some(action));
    }
}

/// Rolling buffer that becomes a [`HistoryWindow`] once `k` entries exist.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    k: usize,
    frames: Vec<Frame>,
    actions: Vec<Action>,
}

impl HistoryBuffer {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            frames: Vec::with_capacity(k + 1),
            actions: Vec::with_capacity(k + 1),
        }
    }

    pub fn push(&mut self, frame: Frame, action: Action) {
        self.frames.push(frame);
        self.actions.push(action);
        if self.frames.len() > self.k {
            self.frames.remove(0);
            self.actions.remove(0);
        }
    }

    pub fn is_warm(&self) -> bool {
        self.frames.len() == self.k
    }

    pub fn window(&self) -> Result<HistoryWindow> {
        if !self.is_warm() {
            return Err(Error::Warmup(format!(
                "{} of {} history entries",
                self.frames.len(),
                self.k
            )));
        }
        HistoryWindow::new(
            self.frames.clone(),
            self.actions.iter().map(|&a| Some(a)).collect(),
        )
    }
}

/// Action vocabulary of the conditioning input: the environment actions and Null.
const ACTION_SLOTS: usize = NUM_ACTIONS + 1;
const NOISE_FREQS: usize = 4;

/// F = h + g·c_in·x from the raw network output `[h, g]`. The scalar gate g
/// lets F cancel or keep the skip path per noise level.
pub(crate) fn gated_residual(raw: &[f64], noisy: &[f64], pre: &Preconditioners) -> Vec<f64> {
    let (h, g) = raw.split_at(noisy.len());
    let g = g[0];
    h.iter()
        .zip(noisy)
        .map(|(h, x)| h + g * pre.c_in * x)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    net: Mlp,
    frame_size: usize,
    history: usize,
}

impl DenoiserModel {
    pub fn input_dim(frame_size: usize, history: usize) -> usize {
        let p = frame_size * frame_size;
        p * (1 + history) + ACTION_SLOTS * history + 1 + 1 + 2 * NOISE_FREQS
    }

    pub fn new<R: Rng + ?Sized>(
        frame_size: usize,
        history: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut arch = Architecture::new(Self::input_dim(frame_size, history));
        for &w in hidden {
            arch = arch.layer(w, Activation::Silu);
        }
        // One output per pixel plus the skip gate.
        arch = arch.layer(frame_size * frame_size + 1, Activation::Identity);
        let mut net = Mlp::new(arch, rng);
        // Condition inputs start disconnected; they only grow weights from
        // conditioned training items.
        let p = frame_size * frame_size;
        let cond_rows = p..p * (1 + history) + ACTION_SLOTS * history + 1;
        net.layers_mut()[0]
            .weight
            .slice_mut(ndarray::s![cond_rows, ..])
            .fill(0.0);
        Self {
            net,
            frame_size,
            history,
        }
    }

    pub fn from_parts(net: Mlp, frame_size: usize, history: usize) -> Result<Self> {
        if net.input_dim() != Self::input_dim(frame_size, history)
            || net.output_dim() != frame_size * frame_size + 1
        {
            return Err(Error::Nn(nnkit::NnError::Shape {
                expected: format!(
                    "{}→{}",
                    Self::input_dim(frame_size, history),
                    frame_size * frame_size + 1
                ),
                got: format!("{}→{}", net.input_dim(), net.output_dim()),
            }));
        }
        Ok(Self {
            net,
            frame_size,
            history,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn history(&self) -> usize {
        self.history
    }

    fn pixels(&self) -> usize {
        self.frame_size * self.frame_size
    }

    /// Writes one network input row: scaled iterate, condition block,
    /// condition flag and noise-level features.
    pub(crate) fn encode_into(
        &self,
        out: &mut [f64],
        noisy: &[f64],
        pre: &Preconditioners,
        cond: Option<&HistoryWindow>,
    ) -> Result<()> {
        let p = self.pixels();
        if noisy.len() != p {
            return Err(Error::Nn(nnkit::NnError::Shape {
                expected: p.to_string(),
                got: noisy.len().to_string(),
            }));
        }
        out.fill(0.0);
        for (o, x) in out[..p].iter_mut().zip(noisy) {
            *o = pre.c_in * x;
        }
        let k = self.history;
        let act_base = p * (1 + k);
        let flag = act_base + ACTION_SLOTS * k;
        if let Some(h) = cond {
            if h.k() != k || h.last_frame().size() != self.frame_size {
                return Err(Error::Domain(format!(
                    "history of length {} and size {} does not match model ({k}, {})",
                    h.k(),
                    h.last_frame().size(),
                    self.frame_size
                )));
            }
            for (j, f) in h.frames().iter().enumerate() {
                for (o, v) in out[p * (1 + j)..p * (2 + j)].iter_mut().zip(f.pixels()) {
                    *o = *v;
                }
            }
            for (j, a) in h.actions().iter().enumerate() {
                let slot = a.map_or(NUM_ACTIONS, Action::index);
                out[act_base + ACTION_SLOTS * j + slot] = 1.0;
            }
            out[flag] = 1.0;
        }
        let c = pre.c_noise;
        out[flag + 1] = c;
        for f in 0..NOISE_FREQS {
            let w = (f + 1) as f64;
            out[flag + 2 + 2 * f] = (w * c).sin();
            out[flag + 3 + 2 * f] = (w * c).cos();
        }
        Ok(())
    }

    /// D(x; σ, cond) = c_skip·x + c_out·F(c_in·x, c_noise, cond) for several
    /// conditions at once (one output row per entry of `conds`).
    pub fn denoise_many(
        &self,
        noisy: &[f64],
        sigma: f64,
        conds: &[Option<&HistoryWindow>],
        np: &NoiseParams,
    ) -> Result<Vec<Vec<f64>>> {
        let pre = preconditioners(sigma, np)?;
        let dim = self.net.input_dim();
        let mut input = Array2::zeros((conds.len(), dim));
        for (mut row, c) in input.rows_mut().into_iter().zip(conds) {
            self.encode_into(row.as_slice_mut().expect("contiguous"), noisy, &pre, *c)?;
        }
        let raw = self.net.forward(input.view())?;
        let mut out = Vec::with_capacity(conds.len());
        for r in raw.rows() {
            let f = gated_residual(r.as_slice().expect("contiguous"), noisy, &pre);
            let d: Vec<f64> = noisy
                .iter()
                .zip(&f)
                .map(|(x, f)| pre.c_skip * x + pre.c_out * f)
                .collect();
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerics("denoiser output".into()));
            }
            out.push(d);
        }
        Ok(out)
    }

    /// F(c_in·x, c_noise, cond).
    pub fn residual(
        &self,
        noisy: &[f64],
        sigma: f64,
        cond: Option<&HistoryWindow>,
        np: &NoiseParams,
    ) -> Result<Vec<f64>> {
        let pre = preconditioners(sigma, np)?;
        let mut input = Array2::zeros((1, self.net.input_dim()));
        self.encode_into(
            input.row_mut(0).as_slice_mut().expect("contiguous"),
            noisy,
            &pre,
            cond,
        )?;
        let raw = self.net.forward(input.view())?;
        Ok(gated_residual(
            raw.row(0).as_slice().expect("contiguous"),
            noisy,
            &pre,
        ))
    }

    pub fn denoise(
        &self,
        noisy: &[f64],
        sigma: f64,
        cond: Option<&HistoryWindow>,
        np: &NoiseParams,
    ) -> Result<Vec<f64>> {
        Ok(self
            .denoise_many(noisy, sigma, &[cond], np)?
            .pop()
            .expect("one row"))
    }

    pub fn save(&self, path: impl AsRef<Path>, mut metadata: Metadata) -> Result<()> {
        metadata.insert("kind".into(), "denoiser".into());
        metadata.insert("frame_size".into(), self.frame_size.to_string());
        metadata.insert("history".into(), self.history.to_string());
        Ok(nnkit::save_model(&self.net, path, &metadata)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Metadata)> {
        let (net, meta) = nnkit::load_model(path)?;
        if meta.get("kind").map(String::as_str) != Some("denoiser") {
            return Err(Error::Format("checkpoint is not a denoiser".into()));
        }
        let get = |k: &str| {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("missing {k}")))
        };
        let (size, history) = (get("frame_size")?, get("history")?);
        Ok((Self::from_parts(net, size, history)?, meta))
    }
}

/// Frame-level convenience wrapper around [`DenoiserModel::denoise`].
pub fn denoise(
    m: &DenoiserModel,
    noisy: &Frame,
    sigma: f64,
    cond: Option<&HistoryWindow>,
    np: &NoiseParams,
) -> Result<Vec<f64>> {
    m.denoise(noisy.pixels(), sigma, cond, np)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    #[allow(clippy::approx_constant)]
    fn preconditioners_at_sigma_data() {
        let p = preconditioners(0.5, &NoiseParams::default()).unwrap();
        assert!((p.c_in - 1.41421).abs() < 1e-5);
        assert!((p.c_out - 0.35355).abs() < 1e-5);
        assert_eq!(p.c_skip, 0.5);
        assert!((p.c_noise + 0.17329).abs() < 1e-5);
        assert!(preconditioners(0.0, &NoiseParams::default()).is_err());
        let tiny = preconditioners(1e-8, &NoiseParams::default()).unwrap();
        assert!((tiny.c_skip - 1.0).abs() < 1e-12 && tiny.c_out < 1e-7);
    }

    #[test]
    fn schedule_shape() {
        let np = NoiseParams::default();
        let s = sigma_schedule(&np);
        assert_eq!(s.len(), 6);
        assert_eq!(s[0], 5.0);
        assert!((s[4] - 0.02).abs() < 1e-12);
        assert_eq!(s[5], 0.0);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(
            sigma_schedule(&NoiseParams { steps: 1, ..np }),
            vec![5.0, 0.0]
        );
    }

    #[test]
    fn cf_scale_values() {
        assert_eq!(cf_scale(5, 5), 0.3);
        assert_eq!(cf_scale(1, 5), 0.8);
        assert_eq!(cf_scale(0, 5), 1.0);
        assert_eq!(cf_scale(4, 5), 0.3);
    }

    #[test]
    fn null_only_last() {
        let f = Frame::zeros(4);
        assert!(
            HistoryWindow::new(vec![f.clone(), f.clone()], vec![None, Some(Action::Up)]).is_err()
        );
        let w = HistoryWindow::new(
            vec![f.clone(), f.clone()],
            vec![Some(Action::Up), Some(Action::Down)],
        )
        .unwrap();
        assert_eq!(w.with_null_last().actions(), &[Some(Action::Up), None]);
    }

    #[test]
    fn zero_network_returns_skip_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = DenoiserModel::new(4, 2, &[8], &mut rng);
        for l in m.net_mut().layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let np = NoiseParams::default();
        let x: Vec<f64> = (0..16).map(|i| i as f64 / 10.0).collect();
        let d = m.denoise(&x, 0.7, None, &np).unwrap();
        let c = preconditioners(0.7, &np).unwrap().c_skip;
        for (a, b) in d.iter().zip(&x) {
            assert!((a - c * b).abs() < 1e-15);
        }
    }
}
