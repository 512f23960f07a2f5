//! DQN victim: a single-frame Q-network trained on MiniFreeway, plus the
//! greedy policy and the state-importance weight derived from it.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use nnkit::{Activation, Adam, AdamConfig, Architecture, Metadata, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{
    argmax, step, value_iteration, Action, EnvConfig, EnvState, StateSpace, NUM_ACTIONS,
};
use crate::error::{Error, Result};
use crate::frame::Frame;

#[derive(Debug, Clone, PartialEq)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub target_sync: usize,
    pub train_steps: usize,
    pub learning_starts: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `train_steps` over which ε decays linearly.
    pub epsilon_decay: f64,
    pub huber_delta: f64,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Required greedy return as a fraction of the value-iteration optimum;
    /// `None` skips the check and returns the final network.
    pub return_threshold: Option<f64>,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            learning_rate: 5e-4,
            batch_size: 64,
            replay_capacity: 20_000,
            target_sync: 250,
            train_steps: 12_000,
            learning_starts: 500,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.4,
            huber_delta: 1.0,
            grad_clip: 10.0,
            eval_every: 500,
            eval_episodes: 10,
            return_threshold: Some(0.9),
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be non-empty and positive");
        }
        if !(self.learning_rate > 0.0)
            || self.batch_size == 0
            || self.replay_capacity < self.batch_size
        {
            return bad("learning rate, batch size and replay capacity must be positive with capacity ≥ batch");
        }
        if self.target_sync == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("target_sync, eval_every and eval_episodes must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("exploration rates must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub eval_return: f64,
}

/// Q-network over single frames.
#[derive(Debug, Clone, PartialEq)]
pub struct QModel {
    net: Mlp,
    frame_size: usize,
}

fn row(frame: &Frame) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, frame.len()), frame.pixels()).expect("frame is contiguous")
}

impl QModel {
    pub fn new(net: Mlp, frame_size: usize) -> Result<Self> {
        if net.input_dim() != frame_size * frame_size || net.output_dim() != NUM_ACTIONS {
            return Err(Error::Nn(nnkit::NnError::Shape {
                expected: format!("{}→{NUM_ACTIONS}", frame_size * frame_size),
                got: format!("{}→{}", net.input_dim(), net.output_dim()),
            }));
        }
        Ok(Self { net, frame_size })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn q_values(&self, frame: &Frame) -> Result<[f64; NUM_ACTIONS]> {
        let out = self.net.forward(row(frame))?;
        let mut q = [0.0; NUM_ACTIONS];
        for (dst, v) in q.iter_mut().zip(out.iter()) {
            *dst = *v;
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("q-values".into()));
        }
        Ok(q)
    }

    /// Q-values for a batch of flattened frames (`n × pixels`).
    pub fn q_batch(&self, frames: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.net.forward(frames)?)
    }

    pub fn greedy_action(&self, frame: &Frame) -> Result<Action> {
        Ok(greedy_from_values(&self.q_values(frame)?))
    }

    pub fn importance_weight(&self, frame: &Frame) -> Result<f64> {
        Ok(importance_from_values(&self.q_values(frame)?))
    }

    /// Q-values at raw (unclamped) pixels and the gradient of
    /// `Σ_a weights[a]·Q(x, a)` with respect to those pixels.
    pub fn input_gradient(
        &self,
        pixels: &[f64],
        weights: &[f64; NUM_ACTIONS],
    ) -> Result<([f64; NUM_ACTIONS], Vec<f64>)> {
        let x = ArrayView2::from_shape((1, pixels.len()), pixels)
            .map_err(|_| Error::Domain("pixel buffer".into()))?;
        let tape = self.net.forward_tape(x)?;
        let mut q = [0.0; NUM_ACTIONS];
        for (dst, v) in q.iter_mut().zip(tape.output().iter()) {
            *dst = *v;
        }
        let d_out = Array2::from_shape_vec((1, NUM_ACTIONS), weights.to_vec()).expect("shape");
        let g = self.net.backward(&tape, d_out.view())?;
        let grad: Vec<f64> = g.input.iter().copied().collect();
        if grad.iter().any(|v| !v.is_finite()) || q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("q-network input gradient".into()));
        }
        Ok((q, grad))
    }

    pub fn save(&self, path: impl AsRef<Path>, mut metadata: Metadata) -> Result<()> {
        metadata.insert("kind".into(), "qmodel".into());
        metadata.insert("frame_size".into(), self.frame_size.to_string());
        Ok(nnkit::save_model(&self.net, path, &metadata)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Metadata)> {
        let (net, meta) = nnkit::load_model(path)?;
        if meta.get("kind").map(String::as_str) != Some("qmodel") {
            return Err(Error::Format("checkpoint is not a Q-model".into()));
        }
        let size = meta
            .get("frame_size")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("missing frame_size".into()))?;
        Ok((Self::new(net, size)?, meta))
    }
}

/// Argmax with ties to the lowest action index.
pub fn greedy_from_values(q: &[f64]) -> Action {
    Action::from_index(argmax(q)).expect("one value per action")
}

/// ω = max_a Q − min_a Q.
pub fn importance_from_values(q: &[f64]) -> f64 {
    let hi = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
    (hi - lo).max(0.0)
}

/// Undiscounted greedy return from reset, averaged over `episodes`.
pub fn evaluate_greedy(q: &QModel, cfg: &EnvConfig, episodes: usize) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut s = crate::env::reset(cfg)?;
        loop {
            let a = q.greedy_action(&crate::env::render(cfg, &s))?;
            let out = step(cfg, &s, a)?;
            total += out.reward;
            s = out.state;
            if out.done {
                break;
            }
        }
    }
    Ok(total / episodes.max(1) as f64)
}

#[derive(Clone, Copy)]
struct Transition {
    state: usize,
    action: usize,
    reward: f64,
    next: usize,
}

/// Double DQN with a target network, Huber loss and uniform replay.
///
/// Episodes start from a uniformly drawn valid state (exploring starts) and
/// run until the horizon. Horizon cut-offs are truncations, so targets always
/// bootstrap. The returned network is the best greedy evaluation snapshot
/// (latest among equals).
pub fn train_dqn(
    cfg: &EnvConfig,
    hyper: &DqnConfig,
    seed: u64,
) -> Result<(QModel, Vec<CurvePoint>)> {
    cfg.validate()?;
    hyper.validate()?;
    let space = StateSpace::enumerate(cfg)?;
    let pixels = cfg.frame_size * cfg.frame_size;
    let renders = space.renders();
    let mut frames = Array2::zeros((space.len(), pixels));
    for (mut r, f) in frames.rows_mut().into_iter().zip(&renders) {
        r.assign(&ndarray::ArrayView1::from(f.pixels()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arch = Architecture::new(pixels);
    for &w in &hyper.hidden {
        arch = arch.layer(w, Activation::Silu);
    }
    arch = arch.layer(NUM_ACTIONS, Activation::Identity);
    let mut online = Mlp::new(arch, &mut rng);
    let mut target = online.clone();
    let mut opt = Adam::new(
        &online,
        AdamConfig {
            lr: hyper.learning_rate,
            ..AdamConfig::default()
        },
    );

    let gamma = cfg.discount;
    let optimum = value_iteration(cfg)?.optimal_return;
    let mut replay: Vec<Transition> = Vec::with_capacity(hyper.replay_capacity);
    let mut replay_pos = 0;
    let mut curve = Vec::new();
    let mut best: Option<(f64, Mlp)> = None;
    let mut recent_loss = Vec::new();

    let random_state = |rng: &mut ChaCha8Rng| -> EnvState {
        space.states()[rng.random_range(0..space.len())].clone()
    };
    let mut state = random_state(&mut rng);
    let decay_steps = (hyper.epsilon_decay * hyper.train_steps as f64).max(1.0);

    for t in 1..=hyper.train_steps {
        let frac = (t as f64 / decay_steps).min(1.0);
        let eps = hyper.epsilon_start + frac * (hyper.epsilon_end - hyper.epsilon_start);
        let idx = space.index_of(&state).expect("closure");
        let action = if rng.random::<f64>() < eps {
            rng.random_range(0..NUM_ACTIONS)
        } else {
            let q = online.forward(frames.slice(ndarray::s![idx..idx + 1, ..]))?;
            argmax(q.as_slice().expect("contiguous"))
        };
        let out = step(cfg, &state, Action::from_index(action).expect("index"))?;
        let next = space.index_of(&out.state).expect("closure");
        let tr = Transition {
            state: idx,
            action,
            reward: out.reward,
            next,
        };
        if replay.len() < hyper.replay_capacity {
            replay.push(tr);
        } else {
            replay[replay_pos] = tr;
            replay_pos = (replay_pos + 1) % hyper.replay_capacity;
        }
        state = if out.done {
            random_state(&mut rng)
        } else {
            out.state
        };

        if t >= hyper.learning_starts && replay.len() >= hyper.batch_size {
            let batch: Vec<Transition> = (0..hyper.batch_size)
                .map(|_| replay[rng.random_range(0..replay.len())])
                .collect();
            let s_idx: Vec<usize> = batch.iter().map(|b| b.state).collect();
            let n_idx: Vec<usize> = batch.iter().map(|b| b.next).collect();
            let xs = frames.select(Axis(0), &s_idx);
            let xn = frames.select(Axis(0), &n_idx);
            let q_next_online = online.forward(xn.view())?;
            let q_next_target = target.forward(xn.view())?;
            let targets: Vec<f64> = batch
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let a = argmax(q_next_online.row(i).as_slice().expect("contiguous"));
                    b.reward + gamma * q_next_target[[i, a]]
                })
                .collect();
            let delta = hyper.huber_delta;
            let n = batch.len() as f64;
            let (loss, g) = nnkit::grad(&online, xs.view(), |out| {
                let mut d = Array2::zeros(out.raw_dim());
                let mut total = 0.0;
                for (i, b) in batch.iter().enumerate() {
                    let err = out[[i, b.action]] - targets[i];
                    if err.abs() <= delta {
                        total += 0.5 * err * err;
                        d[[i, b.action]] = err / n;
                    } else {
                        total += delta * (err.abs() - 0.5 * delta);
                        d[[i, b.action]] = delta * err.signum() / n;
                    }
                }
                (total / n, d)
            })?;
            let mut pg = g.params;
            pg.clip_norm(hyper.grad_clip);
            opt.step(&mut online, &pg)?;
            recent_loss.push(loss);
        }
        if t % hyper.target_sync == 0 {
            target = online.clone();
        }
        if t % hyper.eval_every == 0 || t == hyper.train_steps {
            let model = QModel::new(online.clone(), cfg.frame_size)?;
            let ret = evaluate_greedy(&model, cfg, hyper.eval_episodes)?;
            let loss = if recent_loss.is_empty() {
                f64::NAN
            } else {
                recent_loss.iter().sum::<f64>() / recent_loss.len() as f64
            };
            recent_loss.clear();
            curve.push(CurvePoint {
                step: t,
                loss,
                eval_return: ret,
            });
            if best.as_ref().is_none_or(|(b, _)| ret >= *b) {
                best = Some((ret, online.clone()));
            }
        }
    }

    match hyper.return_threshold {
        None => Ok((QModel::new(online, cfg.frame_size)?, curve)),
        Some(frac) => {
            let (ret, net) = best.expect("at least one evaluation");
            if ret + 1e-12 < frac * optimum {
                return Err(Error::Training {
                    message: format!("best greedy return {ret} below {frac} × optimum {optimum}"),
                    curve: curve.iter().map(|p| p.eval_return).collect(),
                });
            }
            Ok((QModel::new(net, cfg.frame_size)?, curve))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_and_importance_formulas() {
        assert_eq!(greedy_from_values(&[0.1, 0.9, 0.3]), Action::Down);
        assert_eq!(greedy_from_values(&[0.5, 0.5, 0.5]), Action::Up);
        assert_eq!(importance_from_values(&[1.0, 3.0, 2.0]), 2.0);
        assert_eq!(importance_from_values(&[4.0, 4.0, 4.0]), 0.0);
        let q = [0.2, -1.0, 0.7];
        let shifted: Vec<f64> = q.iter().map(|v| v + 3.5).collect();
        assert_eq!(greedy_from_values(&q), greedy_from_values(&shifted));
        assert!((importance_from_values(&q) - importance_from_values(&shifted)).abs() < 1e-12);
        let scaled: Vec<f64> = q.iter().map(|v| 2.0 * v - 1.0).collect();
        assert_eq!(greedy_from_values(&q), greedy_from_values(&scaled));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(
            Architecture::new(256).layer(NUM_ACTIONS, Activation::Identity),
            &mut rng,
        );
        let q = QModel::new(net, 16).unwrap();
        assert!(q.q_values(&Frame::zeros(8)).is_err());
        assert!(q
            .q_values(&Frame::zeros(16))
            .unwrap()
            .iter()
            .all(|v| v.is_finite()));
    }
}
