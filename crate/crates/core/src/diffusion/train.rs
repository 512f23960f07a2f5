use ndarray::Array2;
use nnkit::{Adam, AdamConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{preconditioners, DenoiserModel, NoiseParams, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTrainConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of dropping the whole condition.
    pub drop_rate: f64,
    /// Probability of replacing the last action by Null when the condition is kept.
    pub null_rate: f64,
    pub grad_clip: f64,
    pub log_every: usize,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            steps: 4000,
            batch_size: 64,
            learning_rate: 1e-3,
            drop_rate: 0.1,
            null_rate: 0.1,
            grad_clip: 1.0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub items: usize,
    /// Items evaluated without any condition.
    pub dropped: usize,
    /// Conditioned items whose last action was replaced by Null.
    pub nulled: usize,
}

/// One optimisation step on `c_out²·‖F(c_in·x, c_noise, cond?) − (y − c_skip·x)/c_out‖²`
/// with `x = y + n`, `ln σ ~ N(P_mean, P_std²)` and `n ~ N(0, σ²I)` drawn per
/// item. The c_out² weight makes this the plain clean-frame error
/// `‖D(x; σ, cond?) − y‖²`.
/// Only the rate and clipping fields of `hyper` are read.
pub fn train_step<R: Rng + ?Sized>(
    m: &mut DenoiserModel,
    opt: &mut Adam,
    batch: &[&Sample],
    np: &NoiseParams,
    hyper: &DiffusionTrainConfig,
    rng: &mut R,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Domain("empty training batch".into()));
    }
    let DiffusionTrainConfig {
        drop_rate,
        null_rate,
        grad_clip,
        ..
    } = *hyper;
    if !(0.0..=1.0).contains(&drop_rate) || !(0.0..=1.0).contains(&null_rate) {
        return Err(Error::Domain(format!(
            "rates must lie in [0, 1], got drop {drop_rate}, null {null_rate}"
        )));
    }
    let p = m.frame_size() * m.frame_size();
    let dim = m.net().input_dim();
    let mut input = Array2::zeros((batch.len(), dim));
    let mut target = Array2::zeros((batch.len(), p));
    let mut dropped = 0;
    let mut nulled = 0;
    let mut noisy = vec![0.0; p];
    let mut scales = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        let z: f64 = StandardNormal.sample(rng);
        let sigma = (np.p_mean + np.p_std * z).exp();
        let pre = preconditioners(sigma, np)?;
        for (n, y) in noisy.iter_mut().zip(s.target.pixels()) {
            let e: f64 = StandardNormal.sample(rng);
            *n = y + sigma * e;
        }
        let drop = rng.random::<f64>() < drop_rate;
        let null = !drop && rng.random::<f64>() < null_rate;
        let cond = if drop {
            dropped += 1;
            None
        } else {
            let c = if null {
                nulled += 1;
                s.cond.with_null_last()
            } else {
                s.cond.clone()
            };
            Some(c)
        };
        m.encode_into(
            input.row_mut(i).as_slice_mut().expect("contiguous"),
            &noisy,
            &pre,
            cond.as_ref(),
        )?;
        for (t, (y, x)) in target
            .row_mut(i)
            .iter_mut()
            .zip(s.target.pixels().iter().zip(&noisy))
        {
            *t = (y - pre.c_skip * x) / pre.c_out;
        }
        scales.push(pre.c_out);
    }
    let n = (batch.len() * p) as f64;
    let (loss, g) = nnkit::grad(m.net(), input.view(), |out| {
        let mut loss = 0.0;
        let mut grad = Array2::zeros(out.raw_dim());
        for (i, c) in scales.iter().enumerate() {
            // The first p inputs are c_in·x.
            let xin = input.row(i);
            let gate = out[[i, p]];
            let mut dgate = 0.0;
            for j in 0..p {
                let d = c * (out[[i, j]] + gate * xin[j] - target[[i, j]]);
                loss += d * d;
                let dd = 2.0 * c * d / n;
                grad[[i, j]] = dd;
                dgate += dd * xin[j];
            }
            grad[[i, p]] = dgate;
        }
        (loss / n, grad)
    })?;
    let mut pg = g.params;
    if grad_clip > 0.0 {
        pg.clip_norm(grad_clip);
    }
    opt.step(m.net_mut(), &pg)?;
    Ok(StepStats {
        loss,
        items: batch.len(),
        dropped,
        nulled,
    })
}

/// Trains a fresh denoiser; returns it with the mean loss of every
/// `log_every` steps. The learning rate decays linearly to 10% of its start.
pub fn train_denoiser(
    samples: &[Sample],
    np: &NoiseParams,
    hyper: &DiffusionTrainConfig,
    seed: u64,
) -> Result<(DenoiserModel, Vec<f64>)> {
    np.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("empty diffusion dataset".into()))?;
    if hyper.batch_size == 0 || hyper.log_every == 0 {
        return Err(Error::Config(
            "batch_size and log_every must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DenoiserModel::new(first.target.size(), first.cond.k(), &hyper.hidden, &mut rng);
    let mut opt = Adam::new(
        m.net(),
        AdamConfig {
            lr: hyper.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut curve = Vec::new();
    let mut acc = 0.0;
    for t in 0..hyper.steps {
        let frac = t as f64 / hyper.steps as f64;
        opt.set_lr(hyper.learning_rate * (1.0 - 0.9 * frac));
        let batch: Vec<&Sample> = (0..hyper.batch_size)
            .map(|_| &samples[rng.random_range(0..samples.len())])
            .collect();
        let stats = train_step(&mut m, &mut opt, &batch, np, hyper, &mut rng)?;
        acc += stats.loss;
        if (t + 1) % hyper.log_every == 0 {
            curve.push(acc / hyper.log_every as f64);
            acc = 0.0;
        }
    }
    Ok((m, curve))
}
