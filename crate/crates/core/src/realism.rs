//! Autoencoder realism detector trained on clean frames, and the gradient
//! step that pulls a frame toward lower reconstruction error.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use nnkit::{Activation, Adam, AdamConfig, Architecture, Metadata, Mlp};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::{l2, Frame};

#[derive(Debug, Clone, PartialEq)]
pub struct AeConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Mean held-out reconstruction error the trained model must reach.
    pub clean_error_limit: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            bottleneck: 32,
            epochs: 300,
            batch_size: 32,
            learning_rate: 2e-3,
            clean_error_limit: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeModel {
    net: Mlp,
    frame_size: usize,
}

fn row(pixels: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, pixels.len()), pixels).expect("contiguous")
}

impl AeModel {
    pub fn new(net: Mlp, frame_size: usize) -> Result<Self> {
        let n = frame_size * frame_size;
        if net.input_dim() != n || net.output_dim() != n {
            return Err(Error::Nn(nnkit::NnError::Shape {
                expected: format!("{n}→{n}"),
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

    pub fn reconstruct(&self, frame: &Frame) -> Result<Frame> {
        let out = self.net.forward(row(frame.pixels()))?;
        Ok(Frame::from_pixels(
            self.frame_size,
            out.into_raw_vec_and_offset().0,
        ))
    }

    /// ‖x − AE(x)‖₂.
    pub fn reconstruction_error(&self, frame: &Frame) -> Result<f64> {
        self.error_raw(frame.pixels())
    }

    pub fn error_raw(&self, pixels: &[f64]) -> Result<f64> {
        let out = self.net.forward(row(pixels))?;
        let e = l2(pixels, out.as_slice().expect("contiguous"));
        if !e.is_finite() {
            return Err(Error::Numerics("reconstruction error".into()));
        }
        Ok(e)
    }

    /// Gradient of ‖x − AE(x)‖₂ with respect to `x`. Zero at a fixed point.
    pub fn error_gradient(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        let tape = self.net.forward_tape(row(pixels))?;
        let out = tape.output().as_slice().expect("contiguous").to_vec();
        let resid: Vec<f64> = pixels.iter().zip(&out).map(|(x, y)| x - y).collect();
        let norm = resid.iter().map(|r| r * r).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(vec![0.0; pixels.len()]);
        }
        let unit: Vec<f64> = resid.iter().map(|r| r / norm).collect();
        let d_out = Array2::from_shape_vec((1, unit.len()), unit.iter().map(|u| -u).collect())
            .expect("shape");
        let back = self.net.backward(&tape, d_out.view())?;
        let grad: Vec<f64> = unit
            .iter()
            .zip(back.input.iter())
            .map(|(u, b)| u + b)
            .collect();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerics("realism gradient".into()));
        }
        Ok(grad)
    }

    /// One unclamped descent step on raw pixels.
    pub fn realism_step_raw(&self, pixels: &mut [f64], step_size: f64) -> Result<()> {
        let g = self.error_gradient(pixels)?;
        for (p, gi) in pixels.iter_mut().zip(g) {
            *p -= step_size * gi;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, mut metadata: Metadata) -> Result<()> {
        metadata.insert("kind".into(), "autoencoder".into());
        metadata.insert("frame_size".into(), self.frame_size.to_string());
        Ok(nnkit::save_model(&self.net, path, &metadata)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Metadata)> {
        let (net, meta) = nnkit::load_model(path)?;
        if meta.get("kind").map(String::as_str) != Some("autoencoder") {
            return Err(Error::Format("checkpoint is not an autoencoder".into()));
        }
        let size = meta
            .get("frame_size")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("missing frame_size".into()))?;
        Ok((Self::new(net, size)?, meta))
    }
}

/// Default step on the raw gradient of ‖x − AE(x)‖₂. That gradient has unit
/// norm whatever the error, so the step bounds how far one update moves a
/// 16×16 frame.
pub const DEFAULT_REALISM_STEP: f64 = 0.1;

/// One descent step of [`DEFAULT_REALISM_STEP`] on the reconstruction error,
/// clamped to [0, 1].
pub fn realism_step(ae: &AeModel, frame: &Frame) -> Result<Frame> {
    realism_step_sized(ae, frame, DEFAULT_REALISM_STEP)
}

pub fn realism_step_sized(ae: &AeModel, frame: &Frame, step_size: f64) -> Result<Frame> {
    let mut px = frame.pixels().to_vec();
    ae.realism_step_raw(&mut px, step_size)?;
    Ok(Frame::from_pixels(frame.size(), px))
}

/// Trains on `train` and checks the mean error on `held_out` against the
/// configured limit.
pub fn train_autoencoder(
    train: &[Frame],
    held_out: &[Frame],
    hyper: &AeConfig,
    seed: u64,
) -> Result<(AeModel, Vec<f64>)> {
    let Some(first) = train.first() else {
        return Err(Error::Config("autoencoder needs training frames".into()));
    };
    if hyper.batch_size == 0 || hyper.bottleneck == 0 || hyper.hidden == 0 {
        return Err(Error::Config(
            "autoencoder widths and batch size must be positive".into(),
        ));
    }
    let size = first.size();
    let n = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture::new(n)
        .layer(hyper.hidden, Activation::Silu)
        .layer(hyper.bottleneck, Activation::Silu)
        .layer(hyper.hidden, Activation::Silu)
        .layer(n, Activation::Sigmoid);
    let mut net = Mlp::new(arch, &mut rng);
    let mut opt = Adam::new(
        &net,
        AdamConfig {
            lr: hyper.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let mut x = Array2::zeros((chunk.len(), n));
            for (mut r, &i) in x.rows_mut().into_iter().zip(chunk) {
                r.assign(&ndarray::ArrayView1::from(train[i].pixels()));
            }
            let b = chunk.len() as f64;
            let (loss, g) = nnkit::grad(&net, x.view(), |out| {
                let diff = &out - &x;
                let loss = diff.iter().map(|d| d * d).sum::<f64>() / b;
                (loss, diff * (2.0 / b))
            })?;
            opt.step(&mut net, &g.params)?;
            total += loss * b;
        }
        curve.push(total / train.len() as f64);
    }
    let ae = AeModel::new(net, size)?;
    let eval = if held_out.is_empty() { train } else { held_out };
    let mean = eval
        .iter()
        .map(|f| ae.reconstruction_error(f))
        .sum::<Result<f64>>()?
        / eval.len() as f64;
    if mean > hyper.clean_error_limit {
        return Err(Error::Training {
            message: format!(
                "held-out reconstruction error {mean:.4} above {}",
                hyper.clean_error_limit
            ),
            curve,
        });
    }
    Ok((ae, curve))
}
