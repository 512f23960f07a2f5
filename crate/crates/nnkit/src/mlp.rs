use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{shape_err, NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Silu => z * sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative at pre-activation `z`, given the activation output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }

    fn gain(self) -> f64 {
        match self {
            Activation::Relu | Activation::Silu => 2f64.sqrt(),
            _ => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl FromStr for Activation {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => Activation::Identity,
            "relu" => Activation::Relu,
            "silu" => Activation::Silu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            other => return Err(NnError::Format(format!("unknown activation `{other}`"))),
        })
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

/// Layer kinds and widths. The textual form `256>silu:128>identity:3` is what
/// checkpoints store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input: usize) -> Self {
        Self {
            input,
            layers: Vec::new(),
        }
    }

    pub fn layer(mut self, width: usize, activation: Activation) -> Self {
        self.layers.push(LayerSpec { width, activation });
        self
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(self.input, |l| l.width)
    }

    pub fn num_params(&self) -> usize {
        let mut fan_in = self.input;
        let mut n = 0;
        for l in &self.layers {
            n += fan_in * l.width + l.width;
            fan_in = l.width;
        }
        n
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.input)?;
        for l in &self.layers {
            write!(f, ">{}:{}", l.activation.name(), l.width)?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || NnError::Format(format!("malformed architecture descriptor `{s}`"));
        let mut parts = s.trim().split('>');
        let input = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let mut arch = Architecture::new(input);
        for p in parts {
            let (act, width) = p.split_once(':').ok_or_else(bad)?;
            let width: usize = width.parse().map_err(|_| bad())?;
            if width == 0 {
                return Err(bad());
            }
            arch = arch.layer(width, act.parse()?);
        }
        Ok(arch)
    }
}

/// Dense layer `a = act(x W + b)` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: Architecture,
    layers: Vec<Dense>,
}

/// Cached activations from a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<DenseGrad>,
}

impl ParamGrads {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|g| {
                g.weight
                    .iter()
                    .chain(g.bias.iter())
                    .map(|v| v * v)
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weight *= factor;
            g.bias *= factor;
        }
    }

    /// Rescales so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weight.iter().chain(g.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weight.iter().chain(g.bias.iter()).copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: ParamGrads,
    pub input: Array2<f64>,
}

impl Mlp {
    /// Random init: uniform with variance `gain² / fan_in`, zero biases.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut fan_in = arch.input;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            let limit = spec.activation.gain() * (3.0 / fan_in as f64).sqrt();
            let weight =
                Array2::from_shape_fn((fan_in, spec.width), |_| rng.random_range(-limit..limit));
            layers.push(Dense {
                weight,
                bias: Array1::zeros(spec.width),
                activation: spec.activation,
            });
            fan_in = spec.width;
        }
        Self { arch, layers }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let mut fan_in = arch.input;
        let layers = arch
            .layers
            .iter()
            .map(|spec| {
                let d = Dense {
                    weight: Array2::zeros((fan_in, spec.width)),
                    bias: Array1::zeros(spec.width),
                    activation: spec.activation,
                };
                fan_in = spec.width;
                d
            })
            .collect();
        Self { arch, layers }
    }

    /// Builds a model from explicit layers; widths must chain.
    pub fn from_layers(input: usize, layers: Vec<Dense>) -> Result<Self> {
        let mut arch = Architecture::new(input);
        let mut fan_in = input;
        for l in &layers {
            let (i, o) = l.weight.dim();
            if i != fan_in || l.bias.len() != o {
                return Err(shape_err(
                    format!("layer with fan-in {fan_in}"),
                    format!("weight {i}x{o}, bias {}", l.bias.len()),
                ));
            }
            arch = arch.layer(o, l.activation);
            fan_in = o;
        }
        Ok(Self { arch, layers })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output()
    }

    pub fn num_params(&self) -> usize {
        self.arch.num_params()
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.arch.input {
            return Err(shape_err(
                format!("batch x {}", self.arch.input),
                format!("{} x {}", x.nrows(), x.ncols()),
            ));
        }
        Ok(())
    }

    /// Evaluates a batch (one example per row).
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&l.weight);
            z += &l.bias;
            let act = l.activation;
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_one(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let n = x.len();
        let out = self.forward(x.into_shape_with_order((1, n)).expect("contiguous row"))?;
        Ok(out.row(0).to_owned())
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&l.weight);
            z += &l.bias;
            let act = l.activation;
            let a = z.mapv(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        Ok(Tape {
            inputs,
            pre,
            output: h,
        })
    }

    /// Backpropagates `d_out` (gradient of a scalar loss w.r.t. the output)
    /// through the recorded pass.
    pub fn backward(&self, tape: &Tape, d_out: ArrayView2<f64>) -> Result<Gradients> {
        if d_out.dim() != tape.output.dim() {
            return Err(shape_err(
                format!("{:?}", tape.output.dim()),
                format!("{:?}", d_out.dim()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.to_owned();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let z = &tape.pre[idx];
            let act = l.activation;
            if act != Activation::Identity {
                let a = if idx + 1 < self.layers.len() {
                    &tape.inputs[idx + 1]
                } else {
                    &tape.output
                };
                Zip::from(&mut delta)
                    .and(z)
                    .and(a)
                    .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            }
            let dw = tape.inputs[idx].t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            delta = delta.dot(&l.weight.t());
            grads.push(DenseGrad {
                weight: dw,
                bias: db,
            });
        }
        grads.reverse();
        Ok(Gradients {
            params: ParamGrads { layers: grads },
            input: delta,
        })
    }

    /// Applies `param -= step · grad` for every parameter.
    pub fn apply_update(&mut self, update: &ParamGrads, step: f64) {
        for (l, g) in self.layers.iter_mut().zip(&update.layers) {
            l.weight.scaled_add(-step, &g.weight);
            l.bias.scaled_add(-step, &g.bias);
        }
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    /// Mutable visit of the `idx`-th scalar parameter in flattening order.
    pub fn param_mut(&mut self, mut idx: usize) -> Option<&mut f64> {
        for l in &mut self.layers {
            let nw = l.weight.len();
            if idx < nw {
                return l.weight.as_slice_mut().map(|s| &mut s[idx]);
            }
            idx -= nw;
            let nb = l.bias.len();
            if idx < nb {
                return Some(&mut l.bias[idx]);
            }
            idx -= nb;
        }
        None
    }
}

/// Gradient of a scalar loss of the model output w.r.t. parameters and input.
///
/// `loss` maps the output batch to `(value, ∂value/∂output)`.
pub fn grad<F>(model: &Mlp, batch: ArrayView2<f64>, loss: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(ArrayView2<f64>) -> (f64, Array2<f64>),
{
    let tape = model.forward_tape(batch)?;
    let (value, d_out) = loss(tape.output().view());
    if !value.is_finite() {
        return Err(NnError::Numerics("loss".into()));
    }
    let g = model.backward(&tape, d_out.view())?;
    if !g.params.is_finite() || !g.input.iter().all(|v| v.is_finite()) {
        return Err(NnError::Numerics("gradient".into()));
    }
    Ok((value, g))
}
