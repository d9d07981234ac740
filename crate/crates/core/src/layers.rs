//! Differentiable layers shared by the three branches and the fusion head.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::module::{join, Mode, Module, Parameter};
use crate::tensor::{Tape, Tensor, Var};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Relu6,
    Gelu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Relu6 => x.relu6(),
            Activation::Gelu => x.gelu(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = Tensor::randn(
            vec![out_ch, in_ch, kernel, kernel],
            (2.0 / fan_in).sqrt(),
            rng,
        );
        Self {
            weight: Parameter::weight(join(name, "weight"), weight),
            bias: bias.then(|| Parameter::weight(join(name, "bias"), Tensor::zeros(vec![out_ch]))),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.tensor.shape()[2]
    }

    /// `floor((in + 2·pad − k)/stride) + 1`.
    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel()) / self.stride + 1
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        x.conv2d(w, b, self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// 1×1 convolution: a per-pixel dense layer over channels.
pub fn pointwise_conv2d<'t>(x: Var<'t>, weight: Var<'t>) -> Result<Var<'t>> {
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
        return Err(Error::dim("pointwise_conv2d", &x.shape(), &ws));
    }
    x.conv2d(weight, None, 1, 0)
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub weight: Parameter,
    pub stride: usize,
    pub padding: usize,
}

impl DepthwiseConv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (kernel * kernel) as f64;
        let weight = Tensor::randn(
            vec![channels, 1, kernel, kernel],
            (2.0 / fan_in).sqrt(),
            rng,
        );
        Self {
            weight: Parameter::weight(join(name, "weight"), weight),
            stride,
            padding,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.depthwise_conv2d(tape.param(&self.weight), self.stride, self.padding)
    }
}

impl Module for DepthwiseConv2d {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
    }
}

/// Batch normalization over axis 1 of `[b, c]` or `[b, c, h, w]` inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Parameter,
    pub running_var: Parameter,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::weight(join(name, "gamma"), Tensor::ones(vec![channels])),
            beta: Parameter::weight(join(name, "beta"), Tensor::zeros(vec![channels])),
            running_mean: Parameter::buffer(
                join(name, "running_mean"),
                Tensor::zeros(vec![channels]),
            ),
            running_var: Parameter::buffer(join(name, "running_var"), Tensor::ones(vec![channels])),
            eps: BATCH_NORM_EPS,
            momentum: BATCH_NORM_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.tensor.numel()
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates as `momentum·running + (1 − momentum)·batch`
    /// (unbiased variance). Eval mode uses the running estimates only.
    pub fn forward<'t>(&mut self, tape: &'t Tape, x: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        match mode {
            Mode::Eval => x.batch_norm_eval(
                gamma,
                beta,
                self.running_mean.tensor.data(),
                self.running_var.tensor.data(),
                self.eps,
            ),
            Mode::Train => {
                let shape = x.shape();
                let count = (shape.iter().product::<usize>() / shape[1].max(1)) as f64;
                let (y, mean, var) = x.batch_norm_train(gamma, beta, self.eps)?;
                let m = self.momentum;
                let unbias = count / (count - 1.0);
                for (r, b) in self.running_mean.tensor.data_mut().iter_mut().zip(&mean) {
                    *r = m * *r + (1.0 - m) * b;
                }
                for (r, b) in self.running_var.tensor.data_mut().iter_mut().zip(&var) {
                    *r = m * *r + (1.0 - m) * b * unbias;
                }
                Ok(y)
            }
        }
    }
}

impl Module for BatchNorm {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Parameter::weight(join(name, "gamma"), Tensor::ones(vec![dim])),
            beta: Parameter::weight(join(name, "beta"), Tensor::zeros(vec![dim])),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(tape.param(&self.gamma), tape.param(&self.beta), self.eps)
    }
}

impl Module for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// `y = x·W + b` applied over the last axis.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Dense {
    /// Glorot-uniform weight, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Parameter::weight(
                join(name, "weight"),
                Tensor::uniform(vec![input, output], -limit, limit, rng),
            ),
            bias: Parameter::weight(join(name, "bias"), Tensor::zeros(vec![output])),
        }
    }

    /// Gaussian weight with the given std, zero bias.
    pub fn with_std<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        output: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Parameter::weight(
                join(name, "weight"),
                Tensor::randn(vec![input, output], std, rng),
            ),
            bias: Parameter::weight(join(name, "bias"), Tensor::zeros(vec![output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (din, dout) = (self.input_dim(), self.output_dim());
        if shape.last() != Some(&din) {
            return Err(Error::dim("dense", &shape, self.weight.tensor.shape()));
        }
        let rows = x.numel() / din;
        let flat = if shape.len() == 2 {
            x
        } else {
            x.reshape(vec![rows, din])?
        };
        let y = flat
            .matmul(tape.param(&self.weight))?
            .add_bias(tape.param(&self.bias), 1)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().expect("rank >= 1") = dout;
            y.reshape(out_shape)
        }
    }
}

impl Module for Dense {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Inverted dropout with a counter-based mask stream.
///
/// The mask for call number `counter` is drawn from ChaCha8 keyed by `seed`
/// on stream `counter`, so a run is reproducible from the seed alone.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    seed: u64,
    counter: u64,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(
                "dropout",
                format!("rate {rate} not in [0, 1)"),
            ));
        }
        Ok(Self {
            rate,
            seed,
            counter: 0,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn set_counter(&mut self, counter: u64) {
        self.counter = counter;
    }

    /// Keep-mask (already scaled by `1/(1 − rate)`) for one call.
    pub fn mask(rate: f64, seed: u64, counter: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(counter);
        let keep = 1.0 / (1.0 - rate);
        (0..n)
            .map(|_| {
                let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                if u < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect()
    }

    pub fn forward<'t>(&mut self, x: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        if mode == Mode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let mask = Self::mask(self.rate, self.seed, self.counter, x.numel());
        self.counter += 1;
        x.mul_const(Arc::new(mask))
    }
}

/// Mean over spatial positions of `[b, c, h, w]`, or over the token axis of
/// `[b, t, d]`.
pub fn global_average_pool<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    match shape.len() {
        4 => {
            if shape[2] * shape[3] == 0 {
                return Err(Error::contract(
                    "global_average_pool",
                    "empty spatial extent",
                ));
            }
            x.reshape(vec![shape[0], shape[1], shape[2] * shape[3]])?
                .mean_axis(2)
        }
        3 => {
            if shape[1] == 0 {
                return Err(Error::contract("global_average_pool", "no tokens"));
            }
            x.mean_axis(1)
        }
        _ => Err(Error::dim("global_average_pool", &shape, &[0, 0, 0, 0])),
    }
}
