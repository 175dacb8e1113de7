//! Layer building blocks, parameter initialization, and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Kaiming-uniform fan-in init: U(-b, b) with b = sqrt(3 / fan_in) * gain
/// for the default gain 1.
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (3.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product())
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::param(shape, data).expect("shape/data mismatch in init")
}

/// N(0, std^2) init via Box-Muller (keeps the dependency surface small and
/// the stream reproducible).
pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(r * theta.cos() * std);
        if data.len() < n {
            data.push(r * theta.sin() * std);
        }
    }
    Tensor::param(shape, data).expect("shape/data mismatch in init")
}

pub fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![0.0; shape.iter().product()]).expect("zeros")
}

pub fn ones_param(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![1.0; shape.iter().product()]).expect("ones")
}

/// MLP-block activation. The attention equations fix everything else; this
/// is the one free nonlinearity, so it stays configurable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => ops::relu(x),
            Activation::Gelu => ops::gelu(x),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Result<Activation> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Input(format!("unknown activation '{other}'"))),
        }
    }
}

/// Last-axis layer normalization with learnable affine.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64) -> LayerNorm {
        LayerNorm {
            gamma: ones_param(&[dim]),
            beta: zeros_param(&[dim]),
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layernorm(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Dense layer with an `[out, in]` weight and optional bias.
#[derive(Clone)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearLayer {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, bias: bool) -> LinearLayer {
        LinearLayer {
            weight: kaiming_uniform(rng, &[out_dim, in_dim], in_dim),
            bias: bias.then(|| zeros_param(&[out_dim])),
        }
    }

    /// All-zero weights (and bias); the prediction head starts here so the
    /// first forward lands on patch centers.
    pub fn zeroed(in_dim: usize, out_dim: usize, bias: bool) -> LinearLayer {
        LinearLayer {
            weight: zeros_param(&[out_dim, in_dim]),
            bias: bias.then(|| zeros_param(&[out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.weight, self.bias.as_ref())
    }

    pub fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// 3x3/1x1 convolution layer with replicated borders.
#[derive(Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvLayer {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> ConvLayer {
        let fan_in = in_ch * kernel * kernel;
        ConvLayer {
            weight: kaiming_uniform(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
            bias: zeros_param(&[out_ch]),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, Some(&self.bias), self.stride)
    }

    pub fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Per-parameter Adam moments.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Raw access for checkpointing.
    pub fn slots(&self) -> (&[Vec<f64>], &[Vec<f64>], u64) {
        (&self.m, &self.v, self.step)
    }

    pub fn restore(m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64) -> AdamState {
        AdamState { m, v, step }
    }
}

/// One bias-corrected Adam update, in place. Gradients are left untouched;
/// callers zero them explicitly before the next backward pass.
pub fn adam_step(
    params: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state holds {} slots for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.numel() {
            return Err(Error::Contract(format!(
                "optimizer slot {i} has {} entries for a parameter of {} (shape {:?})",
                state.m[i].len(),
                p.numel(),
                p.shape()
            )));
        }
        if p.grad().is_none() {
            return Err(Error::Contract(format!(
                "parameter {i} (shape {:?}) has no gradient; run backward first",
                p.shape()
            )));
        }
    }
    state.step += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter().enumerate() {
        let grad = p.grad().expect("checked above");
        let mut data = p.data_mut();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..data.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
