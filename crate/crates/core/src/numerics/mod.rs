//! Differentiable-model substrate: small feed-forward networks with
//! hand-derived gradients, softmax, seeded Gaussian sampling, and a
//! central finite-difference gradient checker.
//!
//! All math is `f64`. Gradients are computed layer by layer from cached
//! forward activations; there is no tape. Every loss in this crate reduces
//! to a scalar, so the checker can probe any parameter of any model.

pub mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

/// Output-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
    Softmax,
}

/// Feed-forward network shape: `layer_widths = [in, h1, …, out]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_widths: Vec<usize>,
    pub hidden: Activation,
    pub output: OutputActivation,
}

impl ModelSpec {
    pub fn new(layer_widths: &[usize], hidden: Activation, output: OutputActivation) -> Self {
        Self {
            layer_widths: layer_widths.to_vec(),
            hidden,
            output,
        }
    }

    /// Single affine layer, no nonlinearity.
    pub fn linear(input: usize, output: usize) -> Self {
        Self::new(&[input, output], Activation::Identity, OutputActivation::Identity)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "model needs at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig(format!(
                "zero layer width in {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Flat offsets per layer: (weight start, bias start, fan_in, fan_out).
    fn offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.layers());
        let mut pos = 0;
        for w in self.layer_widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            out.push((pos, pos + fan_in * fan_out, fan_in, fan_out));
            pos += fan_in * fan_out + fan_out;
        }
        out
    }
}

/// A network's flat parameter vector. Layout per layer: row-major weight
/// matrix `[fan_out × fan_in]`, then biases `[fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub spec: ModelSpec,
    pub values: Vec<f64>,
    /// Seed the parameters were initialized from; provenance only.
    pub seed: u64,
}

impl Params {
    /// Wraps an explicit value vector; length must match the spec.
    pub fn from_values(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(Error::ShapeMismatch {
                context: "params",
                expected: spec.param_count().to_string(),
                got: values.len().to_string(),
            });
        }
        Ok(Self {
            spec,
            values,
            seed: 0,
        })
    }

    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let n = spec.param_count();
        Self::from_values(spec, vec![0.0; n])
    }

    /// In-place gradient step; rejects the update if any value goes non-finite.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                context: "sgd_step",
                expected: self.values.len().to_string(),
                got: grad.len().to_string(),
            });
        }
        for (v, g) in self.values.iter_mut().zip(grad) {
            *v -= lr * g;
            if !v.is_finite() {
                return Err(Error::NonFinite("parameter update"));
            }
        }
        Ok(())
    }
}

/// Weights uniform in [−1/√fan_in, +1/√fan_in], biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<Params> {
    spec.validate()?;
    let mut rng: ChaCha8Rng = seeds::rng(seed, "init_params");
    let mut values = vec![0.0; spec.param_count()];
    for (w_off, b_off, fan_in, fan_out) in spec.offsets() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in values.iter_mut().take(b_off).skip(w_off) {
            *v = rng.gen_range(-bound..=bound);
        }
        let _ = fan_out;
    }
    Ok(Params {
        spec: spec.clone(),
        values,
        seed,
    })
}

/// Per-layer pre-activations and activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.post.last().unwrap()
    }

    /// Smallest |pre-activation| over hidden layers, infinite if there are
    /// none. Relu is non-differentiable at 0; finite-difference probes are
    /// only meaningful when this margin comfortably exceeds the step size.
    pub fn min_hidden_pre_magnitude(&self) -> f64 {
        self.pre[..self.pre.len() - 1]
            .iter()
            .flatten()
            .map(|z| z.abs())
            .fold(f64::INFINITY, f64::min)
    }
}

fn apply_hidden(act: Activation, z: &[f64]) -> Vec<f64> {
    match act {
        Activation::Identity => z.to_vec(),
        Activation::Tanh => z.iter().map(|v| v.tanh()).collect(),
        Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
    }
}

fn hidden_derivative(act: Activation, z: f64, a: f64) -> f64 {
    match act {
        Activation::Identity => 1.0,
        Activation::Tanh => 1.0 - a * a,
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn apply_output(act: OutputActivation, z: &[f64]) -> Result<Vec<f64>> {
    match act {
        OutputActivation::Identity => Ok(z.to_vec()),
        OutputActivation::Sigmoid => Ok(z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()),
        OutputActivation::Softmax => softmax(z),
    }
}

/// Runs the network and keeps every intermediate for [`backward`].
pub fn forward_cache(params: &Params, input: &[f64]) -> Result<ForwardCache> {
    let spec = &params.spec;
    if input.len() != spec.input_width() {
        return Err(Error::ShapeMismatch {
            context: "forward input",
            expected: spec.input_width().to_string(),
            got: input.len().to_string(),
        });
    }
    let layers = spec.layers();
    let mut pre = Vec::with_capacity(layers);
    let mut post = Vec::with_capacity(layers);
    let mut cur = input;
    for (l, (w_off, b_off, fan_in, fan_out)) in spec.offsets().into_iter().enumerate() {
        let mut z = vec![0.0; fan_out];
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &params.values[w_off + o * fan_in..w_off + (o + 1) * fan_in];
            let mut acc = params.values[b_off + o];
            for (w, x) in row.iter().zip(cur) {
                acc += w * x;
            }
            *zo = acc;
        }
        let a = if l + 1 == layers {
            apply_output(spec.output, &z)?
        } else {
            apply_hidden(spec.hidden, &z)
        };
        pre.push(z);
        post.push(a);
        cur = post.last().unwrap();
    }
    if cur.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forward output"));
    }
    Ok(ForwardCache {
        input: input.to_vec(),
        pre,
        post,
    })
}

/// Network output for one input vector.
pub fn forward(params: &Params, input: &[f64]) -> Result<Vec<f64>> {
    let mut cache = forward_cache(params, input)?;
    Ok(cache.post.pop().unwrap())
}

/// Backpropagates `dl_dy` (gradient of a scalar loss w.r.t. the network
/// output) through the cached pass. Returns (∂L/∂params, ∂L/∂input).
pub fn backward(params: &Params, cache: &ForwardCache, dl_dy: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let spec = &params.spec;
    if dl_dy.len() != spec.output_width() {
        return Err(Error::ShapeMismatch {
            context: "backward output gradient",
            expected: spec.output_width().to_string(),
            got: dl_dy.len().to_string(),
        });
    }
    let offsets = spec.offsets();
    let layers = spec.layers();
    let mut grad = vec![0.0; spec.param_count()];

    // dL/dz for the output layer.
    let y = cache.output();
    let mut dz: Vec<f64> = match spec.output {
        OutputActivation::Identity => dl_dy.to_vec(),
        OutputActivation::Sigmoid => dl_dy
            .iter()
            .zip(y)
            .map(|(g, &yi)| g * yi * (1.0 - yi))
            .collect(),
        OutputActivation::Softmax => {
            let dot: f64 = dl_dy.iter().zip(y).map(|(g, &yi)| g * yi).sum();
            dl_dy.iter().zip(y).map(|(g, &yi)| yi * (g - dot)).collect()
        }
    };

    for l in (0..layers).rev() {
        let (w_off, b_off, fan_in, fan_out) = offsets[l];
        let below: &[f64] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        let mut d_below = vec![0.0; fan_in];
        for o in 0..fan_out {
            let g = dz[o];
            grad[b_off + o] += g;
            let row = w_off + o * fan_in;
            for i in 0..fan_in {
                grad[row + i] += g * below[i];
                d_below[i] += params.values[row + i] * g;
            }
        }
        if l == 0 {
            return Ok((grad, d_below));
        }
        let (z_prev, a_prev) = (&cache.pre[l - 1], &cache.post[l - 1]);
        dz = d_below
            .iter()
            .enumerate()
            .map(|(i, da)| da * hidden_derivative(spec.hidden, z_prev[i], a_prev[i]))
            .collect();
    }
    unreachable!("validated spec has at least one layer");
}

/// Max-subtracted softmax. Entries in (0, 1], sum 1.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Draws `n` vectors from N(mean, diag(diag_cov)), deterministically in `seed`.
pub fn sample_gaussian(mean: &[f64], diag_cov: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if mean.len() != diag_cov.len() {
        return Err(Error::ShapeMismatch {
            context: "sample_gaussian",
            expected: mean.len().to_string(),
            got: diag_cov.len().to_string(),
        });
    }
    if diag_cov.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::InvalidConfig("negative or non-finite covariance entry".into()));
    }
    let std: Vec<f64> = diag_cov.iter().map(|c| c.sqrt()).collect();
    let mut rng: ChaCha8Rng = seeds::rng(seed, "sample_gaussian");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let v: Vec<f64> = mean
            .iter()
            .zip(&std)
            .map(|(m, s)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + s * eps
            })
            .collect();
        out.push(v);
    }
    Ok(out)
}

/// Central finite-difference gradient of a scalar function at `x`.
pub fn fd_gradient<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Worst relative disagreement between two gradient vectors:
/// max over i of |a_i − n_i| / max(|a_i|, |n_i|, 1e-6).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
