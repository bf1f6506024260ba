//! Latent surrogate simulator.
//!
//! The encoder maps s ⊕ one-hot(a) to a latent mean z; a softplus head maps
//! the same input to a diagonal covariance Σ(s, a). Decoder heads read z:
//! predicted next state ŝ′ and a reconstruction s̃ of the current state
//! (both sigmoid, so outputs live in [0, 1]^d), delay-risk / on-time
//! probabilities, a C-class delivery-time distribution, and a reward head
//! r̂ = 2·sigmoid(o) ∈ (0, 2).
//!
//! Training minimizes the weighted per-sample loss: squared errors on next
//! state, reward, and reconstruction, cross-entropies on the three outcome
//! heads, and a Gaussian negative log-likelihood that fits Σ to the latent
//! residual between the encoded true next state and z. Each component has
//! a configurable coefficient (1.0 by default) and the whole sum scales
//! linearly with the external per-sample weight.

use serde::{Deserialize, Serialize};

use crate::data::{OfflineDataset, Transition};
use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::checkpoint::{params_from_value, params_to_value};
use crate::numerics::{
    backward, forward_cache, init_params, Activation, ForwardCache, ModelSpec, OutputActivation,
    Params,
};
use crate::seeds;

/// Additive floor keeping Σ strictly positive. Deterministic transitions
/// push the likelihood optimum toward Σ = 0, where the 1/Σ factors make
/// plain SGD diverge; the floor bounds every such factor (encoder kick
/// ≤ ρ/(L·floor)) and Σ approaches it asymptotically with vanishing
/// gradient. It also keeps perturbation sampling non-degenerate.
pub const COV_FLOOR: f64 = 1e-2;
/// Fixed pre-softplus offset: a zero-initialized head starts at
/// Σ ≈ softplus(2) ≈ 2.1, so the likelihood term sharpens the variance
/// from above instead of collapsing it before the encoder settles.
pub const COV_OFFSET: f64 = 2.0;
/// Probability clamp for cross-entropy terms.
const P_CLAMP: f64 = 1e-12;

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// Network shapes for a simulator; hidden layers are tanh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimArchitecture {
    /// Latent width L.
    pub latent: usize,
    pub encoder_hidden: Vec<usize>,
    pub cov_hidden: Vec<usize>,
    /// Hidden widths shared by all decoder heads; empty = linear heads.
    pub head_hidden: Vec<usize>,
}

impl Default for SimArchitecture {
    fn default() -> Self {
        Self {
            latent: 8,
            encoder_hidden: vec![32],
            cov_hidden: vec![16],
            head_hidden: vec![],
        }
    }
}

/// Loss-component coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossCoeffs {
    pub next_state: f64,
    pub reward: f64,
    pub risk: f64,
    pub time: f64,
    pub status: f64,
    pub recon: f64,
    pub cov_nll: f64,
}

impl Default for LossCoeffs {
    fn default() -> Self {
        Self {
            next_state: 1.0,
            reward: 1.0,
            risk: 1.0,
            time: 1.0,
            status: 1.0,
            recon: 1.0,
            cov_nll: 1.0,
        }
    }
}

/// Unweighted loss components for one transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub next_state: f64,
    pub reward: f64,
    pub risk: f64,
    pub time: f64,
    pub status: f64,
    pub recon: f64,
    pub cov_nll: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.next_state + self.reward + self.risk + self.time + self.status + self.recon
            + self.cov_nll
    }
}

/// The surrogate model: encoder, covariance head, decoder heads.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatorModel {
    pub d: usize,
    pub k: usize,
    pub c: usize,
    pub latent: usize,
    pub encoder: Params,
    pub cov_head: Params,
    pub next_state_head: Params,
    pub recon_head: Params,
    pub risk_head: Params,
    pub status_head: Params,
    pub time_head: Params,
    pub reward_head: Params,
}

/// One forward evaluation of the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// ŝ′ in [0, 1]^d.
    pub next_state: Vec<f64>,
    /// r̂ in (0, 2).
    pub reward: f64,
    pub risk_p: f64,
    pub status_p: f64,
    /// C-class delivery-time distribution.
    pub time_p: Vec<f64>,
    /// Latent mean z.
    pub latent: Vec<f64>,
    /// Diagonal Σ, strictly positive.
    pub cov: Vec<f64>,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl SimulatorModel {
    /// Seed-deterministic initialization; each component derives its own
    /// stream from the one seed.
    pub fn init(d: usize, k: usize, c: usize, arch: &SimArchitecture, seed: u64) -> Result<Self> {
        if d == 0 || k < 2 || c < 2 || arch.latent == 0 {
            return Err(Error::InvalidConfig(format!(
                "simulator dims d={d} k={k} c={c} L={}",
                arch.latent
            )));
        }
        let input = d + k;
        let l = arch.latent;
        let net = |widths: Vec<usize>, output: OutputActivation, label: &str| {
            init_params(
                &ModelSpec::new(&widths, Activation::Tanh, output),
                seeds::derive(seed, label),
            )
        };
        Ok(Self {
            d,
            k,
            c,
            latent: l,
            encoder: net(
                widths(input, &arch.encoder_hidden, l),
                OutputActivation::Identity,
                "encoder",
            )?,
            cov_head: net(
                widths(input, &arch.cov_hidden, l),
                OutputActivation::Identity,
                "cov_head",
            )?,
            next_state_head: net(
                widths(l, &arch.head_hidden, d),
                OutputActivation::Sigmoid,
                "next_state_head",
            )?,
            recon_head: net(
                widths(l, &arch.head_hidden, d),
                OutputActivation::Sigmoid,
                "recon_head",
            )?,
            risk_head: net(
                widths(l, &arch.head_hidden, 1),
                OutputActivation::Sigmoid,
                "risk_head",
            )?,
            status_head: net(
                widths(l, &arch.head_hidden, 1),
                OutputActivation::Sigmoid,
                "status_head",
            )?,
            time_head: net(
                widths(l, &arch.head_hidden, c),
                OutputActivation::Softmax,
                "time_head",
            )?,
            reward_head: net(
                widths(l, &arch.head_hidden, 1),
                OutputActivation::Sigmoid,
                "reward_head",
            )?,
        })
    }

    fn nets(&self) -> [&Params; 8] {
        [
            &self.encoder,
            &self.cov_head,
            &self.next_state_head,
            &self.recon_head,
            &self.risk_head,
            &self.status_head,
            &self.time_head,
            &self.reward_head,
        ]
    }

    fn nets_mut(&mut self) -> [&mut Params; 8] {
        [
            &mut self.encoder,
            &mut self.cov_head,
            &mut self.next_state_head,
            &mut self.recon_head,
            &mut self.risk_head,
            &mut self.status_head,
            &mut self.time_head,
            &mut self.reward_head,
        ]
    }

    /// Flat parameter count over every component.
    pub fn flat_len(&self) -> usize {
        self.nets().iter().map(|p| p.values.len()).sum()
    }

    /// Component offsets within the flat layout, in [`Self::nets`] order.
    fn offsets(&self) -> [usize; 8] {
        let mut out = [0usize; 8];
        let mut pos = 0;
        for (i, p) in self.nets().iter().enumerate() {
            out[i] = pos;
            pos += p.values.len();
        }
        out
    }

    /// All parameters concatenated in component order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for p in self.nets() {
            out.extend_from_slice(&p.values);
        }
        out
    }

    /// Replaces every parameter from a flat vector laid out as [`Self::to_flat`].
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.flat_len() {
            return Err(Error::ShapeMismatch {
                context: "simulator flat params",
                expected: self.flat_len().to_string(),
                got: values.len().to_string(),
            });
        }
        let mut pos = 0;
        for p in self.nets_mut() {
            let n = p.values.len();
            p.values.copy_from_slice(&values[pos..pos + n]);
            pos += n;
        }
        Ok(())
    }

    /// One descent step over all components.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.flat_len() {
            return Err(Error::ShapeMismatch {
                context: "simulator gradient",
                expected: self.flat_len().to_string(),
                got: grad.len().to_string(),
            });
        }
        let mut pos = 0;
        for p in self.nets_mut() {
            let n = p.values.len();
            p.sgd_step(&grad[pos..pos + n], lr)?;
            pos += n;
        }
        Ok(())
    }

    /// s ⊕ one-hot(a).
    pub fn input_vec(&self, s: &[f64], a: usize) -> Result<Vec<f64>> {
        if s.len() != self.d {
            return Err(Error::ShapeMismatch {
                context: "simulator state",
                expected: self.d.to_string(),
                got: s.len().to_string(),
            });
        }
        if a >= self.k {
            return Err(Error::ShapeMismatch {
                context: "simulator action",
                expected: format!("< {}", self.k),
                got: a.to_string(),
            });
        }
        let mut x = vec![0.0; self.d + self.k];
        x[..self.d].copy_from_slice(s);
        x[self.d + a] = 1.0;
        Ok(x)
    }

    /// Latent Gaussian for (s, a): mean z and diagonal Σ.
    pub fn encode(&self, s: &[f64], a: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.input_vec(s, a)?;
        let z = forward_cache(&self.encoder, &x)?.output().to_vec();
        let u = forward_cache(&self.cov_head, &x)?.output().to_vec();
        let cov = u.iter().map(|&ui| softplus(ui + COV_OFFSET) + COV_FLOOR).collect();
        Ok((z, cov))
    }

    /// Reconstruction head: latent → state in [0, 1]^d.
    pub fn decode_state(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(forward_cache(&self.recon_head, z)?.output().to_vec())
    }

    /// Full surrogate evaluation for (s, a).
    pub fn sim_forward(&self, s: &[f64], a: usize) -> Result<SimOutput> {
        let (z, cov) = self.encode(s, a)?;
        let next_state = forward_cache(&self.next_state_head, &z)?.output().to_vec();
        let risk_p = forward_cache(&self.risk_head, &z)?.output()[0];
        let status_p = forward_cache(&self.status_head, &z)?.output()[0];
        let time_p = forward_cache(&self.time_head, &z)?.output().to_vec();
        let reward = 2.0 * forward_cache(&self.reward_head, &z)?.output()[0];
        Ok(SimOutput {
            next_state,
            reward,
            risk_p,
            status_p,
            time_p,
            latent: z,
            cov,
        })
    }

    /// Simulator reward r̂ only.
    pub fn predict_reward(&self, s: &[f64], a: usize) -> Result<f64> {
        let x = self.input_vec(s, a)?;
        let z = forward_cache(&self.encoder, &x)?.output().to_vec();
        Ok(2.0 * forward_cache(&self.reward_head, &z)?.output()[0])
    }

    fn residual_parts(
        &self,
        t: &Transition,
    ) -> Result<(f64, ForwardCache, ForwardCache, ForwardCache, Vec<f64>, f64)> {
        if t.next_state.len() != self.d {
            return Err(Error::ShapeMismatch {
                context: "residual next state",
                expected: self.d.to_string(),
                got: t.next_state.len().to_string(),
            });
        }
        let x = self.input_vec(&t.state, t.action)?;
        let enc_cache = forward_cache(&self.encoder, &x)?;
        let next_cache = forward_cache(&self.next_state_head, enc_cache.output())?;
        let reward_cache = forward_cache(&self.reward_head, enc_cache.output())?;
        let diffs: Vec<f64> = next_cache
            .output()
            .iter()
            .zip(&t.next_state)
            .map(|(p, y)| p - y)
            .collect();
        let dr = 2.0 * reward_cache.output()[0] - t.reward;
        let sq = diffs.iter().map(|e| e * e).sum::<f64>() + dr * dr;
        Ok((sq.sqrt(), enc_cache, next_cache, reward_cache, diffs, dr))
    }

    /// Joint prediction residual ‖(s′, r) − (ŝ′, r̂)‖ for one transition.
    pub fn residual_norm(&self, t: &Transition) -> Result<f64> {
        Ok(self.residual_parts(t)?.0)
    }

    /// Residual norm plus its gradient over the flat parameter vector.
    /// Only the encoder, next-state head, and reward head enter the
    /// prediction, so every other slot stays zero; residuals below
    /// [`RESIDUAL_EPS`] sit at the norm's non-differentiable origin and
    /// yield a zero gradient.
    pub fn residual_norm_grad(&self, t: &Transition) -> Result<(f64, Vec<f64>)> {
        let (norm, enc_cache, next_cache, reward_cache, diffs, dr) = self.residual_parts(t)?;
        let mut flat = vec![0.0; self.flat_len()];
        if norm < RESIDUAL_EPS {
            return Ok((norm, flat));
        }
        let inv = 1.0 / norm;
        let d_next: Vec<f64> = diffs.iter().map(|e| e * inv).collect();
        let (g_next, dz_next) = backward(&self.next_state_head, &next_cache, &d_next)?;
        let (g_rew, dz_rew) = backward(&self.reward_head, &reward_cache, &[dr * inv * 2.0])?;
        let dz: Vec<f64> = dz_next.iter().zip(&dz_rew).map(|(a, b)| a + b).collect();
        let (g_enc, _) = backward(&self.encoder, &enc_cache, &dz)?;
        let off = self.offsets();
        flat[off[0]..off[0] + g_enc.len()].copy_from_slice(&g_enc);
        flat[off[2]..off[2] + g_next.len()].copy_from_slice(&g_next);
        flat[off[7]..off[7] + g_rew.len()].copy_from_slice(&g_rew);
        Ok((norm, flat))
    }
}

/// Residual magnitude below which the prediction is treated as exact.
pub const RESIDUAL_EPS: f64 = 1e-12;

/// Caches from one loss evaluation, reused by the backward pass.
struct LossCaches {
    x_cache: ForwardCache,
    x2_cache: ForwardCache,
    cov_cache: ForwardCache,
    next_cache: ForwardCache,
    recon_cache: ForwardCache,
    risk_cache: ForwardCache,
    status_cache: ForwardCache,
    time_cache: ForwardCache,
    reward_cache: ForwardCache,
    cov: Vec<f64>,
    rho: Vec<f64>,
}

fn bce(p: f64, y: f64) -> f64 {
    let pc = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

/// d bce / d p, zero where the clamp is active.
fn bce_grad(p: f64, y: f64) -> f64 {
    if !(P_CLAMP..=1.0 - P_CLAMP).contains(&p) {
        return 0.0;
    }
    (p - y) / (p * (1.0 - p))
}

fn eval_loss(
    model: &SimulatorModel,
    t: &Transition,
    coeffs: &LossCoeffs,
) -> Result<(LossBreakdown, LossCaches)> {
    let x = model.input_vec(&t.state, t.action)?;
    let x2 = model.input_vec(&t.next_state, t.action)?;
    let x_cache = forward_cache(&model.encoder, &x)?;
    let x2_cache = forward_cache(&model.encoder, &x2)?;
    let cov_cache = forward_cache(&model.cov_head, &x)?;
    let z = x_cache.output();
    let cov: Vec<f64> = cov_cache
        .output()
        .iter()
        .map(|&u| softplus(u + COV_OFFSET) + COV_FLOOR)
        .collect();
    let rho: Vec<f64> = x2_cache
        .output()
        .iter()
        .zip(z)
        .map(|(z2, zi)| z2 - zi)
        .collect();

    let next_cache = forward_cache(&model.next_state_head, z)?;
    let recon_cache = forward_cache(&model.recon_head, z)?;
    let risk_cache = forward_cache(&model.risk_head, z)?;
    let status_cache = forward_cache(&model.status_head, z)?;
    let time_cache = forward_cache(&model.time_head, z)?;
    let reward_cache = forward_cache(&model.reward_head, z)?;

    let d = model.d as f64;
    let l = model.latent as f64;
    let mse = |pred: &[f64], target: &[f64]| {
        pred.iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / d
    };
    let r_hat = 2.0 * reward_cache.output()[0];
    let time_p = time_cache.output()[t.outcomes.delivery_time];
    let nll = cov
        .iter()
        .zip(&rho)
        .map(|(&s2, &r)| s2.ln() + r * r / s2)
        .sum::<f64>()
        * 0.5
        / l;

    let breakdown = LossBreakdown {
        next_state: coeffs.next_state * mse(next_cache.output(), &t.next_state),
        reward: coeffs.reward * (r_hat - t.reward) * (r_hat - t.reward),
        risk: coeffs.risk * bce(risk_cache.output()[0], f64::from(t.outcomes.delay_risk)),
        time: coeffs.time * -time_p.clamp(P_CLAMP, 1.0 - P_CLAMP).ln(),
        status: coeffs.status * bce(status_cache.output()[0], f64::from(t.outcomes.on_time_status)),
        recon: coeffs.recon * mse(recon_cache.output(), &t.state),
        cov_nll: coeffs.cov_nll * nll,
    };
    Ok((
        breakdown,
        LossCaches {
            x_cache,
            x2_cache,
            cov_cache,
            next_cache,
            recon_cache,
            risk_cache,
            status_cache,
            time_cache,
            reward_cache,
            cov,
            rho,
        },
    ))
}

/// Unweighted loss components for one transition.
pub fn sample_loss_breakdown(
    model: &SimulatorModel,
    t: &Transition,
    coeffs: &LossCoeffs,
) -> Result<LossBreakdown> {
    Ok(eval_loss(model, t, coeffs)?.0)
}

/// weight × Σ coeff·component for one transition.
pub fn weighted_sample_loss(
    model: &SimulatorModel,
    t: &Transition,
    weight: f64,
    coeffs: &LossCoeffs,
) -> Result<f64> {
    if !weight.is_finite() || weight < 0.0 {
        return Err(Error::InvalidConfig(format!("sample weight {weight}")));
    }
    Ok(weight * sample_loss_breakdown(model, t, coeffs)?.total())
}

/// Adds `scale` × ∂(weighted loss)/∂θ into `acc` (flat layout) and returns
/// the weighted loss. `scale` folds in both the sample weight and any batch
/// averaging factor.
pub fn accumulate_sample_grad(
    model: &SimulatorModel,
    t: &Transition,
    weight: f64,
    coeffs: &LossCoeffs,
    batch_scale: f64,
    acc: &mut [f64],
) -> Result<f64> {
    if !weight.is_finite() || weight < 0.0 {
        return Err(Error::InvalidConfig(format!("sample weight {weight}")));
    }
    let (breakdown, caches) = eval_loss(model, t, coeffs)?;
    let scale = weight * batch_scale;
    let offsets = model.offsets();
    let d = model.d as f64;
    let l = model.latent as f64;
    let mut dz = vec![0.0; model.latent];

    let mut apply_head = |idx: usize,
                          params: &Params,
                          cache: &ForwardCache,
                          dl_dy: &[f64],
                          dz: &mut [f64]|
     -> Result<()> {
        let (grad, dx) = backward(params, cache, dl_dy)?;
        let off = offsets[idx];
        for (g, slot) in grad.iter().zip(&mut acc[off..off + grad.len()]) {
            *slot += scale * g;
        }
        for (dzi, dxi) in dz.iter_mut().zip(&dx) {
            *dzi += dxi;
        }
        Ok(())
    };

    // Next-state and reconstruction heads: d(mse)/dŷ_j = 2(ŷ_j − y_j)/d.
    let d_next: Vec<f64> = caches
        .next_cache
        .output()
        .iter()
        .zip(&t.next_state)
        .map(|(p, y)| coeffs.next_state * 2.0 * (p - y) / d)
        .collect();
    apply_head(2, &model.next_state_head, &caches.next_cache, &d_next, &mut dz)?;
    let d_recon: Vec<f64> = caches
        .recon_cache
        .output()
        .iter()
        .zip(&t.state)
        .map(|(p, y)| coeffs.recon * 2.0 * (p - y) / d)
        .collect();
    apply_head(3, &model.recon_head, &caches.recon_cache, &d_recon, &mut dz)?;

    // Probability heads.
    let d_risk = [coeffs.risk
        * bce_grad(caches.risk_cache.output()[0], f64::from(t.outcomes.delay_risk))];
    apply_head(4, &model.risk_head, &caches.risk_cache, &d_risk, &mut dz)?;
    let d_status = [coeffs.status
        * bce_grad(
            caches.status_cache.output()[0],
            f64::from(t.outcomes.on_time_status),
        )];
    apply_head(5, &model.status_head, &caches.status_cache, &d_status, &mut dz)?;

    let time_out = caches.time_cache.output();
    let mut d_time = vec![0.0; model.c];
    let pt = time_out[t.outcomes.delivery_time];
    if (P_CLAMP..=1.0 - P_CLAMP).contains(&pt) {
        d_time[t.outcomes.delivery_time] = coeffs.time * (-1.0 / pt);
    }
    apply_head(6, &model.time_head, &caches.time_cache, &d_time, &mut dz)?;

    // Reward head: r̂ = 2p.
    let r_hat = 2.0 * caches.reward_cache.output()[0];
    let d_reward = [coeffs.reward * 2.0 * (r_hat - t.reward) * 2.0];
    apply_head(7, &model.reward_head, &caches.reward_cache, &d_reward, &mut dz)?;

    // Covariance NLL: Σ = softplus(u) + floor, ρ = z₂ − z.
    // ∂nll/∂Σ_j = (1/Σ_j − ρ_j²/Σ_j²)/(2L), ∂nll/∂ρ_j = ρ_j/(L·Σ_j).
    let d_u: Vec<f64> = caches
        .cov_cache
        .output()
        .iter()
        .zip(caches.cov.iter().zip(&caches.rho))
        .map(|(&u, (&s2, &r))| {
            coeffs.cov_nll * (1.0 / s2 - r * r / (s2 * s2)) * 0.5 / l * sigmoid(u + COV_OFFSET)
        })
        .collect();
    let (cov_grad, _) = backward(&model.cov_head, &caches.cov_cache, &d_u)?;
    let off = offsets[1];
    for (g, slot) in cov_grad.iter().zip(&mut acc[off..off + cov_grad.len()]) {
        *slot += scale * g;
    }

    let d_rho: Vec<f64> = caches
        .rho
        .iter()
        .zip(&caches.cov)
        .map(|(&r, &s2)| coeffs.cov_nll * r / (l * s2))
        .collect();
    // z receives the head gradients minus the ρ path; z₂ receives +ρ.
    for (dzi, dr) in dz.iter_mut().zip(&d_rho) {
        *dzi -= dr;
    }
    let (enc_grad, _) = backward(&model.encoder, &caches.x_cache, &dz)?;
    let (enc2_grad, _) = backward(&model.encoder, &caches.x2_cache, &d_rho)?;
    let off = offsets[0];
    for (i, slot) in acc[off..off + enc_grad.len()].iter_mut().enumerate() {
        *slot += scale * (enc_grad[i] + enc2_grad[i]);
    }

    Ok(weight * breakdown.total())
}

/// Mean weighted loss and its gradient over a batch of dataset rows.
/// Deterministic for any execution mode via fixed-chunk accumulation.
pub fn batch_loss_grad(
    model: &SimulatorModel,
    dataset: &OfflineDataset,
    batch: &[usize],
    weights: Option<&[f64]>,
    coeffs: &LossCoeffs,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let flat = model.flat_len();
    let inv_n = 1.0 / batch.len() as f64;
    let acc = exec::sum_vec_by(batch.len(), flat + 1, |i, acc| {
        let row = batch[i];
        let w = weights.map_or(1.0, |ws| ws[row]);
        let loss = accumulate_sample_grad(
            model,
            &dataset.rows[row],
            w,
            coeffs,
            inv_n,
            &mut acc[..flat],
        )
        .expect("validated batch row");
        acc[flat] += loss * inv_n;
    });
    let loss = acc[flat];
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("batch loss {loss}")));
    }
    Ok((loss, acc[..flat].to_vec()))
}

/// Mean unit-weight loss over a row set; used for validation.
pub fn mean_loss(
    model: &SimulatorModel,
    dataset: &OfflineDataset,
    rows: &[usize],
    coeffs: &LossCoeffs,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("rows"));
    }
    let sum = exec::sum_by(rows.len(), |i| {
        sample_loss_breakdown(model, &dataset.rows[rows[i]], coeffs)
            .expect("validated row")
            .total()
    });
    Ok(sum / rows.len() as f64)
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without val improvement before stopping; 0 disables.
    pub early_stopping_patience: usize,
    pub l2_penalty: f64,
    pub seed: u64,
}

impl Default for SimTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 256,
            early_stopping_patience: 5,
            l2_penalty: 1e-6,
            seed: 0,
        }
    }
}

impl SimTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning_rate = {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be ≥ 1".into()));
        }
        if !self.l2_penalty.is_finite() || self.l2_penalty < 0.0 {
            return Err(Error::InvalidConfig(format!("l2_penalty = {}", self.l2_penalty)));
        }
        Ok(())
    }
}

/// Per-epoch curve entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Weighted train loss, averaged over the epoch's samples.
    pub train_loss: f64,
    /// Unit-weight val loss.
    pub val_loss: f64,
    /// Unweighted reconstruction component, train mean.
    pub train_recon: f64,
}

/// Minibatch gradient descent on the mean weighted sample loss. Validation
/// always uses unit weights; the best-val snapshot is returned.
pub fn train_simulator(
    mut model: SimulatorModel,
    dataset: &OfflineDataset,
    config: &SimTrainConfig,
    weights: Option<&[f64]>,
    coeffs: &LossCoeffs,
) -> Result<(SimulatorModel, Vec<EpochStats>)> {
    config.validate()?;
    if let Some(ws) = weights {
        if ws.len() != dataset.rows.len() {
            return Err(Error::ShapeMismatch {
                context: "sample weights",
                expected: dataset.rows.len().to_string(),
                got: ws.len().to_string(),
            });
        }
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig("negative or non-finite sample weight".into()));
        }
    }
    let train = &dataset.splits.train;
    let val = &dataset.splits.val;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput("train or val split"));
    }

    let mut rng = seeds::rng(config.seed, "sim_train");
    let mut order = train.clone();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut recon_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, mut grad) = batch_loss_grad(&model, dataset, batch, weights, coeffs)?;
            if config.l2_penalty > 0.0 {
                let theta = model.to_flat();
                for (g, v) in grad.iter_mut().zip(&theta) {
                    *g += 2.0 * config.l2_penalty * v;
                }
            }
            model
                .sgd_step(&grad, config.learning_rate)
                .map_err(|_| Error::Divergence(format!("epoch {epoch}: non-finite update")))?;
            loss_sum += loss * batch.len() as f64;
            recon_sum += exec::sum_by(batch.len(), |i| {
                sample_loss_breakdown(&model, &dataset.rows[batch[i]], coeffs)
                    .expect("validated row")
                    .recon
            });
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = mean_loss(&model, dataset, val, coeffs)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "epoch {epoch}: train {train_loss}, val {val_loss}"
            )));
        }
        curve.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            train_recon: recon_sum / train.len() as f64,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if config.early_stopping_patience > 0 && since_best >= config.early_stopping_patience {
                break;
            }
        }
    }
    Ok((best, curve))
}

/// Risk / time / status accuracies plus their unweighted mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimAccuracy {
    pub risk: f64,
    pub time: f64,
    pub status: f64,
    pub overall: f64,
}

/// Unweighted mean of the three outcome accuracies.
pub fn overall_accuracy(risk: f64, time: f64, status: f64) -> f64 {
    (risk + time + status) / 3.0
}

/// Classification accuracy of the outcome heads: risk/status by
/// 0.5-threshold, time by argmax.
pub fn sim_accuracy(model: &SimulatorModel, rows: &[&Transition]) -> Result<SimAccuracy> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("sim_accuracy rows"));
    }
    let counts = exec::sum_vec_by(rows.len(), 3, |i, acc| {
        let t = rows[i];
        let out = model.sim_forward(&t.state, t.action).expect("validated row");
        acc[0] += f64::from(u8::from(out.risk_p > 0.5) == t.outcomes.delay_risk);
        let pred_time = argmax(&out.time_p);
        acc[1] += f64::from(pred_time == t.outcomes.delivery_time);
        acc[2] += f64::from(u8::from(out.status_p > 0.5) == t.outcomes.on_time_status);
    });
    let n = rows.len() as f64;
    let (risk, time, status) = (counts[0] / n, counts[1] / n, counts[2] / n);
    Ok(SimAccuracy {
        risk,
        time,
        status,
        overall: overall_accuracy(risk, time, status),
    })
}

/// First index of the maximum entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut arg = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if x > best {
            best = x;
            arg = i;
        }
    }
    arg
}

const SIM_FORMAT: &str = "robsim-simulator";
const SIM_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SimDoc {
    format: String,
    version: u32,
    d: usize,
    k: usize,
    c: usize,
    l: usize,
    components: serde_json::Map<String, serde_json::Value>,
}

const COMPONENT_NAMES: [&str; 8] = [
    "encoder",
    "cov_head",
    "next_state_head",
    "recon_head",
    "risk_head",
    "status_head",
    "time_head",
    "reward_head",
];

/// Writes the simulator as a schema header plus one embedded parameter
/// document per component.
pub fn save_simulator(path: &std::path::Path, model: &SimulatorModel) -> Result<()> {
    let mut components = serde_json::Map::new();
    for (name, params) in COMPONENT_NAMES.iter().zip(model.nets()) {
        components.insert(name.to_string(), params_to_value(params)?);
    }
    let doc = SimDoc {
        format: SIM_FORMAT.to_string(),
        version: SIM_VERSION,
        d: model.d,
        k: model.k,
        c: model.c,
        l: model.latent,
        components,
    };
    std::fs::write(path, serde_json::to_string(&doc)?)?;
    Ok(())
}

pub fn load_simulator(path: &std::path::Path) -> Result<SimulatorModel> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(origin.clone()))?;
    let doc: SimDoc = serde_json::from_str(&text).map_err(|e| Error::BadArtifact {
        file: origin.clone(),
        reason: e.to_string(),
    })?;
    if doc.format != SIM_FORMAT || doc.version != SIM_VERSION {
        return Err(Error::BadArtifact {
            file: origin,
            reason: format!("expected {SIM_FORMAT} v{SIM_VERSION}"),
        });
    }
    let mut nets = Vec::with_capacity(8);
    for name in COMPONENT_NAMES {
        let value = doc.components.get(name).ok_or_else(|| Error::BadArtifact {
            file: origin.clone(),
            reason: format!("missing component {name}"),
        })?;
        nets.push(params_from_value(value, &origin)?);
    }
    let model = SimulatorModel {
        d: doc.d,
        k: doc.k,
        c: doc.c,
        latent: doc.l,
        reward_head: nets.pop().unwrap(),
        time_head: nets.pop().unwrap(),
        status_head: nets.pop().unwrap(),
        risk_head: nets.pop().unwrap(),
        recon_head: nets.pop().unwrap(),
        next_state_head: nets.pop().unwrap(),
        cov_head: nets.pop().unwrap(),
        encoder: nets.pop().unwrap(),
    };
    let expect_in = model.d + model.k;
    if model.encoder.spec.input_width() != expect_in
        || model.encoder.spec.output_width() != model.latent
        || model.recon_head.spec.output_width() != model.d
        || model.time_head.spec.output_width() != model.c
    {
        return Err(Error::BadArtifact {
            file: path.display().to_string(),
            reason: "component shapes disagree with schema header".into(),
        });
    }
    Ok(model)
}
