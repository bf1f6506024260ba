//! Stochastic discrete decision policy trained by group-relative
//! perturbation.
//!
//! For each nominal state the simulator supplies a latent mean and diagonal
//! covariance; M latents drawn from that Gaussian decode into a group of
//! perturbed states. The policy acts on every member, and each member's
//! simulator reward is scored against the group mean, so actions are
//! reinforced only where they beat the local average. A separate utility
//! gap term pushes the expected simulator reward at the nominal state
//! toward a reference target. The composite loss is
//! η · group-advantage + utility-gap.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{OfflineDataset, Split, Transition};
use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::checkpoint::{load_params, save_params};
use crate::numerics::{
    backward, forward, forward_cache, init_params, Activation, ModelSpec, OutputActivation,
    Params,
};
use crate::seeds;
use crate::simulator::SimulatorModel;

/// Log-probability floor for actions the policy has (numerically) ruled
/// out; clamped members contribute no gradient and are counted.
pub const LOG_PROB_FLOOR: f64 = -30.0;

/// Policy network mapping a state to a distribution over K actions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub net: Params,
}

impl PolicyModel {
    pub fn init(d: usize, k: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(d);
        widths.extend_from_slice(hidden);
        widths.push(k);
        let spec = ModelSpec::new(&widths, Activation::Tanh, OutputActivation::Softmax);
        Ok(Self {
            net: init_params(&spec, seed)?,
        })
    }

    /// All-zero parameters: uniform action distribution for every state.
    pub fn zeros(d: usize, k: usize, hidden: &[usize]) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(d);
        widths.extend_from_slice(hidden);
        widths.push(k);
        let spec = ModelSpec::new(&widths, Activation::Tanh, OutputActivation::Softmax);
        Ok(Self {
            net: Params::zeros(spec)?,
        })
    }

    pub fn d(&self) -> usize {
        self.net.spec.input_width()
    }

    pub fn k(&self) -> usize {
        self.net.spec.output_width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.net.spec.output != OutputActivation::Softmax {
            return Err(Error::InvalidConfig(
                "policy output must be a softmax distribution".into(),
            ));
        }
        Ok(())
    }
}

/// D(· | s): action distribution for one state.
pub fn policy_forward(policy: &PolicyModel, s: &[f64]) -> Result<Vec<f64>> {
    forward(&policy.net, s)
}

/// Greedy action: argmax of the policy distribution, lowest index on ties.
pub fn policy_action(policy: &PolicyModel, s: &[f64]) -> Result<usize> {
    Ok(crate::simulator::argmax(&policy_forward(policy, s)?))
}

/// One group of latent perturbations around a nominal state.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationGroup {
    pub nominal: Vec<f64>,
    pub latents: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub mean_reward: f64,
}

impl PerturbationGroup {
    pub fn m(&self) -> usize {
        self.latents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if m < 2 {
            return Err(Error::InvalidConfig(format!(
                "perturbation group needs at least 2 members, got {m}"
            )));
        }
        if self.states.len() != m || self.actions.len() != m || self.rewards.len() != m {
            return Err(Error::ShapeMismatch {
                context: "perturbation group",
                expected: m.to_string(),
                got: format!(
                    "{} states, {} actions, {} rewards",
                    self.states.len(),
                    self.actions.len(),
                    self.rewards.len()
                ),
            });
        }
        let mean = self.rewards.iter().sum::<f64>() / m as f64;
        if mean != self.mean_reward {
            return Err(Error::InvalidConfig(format!(
                "group mean reward {} does not recompute to {mean}",
                self.mean_reward
            )));
        }
        Ok(())
    }
}

/// Reference target for the utility gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// r* = max_a S^r(s, a) at each state.
    PerStateMax,
    /// r* = the maximum train-split reward, fixed across states.
    DatasetMax,
}

/// Resolved target: either recomputed per state or a fixed scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetRef {
    PerStateMax,
    Fixed(f64),
}

/// Group-relative training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionTrainConfig {
    /// M, members per perturbation group.
    pub group_size: usize,
    /// η, weight of the group-advantage term.
    pub advantage_coeff: f64,
    /// Multiplier on the simulator covariance; 0 disables perturbation.
    pub perturb_scale: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub target_rule: TargetRule,
    pub seed: u64,
}

impl Default for DecisionTrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            advantage_coeff: 1.0,
            perturb_scale: 1.0,
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 128,
            target_rule: TargetRule::PerStateMax,
            seed: 0,
        }
    }
}

impl DecisionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "group size must be at least 2, got {}",
                self.group_size
            )));
        }
        if !self.advantage_coeff.is_finite() || self.advantage_coeff < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "advantage coefficient must be non-negative, got {}",
                self.advantage_coeff
            )));
        }
        if !self.perturb_scale.is_finite() || self.perturb_scale < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "perturbation scale must be non-negative, got {}",
                self.perturb_scale
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples one perturbation group around `s`. The nominal latent comes
/// from encode(s, a₀) with a₀ drawn from the policy at s; M latents are
/// drawn from N(z, perturb_scale²·Σ), decoded to states, and acted on by
/// the policy; member rewards come from the simulator reward head.
pub fn sample_group(
    simulator: &SimulatorModel,
    policy: &PolicyModel,
    s: &[f64],
    config: &DecisionTrainConfig,
    seed: u64,
) -> Result<PerturbationGroup> {
    config.validate()?;
    let m = config.group_size;
    let mut rng = seeds::rng(seed, "group");
    let nominal_probs = policy_forward(policy, s)?;
    let a0 = sample_categorical(&mut rng, &nominal_probs);
    let (z, cov) = simulator.encode(s, a0)?;
    let scale_sq = config.perturb_scale * config.perturb_scale;
    let scaled: Vec<f64> = cov.iter().map(|c| scale_sq * c).collect();
    let latents =
        crate::numerics::sample_gaussian(&z, &scaled, m, seeds::derive(seed, "group_latents"))?;
    let mut states = Vec::with_capacity(m);
    let mut actions = Vec::with_capacity(m);
    let mut rewards = Vec::with_capacity(m);
    for zi in &latents {
        let si = simulator.decode_state(zi)?;
        let probs = policy_forward(policy, &si)?;
        let ai = sample_categorical(&mut rng, &probs);
        rewards.push(simulator.predict_reward(&si, ai)?);
        states.push(si);
        actions.push(ai);
    }
    let mean_reward = rewards.iter().sum::<f64>() / m as f64;
    Ok(PerturbationGroup {
        nominal: s.to_vec(),
        latents,
        states,
        actions,
        rewards,
        mean_reward,
    })
}

/// Group-advantage loss value plus clamp diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupAdvLoss {
    pub value: f64,
    /// Members whose taken-action probability hit the log floor.
    pub clamped: usize,
}

/// −(1/M) Σ_i (r_i − r̄) · log D(a_i | s̃_i). Advantages are constants;
/// only the log-probabilities carry gradient.
pub fn group_adv_loss(group: &PerturbationGroup, policy: &PolicyModel) -> Result<GroupAdvLoss> {
    group.validate()?;
    let m = group.m() as f64;
    let mut value = 0.0;
    let mut clamped = 0;
    for i in 0..group.m() {
        let probs = policy_forward(policy, &group.states[i])?;
        let p = probs.get(group.actions[i]).copied().ok_or(Error::ShapeMismatch {
            context: "group action",
            expected: format!("< {}", probs.len()),
            got: group.actions[i].to_string(),
        })?;
        let lp = p.ln();
        let lp = if lp < LOG_PROB_FLOOR {
            clamped += 1;
            LOG_PROB_FLOOR
        } else {
            lp
        };
        value -= (group.rewards[i] - group.mean_reward) * lp / m;
    }
    Ok(GroupAdvLoss { value, clamped })
}

/// Gradient of −(1/M) Σ_i (r_i − baseline) · log D(a_i | s̃_i) over the
/// policy parameters. `baseline = r̄` gives the group-advantage estimator;
/// `baseline = 0` gives the absolute-reward estimator it is compared
/// against. Floor-clamped members contribute nothing.
pub fn group_score_gradient(
    group: &PerturbationGroup,
    policy: &PolicyModel,
    baseline: f64,
) -> Result<Vec<f64>> {
    group.validate()?;
    let m = group.m() as f64;
    let mut grad = vec![0.0; policy.net.values.len()];
    for i in 0..group.m() {
        let cache = forward_cache(&policy.net, &group.states[i])?;
        let p = cache.output()[group.actions[i]];
        if p.ln() < LOG_PROB_FLOOR {
            continue;
        }
        let mut dl_dy = vec![0.0; cache.output().len()];
        dl_dy[group.actions[i]] = -(group.rewards[i] - baseline) / (m * p);
        let (g, _) = backward(&policy.net, &cache, &dl_dy)?;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    Ok(grad)
}

fn per_state_max(simulator: &SimulatorModel, s: &[f64]) -> Result<(Vec<f64>, f64)> {
    let k = simulator.k;
    let mut q = Vec::with_capacity(k);
    for a in 0..k {
        q.push(simulator.predict_reward(s, a)?);
    }
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((q, best))
}

/// r* − Σ_a D(a|s) · S^r(s, a): the regret of the policy's expected
/// simulator reward at the nominal state against the reference target.
pub fn utility_gap(
    simulator: &SimulatorModel,
    policy: &PolicyModel,
    s: &[f64],
    target: &TargetRef,
) -> Result<f64> {
    let (q, best) = per_state_max(simulator, s)?;
    let r_star = match target {
        TargetRef::PerStateMax => best,
        TargetRef::Fixed(v) => *v,
    };
    let probs = policy_forward(policy, s)?;
    let expected: f64 = probs.iter().zip(&q).map(|(p, qa)| p * qa).sum();
    Ok(r_star - expected)
}

/// Component breakdown of one decision loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionLossParts {
    pub total: f64,
    pub adv_term: f64,
    pub gap_term: f64,
    pub clamped: usize,
}

/// η · group-advantage + utility-gap at the group's nominal state.
pub fn decision_loss(
    group: &PerturbationGroup,
    policy: &PolicyModel,
    simulator: &SimulatorModel,
    eta: f64,
    target: &TargetRef,
) -> Result<DecisionLossParts> {
    let adv = group_adv_loss(group, policy)?;
    let gap = utility_gap(simulator, policy, &group.nominal, target)?;
    Ok(DecisionLossParts {
        total: eta * adv.value + gap,
        adv_term: adv.value,
        gap_term: gap,
        clamped: adv.clamped,
    })
}

/// Decision loss plus its gradient over the policy parameters.
pub fn decision_loss_grad(
    group: &PerturbationGroup,
    policy: &PolicyModel,
    simulator: &SimulatorModel,
    eta: f64,
    target: &TargetRef,
) -> Result<(DecisionLossParts, Vec<f64>)> {
    let parts = decision_loss(group, policy, simulator, eta, target)?;
    let mut grad = group_score_gradient(group, policy, group.mean_reward)?;
    for g in &mut grad {
        *g *= eta;
    }
    // Gap term: d/dθ of −Σ_a D(a|s)·q_a; r* is constant under both rules.
    let (q, _) = per_state_max(simulator, &group.nominal)?;
    let cache = forward_cache(&policy.net, &group.nominal)?;
    let dl_dy: Vec<f64> = q.iter().map(|qa| -qa).collect();
    let (g_gap, _) = backward(&policy.net, &cache, &dl_dy)?;
    for (acc, gi) in grad.iter_mut().zip(&g_gap) {
        *acc += gi;
    }
    Ok((parts, grad))
}

/// Deployment selector over a sampled group: the action of the member
/// with the highest simulator reward, earliest member on ties.
pub fn group_best_action(group: &PerturbationGroup) -> Result<usize> {
    group.validate()?;
    let best = crate::simulator::argmax(&group.rewards);
    Ok(group.actions[best])
}

/// One logged training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub adv_term: f64,
    pub gap_term: f64,
    pub val_expected_reward: f64,
}

/// Mean over rows of the policy's expected simulator reward
/// Σ_a D(a|s) · S^r(s, a).
pub fn expected_reward(
    simulator: &SimulatorModel,
    policy: &PolicyModel,
    rows: &[&Transition],
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("expected-reward rows"));
    }
    let total = exec::sum_by(rows.len(), |i| {
        let s = &rows[i].state;
        let (q, _) = per_state_max(simulator, s).expect("validated row");
        let probs = policy_forward(policy, s).expect("validated row");
        probs.iter().zip(&q).map(|(p, qa)| p * qa).sum()
    });
    Ok(total / rows.len() as f64)
}

/// Group-relative policy training. Each batch samples a perturbation
/// group per state (skipped entirely when η = 0, where the advantage term
/// vanishes), averages decision-loss gradients, and descends. Returns the
/// epoch snapshot with the highest validation expected reward.
pub fn train_policy(
    policy: PolicyModel,
    simulator: &SimulatorModel,
    dataset: &OfflineDataset,
    config: &DecisionTrainConfig,
) -> Result<(PolicyModel, Vec<PolicyEpoch>)> {
    config.validate()?;
    policy.validate()?;
    let train = dataset.split_indices(Split::Train);
    let val: Vec<&Transition> = dataset.split_rows(Split::Val).collect();
    if train.is_empty() {
        return Err(Error::EmptyInput("train split"));
    }
    if val.is_empty() {
        return Err(Error::EmptyInput("validation split"));
    }
    let target = match config.target_rule {
        TargetRule::PerStateMax => TargetRef::PerStateMax,
        TargetRule::DatasetMax => {
            let best = train
                .iter()
                .map(|&i| dataset.rows[i].reward)
                .fold(f64::NEG_INFINITY, f64::max);
            TargetRef::Fixed(best)
        }
    };

    use rand::seq::SliceRandom;
    let mut rng = seeds::rng(config.seed, "policy_train");
    let mut order: Vec<usize> = train.to_vec();
    let mut current = policy;
    let n_params = current.net.values.len();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best = current.clone();
    let mut best_val = expected_reward(simulator, &current, &val)?;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut adv_sum = 0.0;
        let mut gap_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            let seeds_for: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let inv_n = 1.0 / batch.len() as f64;
            let acc = exec::sum_vec_by(batch.len(), n_params + 3, |i, acc| {
                let row = &dataset.rows[batch[i]];
                let (parts, grad) = if config.advantage_coeff == 0.0 {
                    let gap =
                        utility_gap(simulator, &current, &row.state, &target).expect("valid row");
                    let (q, _) = per_state_max(simulator, &row.state).expect("valid row");
                    let cache = forward_cache(&current.net, &row.state).expect("valid row");
                    let dl_dy: Vec<f64> = q.iter().map(|qa| -qa).collect();
                    let (g, _) = backward(&current.net, &cache, &dl_dy).expect("valid row");
                    (
                        DecisionLossParts {
                            total: gap,
                            adv_term: 0.0,
                            gap_term: gap,
                            clamped: 0,
                        },
                        g,
                    )
                } else {
                    let group =
                        sample_group(simulator, &current, &row.state, config, seeds_for[i])
                            .expect("valid row");
                    decision_loss_grad(&group, &current, simulator, config.advantage_coeff, &target)
                        .expect("valid row")
                };
                for (a, g) in acc[..n_params].iter_mut().zip(&grad) {
                    *a += inv_n * g;
                }
                acc[n_params] += inv_n * parts.total;
                acc[n_params + 1] += inv_n * parts.adv_term;
                acc[n_params + 2] += inv_n * parts.gap_term;
            });
            let batch_loss = acc[n_params];
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "policy epoch {epoch}: batch loss {batch_loss}"
                )));
            }
            current.net.sgd_step(&acc[..n_params], config.learning_rate)?;
            loss_sum += batch_loss * batch.len() as f64;
            adv_sum += acc[n_params + 1] * batch.len() as f64;
            gap_sum += acc[n_params + 2] * batch.len() as f64;
            seen += batch.len();
        }
        let val_expected_reward = expected_reward(simulator, &current, &val)?;
        trace.push(PolicyEpoch {
            epoch,
            loss: loss_sum / seen as f64,
            adv_term: adv_sum / seen as f64,
            gap_term: gap_sum / seen as f64,
            val_expected_reward,
        });
        if val_expected_reward > best_val {
            best_val = val_expected_reward;
            best = current.clone();
        }
    }
    Ok((best, trace))
}

pub fn save_policy(path: &std::path::Path, policy: &PolicyModel) -> Result<()> {
    save_params(path, &policy.net)
}

pub fn load_policy(path: &std::path::Path) -> Result<PolicyModel> {
    let policy = PolicyModel {
        net: load_params(path)?,
    };
    policy.validate()?;
    Ok(policy)
}
