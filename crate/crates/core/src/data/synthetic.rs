//! Synthetic order-level environment with controllable action-frequency
//! skew and label corruption concentrated on rare actions.
//!
//! Every label is a deterministic function of (state, action) through the
//! stored [`GroundTruth`]; noise and bias act on top of it. Evaluation
//! oracles read the ground truth, training code never does.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split, DatasetSchema, OfflineDataset, Outcomes, Transition, MIN_ROWS};
use crate::error::{Error, Result};
use crate::seeds;

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticEnvConfig {
    pub d: usize,
    pub k: usize,
    pub c: usize,
    pub n_rows: usize,
    /// ≥ 1. Action i is drawn with weight skew^(−i); 1 = uniform.
    pub action_frequency_skew: f64,
    /// Probability that a rare-action row's labels are corrupted.
    pub rare_action_label_bias: f64,
    /// Probability of independent label noise on any row.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticEnvConfig {
    fn default() -> Self {
        Self {
            d: 16,
            k: 4,
            c: 5,
            n_rows: 50_000,
            action_frequency_skew: 3.0,
            rare_action_label_bias: 0.0,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticEnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rows < MIN_ROWS {
            return Err(Error::InvalidConfig(format!(
                "n_rows = {} < {MIN_ROWS}",
                self.n_rows
            )));
        }
        if self.action_frequency_skew < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "action_frequency_skew = {} < 1",
                self.action_frequency_skew
            )));
        }
        for (name, p) in [
            ("rare_action_label_bias", self.rare_action_label_bias),
            ("label_noise", self.label_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} = {p} outside [0, 1]")));
            }
        }
        self.schema().validate()
    }

    fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            feature_names: (0..self.d).map(|i| format!("f{i}")).collect(),
            d: self.d,
            k: self.k,
            c: self.c,
            on_time_threshold: (self.c - 1) / 2,
        }
    }
}

/// One action's label functions: sigmoid scores over the state for risk,
/// delivery time, profit, plus a next-state drift vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTruth {
    pub w_risk: Vec<f64>,
    pub b_risk: f64,
    pub w_time: Vec<f64>,
    pub b_time: f64,
    pub w_profit: Vec<f64>,
    pub b_profit: f64,
    pub drift: Vec<f64>,
}

/// The generator's label functions, kept for evaluation oracles only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub c: usize,
    pub on_time_threshold: usize,
    pub state_decay: f64,
    pub actions: Vec<ActionTruth>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn score(w: &[f64], b: f64, s: &[f64]) -> f64 {
    let dot: f64 = w.iter().zip(s).map(|(wi, si)| wi * si).sum();
    sigmoid(dot + b)
}

impl GroundTruth {
    /// Random label functions whose sigmoid scores spread over (0, 1) for
    /// states uniform on [0, 1]^d.
    pub fn sample(d: usize, k: usize, c: usize, seed: u64) -> Self {
        let mut rng = seeds::rng(seed, "ground_truth");
        let scale = 7.2 / (d as f64).sqrt();
        let head = |rng: &mut rand_chacha::ChaCha8Rng| {
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-scale..scale)).collect();
            let center: f64 = 0.5 * w.iter().sum::<f64>();
            let b = rng.gen_range(-0.8..0.8) - center;
            (w, b)
        };
        let actions = (0..k)
            .map(|_| {
                let (w_risk, b_risk) = head(&mut rng);
                let (w_time, b_time) = head(&mut rng);
                let (w_profit, b_profit) = head(&mut rng);
                let drift: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..0.15)).collect();
                ActionTruth {
                    w_risk,
                    b_risk,
                    w_time,
                    b_time,
                    w_profit,
                    b_profit,
                    drift,
                }
            })
            .collect();
        Self {
            c,
            on_time_threshold: (c - 1) / 2,
            state_decay: 0.85,
            actions,
        }
    }

    /// Two-action environment: action 0 pays a high-mean, high-variance
    /// profit; action 1 a constant 0.45. Risk and time are identical across
    /// actions, so reward differences come from profit alone.
    pub fn contrast(d: usize, c: usize) -> Self {
        let steep: Vec<f64> = vec![8.0 / d as f64; d];
        let quiet = ActionTruth {
            w_risk: vec![0.0; d],
            b_risk: -4.0,
            w_time: vec![0.0; d],
            b_time: -4.0,
            w_profit: vec![0.0; d],
            // logit(0.45)
            b_profit: -0.200_670_695_462_151,
            drift: vec![0.0; d],
        };
        let mut loud = quiet.clone();
        loud.w_profit = steep;
        loud.b_profit = -3.2;
        Self {
            c,
            on_time_threshold: (c - 1) / 2,
            state_decay: 0.85,
            actions: vec![loud, quiet],
        }
    }

    /// Noise-free labels for (state, action).
    pub fn outcomes(&self, s: &[f64], a: usize) -> Outcomes {
        let t = &self.actions[a];
        let risk = u8::from(score(&t.w_risk, t.b_risk, s) > 0.5);
        let time_score = score(&t.w_time, t.b_time, s);
        let time = ((self.c as f64 * time_score) as usize).min(self.c - 1);
        let status = u8::from(time <= self.on_time_threshold);
        let profit = score(&t.w_profit, t.b_profit, s);
        Outcomes {
            delay_risk: risk,
            delivery_time: time,
            on_time_status: status,
            profit,
        }
    }

    /// Noise-free reward profit + status.
    pub fn reward(&self, s: &[f64], a: usize) -> f64 {
        let o = self.outcomes(s, a);
        o.profit + f64::from(o.on_time_status)
    }

    pub fn next_state(&self, s: &[f64], a: usize) -> Vec<f64> {
        let t = &self.actions[a];
        s.iter()
            .zip(&t.drift)
            .map(|(si, dr)| (self.state_decay * si + dr).clamp(0.0, 1.0))
            .collect()
    }

    /// Best action and its reward under the true label functions.
    pub fn best(&self, s: &[f64]) -> (usize, f64) {
        let mut arg = 0;
        let mut best = f64::NEG_INFINITY;
        for a in 0..self.actions.len() {
            let r = self.reward(s, a);
            if r > best {
                best = r;
                arg = a;
            }
        }
        (arg, best)
    }
}

/// Action ids whose labels the bias corrupts: the ⌈K/4⌉ least frequent.
pub fn rare_actions(k: usize) -> std::ops::Range<usize> {
    k - k.div_ceil(4)..k
}

/// Sampling weights skew^(−i), normalized.
fn action_probs(k: usize, skew: f64) -> Vec<f64> {
    let weights: Vec<f64> = (0..k).map(|i| skew.powi(-(i as i32))).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Generates a dataset from freshly sampled label functions.
pub fn generate_synthetic(config: &SyntheticEnvConfig) -> Result<OfflineDataset> {
    let truth = GroundTruth::sample(config.d, config.k, config.c, config.seed);
    generate_with_truth(config, truth)
}

/// Generates a dataset from explicit label functions.
pub fn generate_with_truth(config: &SyntheticEnvConfig, truth: GroundTruth) -> Result<OfflineDataset> {
    config.validate()?;
    if truth.actions.len() != config.k || truth.c != config.c {
        return Err(Error::InvalidConfig(format!(
            "ground truth covers {} actions / {} classes, config wants {} / {}",
            truth.actions.len(),
            truth.c,
            config.k,
            config.c
        )));
    }
    let mut schema = config.schema();
    schema.on_time_threshold = truth.on_time_threshold;
    schema.validate()?;

    let probs = action_probs(config.k, config.action_frequency_skew);
    let rare = rare_actions(config.k);
    let mut rng = seeds::rng(config.seed, "generate");
    let mut rows = Vec::with_capacity(config.n_rows);
    for _ in 0..config.n_rows {
        let state: Vec<f64> = (0..config.d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let action = sample_categorical(&probs, rng.gen_range(0.0..1.0));
        let mut o = truth.outcomes(&state, action);

        if config.label_noise > 0.0 {
            if rng.gen_bool(config.label_noise) {
                o.delay_risk = 1 - o.delay_risk;
            }
            if rng.gen_bool(config.label_noise) {
                o.delivery_time = resample_class(&mut rng, o.delivery_time, config.c);
            }
        }
        if rare.contains(&action)
            && config.rare_action_label_bias > 0.0
            && rng.gen_bool(config.rare_action_label_bias)
        {
            o.delay_risk = 1 - o.delay_risk;
            o.delivery_time = resample_class(&mut rng, o.delivery_time, config.c);
            o.profit = 1.0 - o.profit;
        }
        o.on_time_status = u8::from(o.delivery_time <= truth.on_time_threshold);

        let reward = o.profit + f64::from(o.on_time_status);
        rows.push(Transition {
            next_state: truth.next_state(&state, action),
            state,
            action,
            outcomes: o,
            reward,
        });
    }

    let ds = OfflineDataset {
        schema,
        splits: split(rows.len(), config.seed)?,
        rows,
        ground_truth: Some(truth),
    };
    ds.validate()?;
    Ok(ds)
}

/// Uniform draw over the other C−1 classes.
fn resample_class(rng: &mut rand_chacha::ChaCha8Rng, current: usize, c: usize) -> usize {
    let pick = rng.gen_range(0..c - 1);
    if pick >= current {
        pick + 1
    } else {
        pick
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(ds: &OfflineDataset) -> Vec<usize> {
        let mut counts = vec![0usize; ds.schema.k];
        for row in &ds.rows {
            counts[row.action] += 1;
        }
        counts
    }

    #[test]
    fn unit_skew_gives_uniform_frequencies() {
        let cfg = SyntheticEnvConfig {
            action_frequency_skew: 1.0,
            n_rows: 50_000,
            seed: 3,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for count in counts(&ds) {
            let freq = count as f64 / 50_000.0;
            assert!((freq - 0.25).abs() < 0.03, "freq {freq}");
        }
    }

    #[test]
    fn skew_orders_frequencies_and_rare_set_is_last() {
        let cfg = SyntheticEnvConfig {
            n_rows: 20_000,
            seed: 4,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let counts = counts(&ds);
        for w in counts.windows(2) {
            assert!(w[0] > w[1], "counts not decreasing: {counts:?}");
        }
        assert_eq!(rare_actions(4), 3..4);
        assert_eq!(rare_actions(5), 3..5);
        assert_eq!(rare_actions(16), 12..16);
    }

    #[test]
    fn rare_bias_flips_half_the_rare_rows() {
        let cfg = SyntheticEnvConfig {
            action_frequency_skew: 2.0,
            rare_action_label_bias: 0.5,
            n_rows: 50_000,
            seed: 11,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let truth = ds.ground_truth.as_ref().unwrap();
        let rare = rare_actions(cfg.k);
        let (mut rare_rows, mut flipped) = (0usize, 0usize);
        for row in &ds.rows {
            if rare.contains(&row.action) {
                rare_rows += 1;
                if row.outcomes != truth.outcomes(&row.state, row.action) {
                    flipped += 1;
                }
            }
        }
        assert!(rare_rows > 2_000, "rare rows {rare_rows}");
        let rate = flipped as f64 / rare_rows as f64;
        assert!((rate - 0.5).abs() < 0.02, "flip rate {rate}");
        // Non-rare rows stay clean.
        for row in ds.rows.iter().filter(|r| !rare.contains(&r.action)) {
            assert_eq!(row.outcomes, truth.outcomes(&row.state, row.action));
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = SyntheticEnvConfig {
            n_rows: 500,
            rare_action_label_bias: 0.3,
            label_noise: 0.1,
            seed: 21,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.splits, b.splits);
        let c = generate_synthetic(&SyntheticEnvConfig { seed: 22, ..cfg }).unwrap();
        assert_ne!(a.rows, c.rows);
    }

    #[test]
    fn zero_noise_rows_reproduce_ground_truth_rewards_exactly() {
        let cfg = SyntheticEnvConfig {
            n_rows: 1_000,
            seed: 8,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let truth = ds.ground_truth.as_ref().unwrap();
        for row in &ds.rows {
            let r = truth.reward(&row.state, row.action);
            assert_eq!(r.to_bits(), row.reward.to_bits());
            assert_eq!(truth.next_state(&row.state, row.action), row.next_state);
        }
    }

    #[test]
    fn config_bounds_are_enforced() {
        let ok = SyntheticEnvConfig::default();
        assert!(SyntheticEnvConfig { n_rows: 19, ..ok.clone() }.validate().is_err());
        assert!(SyntheticEnvConfig {
            action_frequency_skew: 0.5,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SyntheticEnvConfig {
            rare_action_label_bias: 1.5,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SyntheticEnvConfig { k: 1, ..ok.clone() }.validate().is_err());
        assert!(SyntheticEnvConfig { k: 17, ..ok }.validate().is_err());
    }

    #[test]
    fn contrast_env_separates_profit_mean_and_variance() {
        let cfg = SyntheticEnvConfig {
            d: 8,
            k: 2,
            n_rows: 4_000,
            action_frequency_skew: 1.0,
            seed: 5,
            ..Default::default()
        };
        let ds = generate_with_truth(&cfg, GroundTruth::contrast(8, 5)).unwrap();
        let mut by_action: [Vec<f64>; 2] = [vec![], vec![]];
        for row in &ds.rows {
            by_action[row.action].push(row.outcomes.profit);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        for p in &by_action[1] {
            assert!((p - 0.45).abs() < 1e-12);
        }
        assert!(mean(&by_action[0]) > 0.6, "loud mean {}", mean(&by_action[0]));
        assert!(var(&by_action[0]) > 0.01, "loud var {}", var(&by_action[0]));
        // Identical time labels keep every row on time.
        for row in &ds.rows {
            assert_eq!(row.outcomes.on_time_status, 1);
        }
    }
}
