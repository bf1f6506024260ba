//! Perturbation mechanisms, robustness scoring, decision metrics, CVaR,
//! perturbation sweeps, and the δ-gate report.
//!
//! Two perturbation kinds are evaluated: `random_input` adds clamped
//! Gaussian noise directly to the state, and `latent_structured` resamples
//! the simulator's latent, z′ ~ N(z, p²·Σ(s, a)), and decodes it. For the
//! latent kind the magnitude-0 "nominal" point is the decoded unperturbed
//! latent mean, so a zero-magnitude sweep entry and the robustness score's
//! baseline are exactly self-consistent.
//!
//! The robustness score R is the negated expected degradation in predicted
//! rewards between nominal and perturbed states under the deterministic
//! argmax policy; the gate passes iff R exceeds the configured δ strictly.

use std::io::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{GroundTruth, Transition};
use crate::error::{Error, Result};
use crate::exec;
use crate::policy::{policy_forward, PolicyModel};
use crate::seeds;
use crate::simulator::{argmax, sim_accuracy, SimulatorModel};
use rand_distr::StandardNormal;

/// Perturbation mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    /// z′ ~ N(z, p²·Σ(s, a)), decoded back to a state.
    LatentStructured,
    /// s′ = clamp(s + ε·N(0, I), [0, 1]).
    RandomInput,
}

impl PerturbKind {
    pub fn label(&self) -> &'static str {
        match self {
            PerturbKind::LatentStructured => "latent_structured",
            PerturbKind::RandomInput => "random_input",
        }
    }
}

/// One perturbation setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    /// ε for input noise, p for the latent covariance multiplier.
    pub magnitude: f64,
    /// Perturbed samples drawn per state.
    pub samples: usize,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.magnitude.is_finite() || self.magnitude < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "perturbation magnitude must be non-negative, got {}",
                self.magnitude
            )));
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig(
                "perturbation needs at least one sample per state".into(),
            ));
        }
        Ok(())
    }
}

/// The states each kind degrades from: the raw states for input noise, the
/// decoded unperturbed latent means for the latent kind.
pub fn nominal_states(
    kind: PerturbKind,
    simulator: &SimulatorModel,
    states: &[Vec<f64>],
    policy: &PolicyModel,
) -> Result<Vec<Vec<f64>>> {
    match kind {
        PerturbKind::RandomInput => Ok(states.to_vec()),
        PerturbKind::LatentStructured => states
            .iter()
            .map(|s| {
                let a = argmax(&policy_forward(policy, s)?);
                let (z, _) = simulator.encode(s, a)?;
                simulator.decode_state(&z)
            })
            .collect(),
    }
}

/// Draws `spec.samples` perturbed variants of every state. The latent kind
/// conditions encode(s, a) on the policy's argmax action.
pub fn perturb_states(
    spec: &PerturbSpec,
    simulator: &SimulatorModel,
    states: &[Vec<f64>],
    policy: &PolicyModel,
) -> Result<Vec<Vec<Vec<f64>>>> {
    spec.validate()?;
    if states.is_empty() {
        return Err(Error::EmptyInput("states to perturb"));
    }
    match spec.kind {
        PerturbKind::RandomInput => Ok(exec::map_collect(states.len(), |i| {
            let mut rng = seeds::rng_idx(spec.seed, "input_noise", i as u64);
            (0..spec.samples)
                .map(|_| {
                    states[i]
                        .iter()
                        .map(|&v| {
                            let noise: f64 = rand::Rng::sample(&mut rng, StandardNormal);
                            (v + spec.magnitude * noise).clamp(0.0, 1.0)
                        })
                        .collect()
                })
                .collect()
        })),
        PerturbKind::LatentStructured => {
            let scale_sq = spec.magnitude * spec.magnitude;
            let out = exec::map_collect(states.len(), |i| {
                let s = &states[i];
                let a = argmax(&policy_forward(policy, s).expect("validated state"));
                let (z, cov) = simulator.encode(s, a).expect("validated state");
                let scaled: Vec<f64> = cov.iter().map(|c| scale_sq * c).collect();
                let latents = crate::numerics::sample_gaussian(
                    &z,
                    &scaled,
                    spec.samples,
                    seeds::derive_idx(spec.seed, i as u64),
                )
                .expect("non-negative covariance");
                latents
                    .iter()
                    .map(|zi| simulator.decode_state(zi).expect("validated latent"))
                    .collect()
            });
            Ok(out)
        }
    }
}

/// R: the negated mean degradation S^r(s, D(s)) − S^r(s′, D(s′)) over all
/// probe states and perturbation samples, with D the argmax policy and s
/// the kind's nominal point. R ≤ 0 means degradation on average.
pub fn robustness_score(
    policy: &PolicyModel,
    simulator: &SimulatorModel,
    probes: &[Vec<f64>],
    spec: &PerturbSpec,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::EmptyInput("probe states"));
    }
    let nominals = nominal_states(spec.kind, simulator, probes, policy)?;
    let perturbed = perturb_states(spec, simulator, probes, policy)?;
    let nominal_rewards: Vec<f64> = nominals
        .iter()
        .map(|s| {
            let a = argmax(&policy_forward(policy, s)?);
            simulator.predict_reward(s, a)
        })
        .collect::<Result<_>>()?;
    let count = probes.len() * spec.samples;
    let total = exec::sum_by(count, |idx| {
        let i = idx / spec.samples;
        let j = idx % spec.samples;
        let s = &perturbed[i][j];
        let a = argmax(&policy_forward(policy, s).expect("validated state"));
        let r = simulator.predict_reward(s, a).expect("validated state");
        nominal_rewards[i] - r
    });
    if !total.is_finite() {
        return Err(Error::Divergence(format!("robustness score sum {total}")));
    }
    let r = -(total / count as f64);
    Ok(if r == 0.0 { 0.0 } else { r })
}

/// Aggregate decision quality: on-time rate and profit of chosen actions,
/// both in [0, 1], plus their absolute difference and sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionMetrics {
    pub timely: f64,
    pub profit: f64,
    pub diff: f64,
    pub overall: f64,
}

impl DecisionMetrics {
    pub fn new(timely: f64, profit: f64) -> Self {
        Self {
            timely,
            profit,
            diff: (profit - timely).abs(),
            overall: timely + profit,
        }
    }
}

/// Outcome source for decision metrics: the synthetic generator's ground
/// truth, or the simulator's own outcome heads (predicted on-time
/// probability; profit as predicted reward minus that probability).
#[derive(Debug, Clone, Copy)]
pub enum OutcomeOracle<'a> {
    GroundTruth(&'a GroundTruth),
    Simulator(&'a SimulatorModel),
}

impl OutcomeOracle<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            OutcomeOracle::GroundTruth(_) => "ground_truth",
            OutcomeOracle::Simulator(_) => "simulator",
        }
    }

    /// (timely, profit) for taking action `a` in state `s`.
    pub fn timely_profit(&self, s: &[f64], a: usize) -> Result<(f64, f64)> {
        match self {
            OutcomeOracle::GroundTruth(truth) => {
                let o = truth.outcomes(s, a);
                Ok((o.on_time_status as f64, o.profit))
            }
            OutcomeOracle::Simulator(model) => {
                let out = model.sim_forward(s, a)?;
                Ok((out.status_p, (out.reward - out.status_p).clamp(0.0, 1.0)))
            }
        }
    }
}

/// Metrics of the deterministic argmax policy over a set of states.
pub fn decision_metrics_for_states(
    policy: &PolicyModel,
    states: &[Vec<f64>],
    oracle: &OutcomeOracle,
) -> Result<DecisionMetrics> {
    if states.is_empty() {
        return Err(Error::EmptyInput("evaluation states"));
    }
    let pairs = exec::map_collect(states.len(), |i| {
        let s = &states[i];
        let a = argmax(&policy_forward(policy, s).expect("validated state"));
        oracle.timely_profit(s, a).expect("validated state")
    });
    let n = states.len() as f64;
    let timely = exec::sum_by(pairs.len(), |i| pairs[i].0) / n;
    let profit = exec::sum_by(pairs.len(), |i| pairs[i].1) / n;
    Ok(DecisionMetrics::new(timely, profit))
}

/// Metrics over evaluation rows; only the stored states are read, the
/// outcomes come from the oracle.
pub fn decision_metrics(
    policy: &PolicyModel,
    rows: &[&Transition],
    oracle: &OutcomeOracle,
) -> Result<DecisionMetrics> {
    let states: Vec<Vec<f64>> = rows.iter().map(|t| t.state.clone()).collect();
    decision_metrics_for_states(policy, &states, oracle)
}

/// Metrics of the stochastic policy itself: per state, outcomes of every
/// action weighted by its probability. An untrained uniform policy scores
/// the plain per-action average.
pub fn expected_decision_metrics(
    policy: &PolicyModel,
    rows: &[&Transition],
    oracle: &OutcomeOracle,
) -> Result<DecisionMetrics> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("evaluation rows"));
    }
    let k = policy.k();
    let pairs = exec::map_collect(rows.len(), |i| {
        let s = &rows[i].state;
        let probs = policy_forward(policy, s).expect("validated state");
        let mut timely = 0.0;
        let mut profit = 0.0;
        for (a, p) in probs.iter().enumerate().take(k) {
            let (t, pr) = oracle.timely_profit(s, a).expect("validated state");
            timely += p * t;
            profit += p * pr;
        }
        (timely, profit)
    });
    let n = rows.len() as f64;
    let timely = exec::sum_by(pairs.len(), |i| pairs[i].0) / n;
    let profit = exec::sum_by(pairs.len(), |i| pairs[i].1) / n;
    Ok(DecisionMetrics::new(timely, profit))
}

/// Mean of the ⌈α·n⌉ smallest returns.
pub fn cvar(returns: &[f64], alpha: f64) -> Result<f64> {
    if returns.is_empty() {
        return Err(Error::EmptyInput("returns"));
    }
    if !(0.0..=1.0).contains(&alpha) || alpha == 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "tail fraction must lie in (0, 1], got {alpha}"
        )));
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("returns"));
    }
    let mut sorted = returns.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite returns"));
    let tail = (alpha * returns.len() as f64).ceil() as usize;
    let tail = tail.clamp(1, returns.len());
    Ok(sorted[..tail].iter().sum::<f64>() / tail as f64)
}

/// Worst case, spread, and decline of a metric across perturbed runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessStats {
    /// Minimum across runs.
    pub worst_case: f64,
    /// Population standard deviation across runs.
    pub variance: f64,
    /// Unperturbed value minus the mean across runs.
    pub drop_rate: f64,
}

/// Aggregates per-run overall scores against the unperturbed nominal.
pub fn robustness_stats(nominal: f64, overalls: &[f64]) -> Result<RobustnessStats> {
    if overalls.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "robustness statistics need at least 2 runs, got {}",
            overalls.len()
        )));
    }
    let n = overalls.len() as f64;
    let mean = overalls.iter().sum::<f64>() / n;
    let var = overalls.iter().map(|o| (o - mean) * (o - mean)).sum::<f64>() / n;
    Ok(RobustnessStats {
        worst_case: overalls.iter().copied().fold(f64::INFINITY, f64::min),
        variance: var.sqrt(),
        drop_rate: nominal - mean,
    })
}

/// Simulator accuracy robustness at one perturbation level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimRobustnessLevel {
    pub level: f64,
    pub worst_case: f64,
    pub variance: f64,
    pub drop_rate: f64,
}

/// Overall simulator accuracy under input noise: per level, `runs` seeded
/// reruns perturb the test states (targets unchanged) and the overall
/// accuracies are reduced to worst case / spread / drop against the
/// unperturbed nominal.
pub fn sim_robustness(
    model: &SimulatorModel,
    rows: &[&Transition],
    levels: &[f64],
    runs: usize,
    seed: u64,
) -> Result<Vec<SimRobustnessLevel>> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("evaluation rows"));
    }
    if runs < 2 {
        return Err(Error::InvalidConfig(format!(
            "sim robustness needs at least 2 runs per level, got {runs}"
        )));
    }
    for &level in levels {
        if !level.is_finite() || level < 0.0 {
            return Err(Error::InvalidConfig(format!("perturbation level {level}")));
        }
    }
    let nominal = sim_accuracy(model, rows)?.overall;
    let overalls = exec::map_collect(levels.len() * runs, |pair| {
        let level = levels[pair / runs];
        let mut rng = seeds::rng_idx(seed, "sim_robustness", pair as u64);
        let perturbed: Vec<Transition> = rows
            .iter()
            .map(|t| {
                let mut row = (*t).clone();
                for v in &mut row.state {
                    let noise: f64 = rand::Rng::sample(&mut rng, StandardNormal);
                    *v = (*v + level * noise).clamp(0.0, 1.0);
                }
                row
            })
            .collect();
        let refs: Vec<&Transition> = perturbed.iter().collect();
        sim_accuracy(model, &refs).expect("validated rows").overall
    });
    levels
        .iter()
        .enumerate()
        .map(|(li, &level)| {
            let stats = robustness_stats(nominal, &overalls[li * runs..(li + 1) * runs])?;
            Ok(SimRobustnessLevel {
                level,
                worst_case: stats.worst_case,
                variance: stats.variance,
                drop_rate: stats.drop_rate,
            })
        })
        .collect()
}

/// Least-squares slope of y against x.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            context: "slope inputs",
            expected: xs.len().to_string(),
            got: ys.len().to_string(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidConfig(
            "slope needs at least two points".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if den == 0.0 {
        return Err(Error::InvalidConfig(
            "slope undefined for constant x values".into(),
        ));
    }
    Ok(num / den)
}

/// Acceptance threshold for the robustness score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessGateConfig {
    pub delta: f64,
}

impl Default for RobustnessGateConfig {
    fn default() -> Self {
        Self { delta: -0.05 }
    }
}

impl RobustnessGateConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.delta.is_finite() {
            return Err(Error::NonFinite("gate threshold"));
        }
        Ok(())
    }
}

/// Pass iff R strictly exceeds δ. Recorded in reports, never fed back
/// into training.
pub fn robustness_gate(r: f64, config: &RobustnessGateConfig) -> Result<bool> {
    config.validate()?;
    if !r.is_finite() {
        return Err(Error::NonFinite("robustness score"));
    }
    Ok(r > config.delta)
}

/// One sweep evaluation run at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRunRow {
    pub kind: PerturbKind,
    pub level: f64,
    pub run: usize,
    #[serde(flatten)]
    pub metrics: DecisionMetrics,
}

/// Aggregated sweep results for one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepLevel {
    pub level: f64,
    /// Means of the per-run metrics.
    pub metrics: DecisionMetrics,
    /// CVaR@5% of the per-state overall scores pooled across runs.
    pub cvar5: f64,
    /// Robustness score at this level's magnitude.
    pub r_score: f64,
    /// Gate verdict for `r_score`.
    pub gate: bool,
}

/// Full degradation sweep for one perturbation kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: PerturbKind,
    /// Which outcome oracle produced the metrics.
    pub oracle: String,
    pub runs: Vec<SweepRunRow>,
    pub levels: Vec<SweepLevel>,
    /// Least-squares slope of mean overall against level.
    pub slope: f64,
}

/// Sweeps the perturbation magnitude over `levels` (which must include the
/// 0 baseline), evaluating the argmax policy's decision metrics on
/// perturbed states `runs` times per level. (level, run) pairs evaluate
/// independently; each state contributes one perturbed sample per run.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    policy: &PolicyModel,
    simulator: &SimulatorModel,
    kind: PerturbKind,
    levels: &[f64],
    runs: usize,
    seed: u64,
    states: &[Vec<f64>],
    oracle: &OutcomeOracle,
    gate: &RobustnessGateConfig,
) -> Result<SweepReport> {
    if states.is_empty() {
        return Err(Error::EmptyInput("sweep states"));
    }
    if runs == 0 {
        return Err(Error::InvalidConfig("sweep needs at least one run".into()));
    }
    if !levels.contains(&0.0) {
        return Err(Error::InvalidConfig(
            "sweep levels must include the 0 baseline".into(),
        ));
    }
    for &level in levels {
        if !level.is_finite() || level < 0.0 {
            return Err(Error::InvalidConfig(format!("perturbation level {level}")));
        }
    }
    gate.validate()?;
    let run_seed = seeds::derive(seed, "sweep_runs");
    let score_seed = seeds::derive(seed, "sweep_score");
    // One (metrics, per-state overalls) evaluation per (level, run) pair.
    let evals = exec::map_collect(levels.len() * runs, |pair| {
        let spec = PerturbSpec {
            kind,
            magnitude: levels[pair / runs],
            samples: 1,
            seed: seeds::derive_idx(run_seed, pair as u64),
        };
        let perturbed = perturb_states(&spec, simulator, states, policy).expect("validated spec");
        let flat: Vec<Vec<f64>> = perturbed.into_iter().map(|mut v| v.remove(0)).collect();
        let per_state: Vec<f64> = flat
            .iter()
            .map(|s| {
                let a = argmax(&policy_forward(policy, s).expect("validated state"));
                let (timely, profit) =
                    oracle.timely_profit(s, a).expect("validated state");
                timely + profit
            })
            .collect();
        let metrics =
            decision_metrics_for_states(policy, &flat, oracle).expect("validated states");
        (metrics, per_state)
    });
    let mut rows = Vec::with_capacity(evals.len());
    let mut level_reports = Vec::with_capacity(levels.len());
    for (li, &level) in levels.iter().enumerate() {
        let bucket = &evals[li * runs..(li + 1) * runs];
        let mut pooled = Vec::with_capacity(runs * states.len());
        let mut timely = 0.0;
        let mut profit = 0.0;
        for (run, (metrics, per_state)) in bucket.iter().enumerate() {
            rows.push(SweepRunRow {
                kind,
                level,
                run,
                metrics: *metrics,
            });
            timely += metrics.timely;
            profit += metrics.profit;
            pooled.extend_from_slice(per_state);
        }
        let metrics = DecisionMetrics::new(timely / runs as f64, profit / runs as f64);
        let spec = PerturbSpec {
            kind,
            magnitude: level,
            samples: runs,
            seed: seeds::derive_idx(score_seed, li as u64),
        };
        let r_score = robustness_score(policy, simulator, states, &spec)?;
        level_reports.push(SweepLevel {
            level,
            metrics,
            cvar5: cvar(&pooled, 0.05)?,
            r_score,
            gate: robustness_gate(r_score, gate)?,
        });
    }
    let xs: Vec<f64> = level_reports.iter().map(|l| l.level).collect();
    let ys: Vec<f64> = level_reports.iter().map(|l| l.metrics.overall).collect();
    let slope = if levels.len() >= 2 {
        least_squares_slope(&xs, &ys)?
    } else {
        0.0
    };
    Ok(SweepReport {
        kind,
        oracle: oracle.label().to_string(),
        runs: rows,
        levels: level_reports,
        slope,
    })
}

#[derive(Serialize)]
struct JsonlRow<'a> {
    variant: &'a str,
    kind: &'static str,
    level: f64,
    run: usize,
    timely: f64,
    profit: f64,
    diff: f64,
    overall: f64,
}

/// One JSON line per (level, run) evaluation, across all reports.
pub fn write_sweep_jsonl(
    path: &std::path::Path,
    variant: &str,
    reports: &[SweepReport],
) -> Result<()> {
    let mut out = Vec::new();
    for report in reports {
        for row in &report.runs {
            let line = serde_json::to_string(&JsonlRow {
                variant,
                kind: row.kind.label(),
                level: row.level,
                run: row.run,
                timely: row.metrics.timely,
                profit: row.metrics.profit,
                diff: row.metrics.diff,
                overall: row.metrics.overall,
            })?;
            out.push(line);
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in out {
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub const SUMMARY_HEADER: [&str; 10] = [
    "variant", "kind", "level", "timely", "profit", "diff", "overall", "cvar5", "R", "gate",
];

/// One summary CSV record, matching [`SUMMARY_HEADER`].
pub fn summary_record(variant: &str, kind: PerturbKind, level: &SweepLevel) -> Vec<String> {
    vec![
        variant.to_string(),
        kind.label().to_string(),
        format!("{}", level.level),
        format!("{}", level.metrics.timely),
        format!("{}", level.metrics.profit),
        format!("{}", level.metrics.diff),
        format!("{}", level.metrics.overall),
        format!("{}", level.cvar5),
        format!("{}", level.r_score),
        if level.gate { "pass" } else { "fail" }.to_string(),
    ]
}

/// Per-level summary CSV with the fixed column set
/// variant, kind, level, timely, profit, diff, overall, cvar5, R, gate.
pub fn write_summary_csv(
    path: &std::path::Path,
    variant: &str,
    reports: &[SweepReport],
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(SUMMARY_HEADER)?;
    for report in reports {
        for level in &report.levels {
            writer.write_record(summary_record(variant, report.kind, level))?;
        }
    }
    writer.flush()?;
    Ok(())
}
