//! Action-conditioned adversarial calibrator.
//!
//! The calibrator holds one weight vector per action and turns a state into
//! a softmax distribution over actions, b̄(s, a; w) ∝ exp(⟨s, w_a⟩). The
//! objective J is the mean calibrator-weighted prediction residual
//! ‖(s′, r) − (ŝ′, r̂)‖ over a batch, each sample weighted by its own
//! action. Calibration alternates gradient ascent on w (spotlighting the
//! actions whose residuals matter most) with gradient descent on the
//! simulator parameters that produce the prediction, until the validation
//! residual stabilizes.

use serde::{Deserialize, Serialize};

use crate::data::{OfflineDataset, Split, Transition};
use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::checkpoint::{load_params, save_params};
use crate::numerics::{softmax, Activation, ModelSpec, OutputActivation, Params};
use crate::seeds;
use crate::simulator::SimulatorModel;

/// Per-action weight vectors; action logits are ⟨s, w_a⟩.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorParams {
    pub w: Vec<Vec<f64>>,
}

impl CalibratorParams {
    /// Uniform calibrator: every action gets weight 1/K for every state.
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            w: vec![vec![0.0; d]; k],
        }
    }

    pub fn k(&self) -> usize {
        self.w.len()
    }

    pub fn d(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.is_empty() || self.d() == 0 {
            return Err(Error::EmptyInput("calibrator weights"));
        }
        for wa in &self.w {
            if wa.len() != self.d() {
                return Err(Error::ShapeMismatch {
                    context: "calibrator weight vector",
                    expected: self.d().to_string(),
                    got: wa.len().to_string(),
                });
            }
            if wa.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("calibrator weights"));
            }
        }
        Ok(())
    }
}

/// Softmax weights over all K actions for one state.
pub fn calib_weights(s: &[f64], w: &CalibratorParams) -> Result<Vec<f64>> {
    if s.len() != w.d() {
        return Err(Error::ShapeMismatch {
            context: "calibrator state",
            expected: w.d().to_string(),
            got: s.len().to_string(),
        });
    }
    let logits: Vec<f64> = w
        .w
        .iter()
        .map(|wa| wa.iter().zip(s).map(|(wi, si)| wi * si).sum())
        .collect();
    softmax(&logits)
}

/// b̄(s, a; w), the calibrator's weight for one state-action pair.
pub fn calib_weight(s: &[f64], a: usize, w: &CalibratorParams) -> Result<f64> {
    let b = calib_weights(s, w)?;
    b.get(a).copied().ok_or(Error::ShapeMismatch {
        context: "calibrator action",
        expected: format!("< {}", b.len()),
        got: a.to_string(),
    })
}

/// Minimax objective J: mean over the batch of the sample's own-action
/// calibrator weight times its prediction residual norm.
pub fn calib_objective(
    w: &CalibratorParams,
    model: &SimulatorModel,
    batch: &[&Transition],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("calibration batch"));
    }
    w.validate()?;
    let total = exec::sum_by(batch.len(), |i| {
        let t = batch[i];
        let b = calib_weight(&t.state, t.action, w).expect("validated batch row");
        let res = model.residual_norm(t).expect("validated batch row");
        b * res
    });
    if !total.is_finite() {
        return Err(Error::Divergence(format!("calibration objective {total}")));
    }
    Ok(total / batch.len() as f64)
}

/// ∇_w J for one batch, laid out like [`CalibratorParams::w`].
fn objective_w_grad(
    w: &CalibratorParams,
    model: &SimulatorModel,
    batch: &[&Transition],
) -> Result<Vec<Vec<f64>>> {
    let inv_n = 1.0 / batch.len() as f64;
    let mut grad = vec![vec![0.0; w.d()]; w.k()];
    for t in batch {
        let b = calib_weights(&t.state, w)?;
        let res = model.residual_norm(t)?;
        let scale = b[t.action] * res * inv_n;
        for (j, (bj, gj)) in b.iter().zip(grad.iter_mut()).enumerate() {
            let coef = scale * ((j == t.action) as u8 as f64 - bj);
            for (g, si) in gj.iter_mut().zip(&t.state) {
                *g += coef * si;
            }
        }
    }
    Ok(grad)
}

/// Gradient ascent on the calibrator: w ← w + η_w ∇_w J. With η_w ≤ 1e-3
/// the step never lowers J on its own batch by more than 1e-9.
pub fn calibrator_ascent_step(
    w: &CalibratorParams,
    model: &SimulatorModel,
    batch: &[&Transition],
    eta_w: f64,
) -> Result<CalibratorParams> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("calibration batch"));
    }
    if !eta_w.is_finite() || eta_w < 0.0 {
        return Err(Error::InvalidConfig(format!("ascent rate {eta_w}")));
    }
    w.validate()?;
    let grad = objective_w_grad(w, model, batch)?;
    let mut out = w.clone();
    for (wa, ga) in out.w.iter_mut().zip(&grad) {
        for (wi, gi) in wa.iter_mut().zip(ga) {
            if !gi.is_finite() {
                return Err(Error::Divergence("calibrator gradient".into()));
            }
            *wi += eta_w * gi;
        }
    }
    Ok(out)
}

/// Gradient descent on the simulator parameters that enter the prediction
/// residual: θ ← θ − η_s ∇_θ J. With η_s ≤ 1e-4 the step never raises J on
/// its own batch by more than 1e-9.
pub fn simulator_descent_step(
    w: &CalibratorParams,
    model: &SimulatorModel,
    batch: &[&Transition],
    eta_s: f64,
) -> Result<SimulatorModel> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("calibration batch"));
    }
    if !eta_s.is_finite() || eta_s < 0.0 {
        return Err(Error::InvalidConfig(format!("descent rate {eta_s}")));
    }
    w.validate()?;
    let inv_n = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; model.flat_len()];
    for t in batch {
        let b = calib_weight(&t.state, t.action, w)?;
        let (_, g) = model.residual_norm_grad(t)?;
        let scale = b * inv_n;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += scale * gi;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence("simulator residual gradient".into()));
    }
    let mut out = model.clone();
    out.sgd_step(&grad, eta_s)?;
    Ok(out)
}

/// Alternation schedule and stopping rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// η_w, calibrator ascent rate.
    pub ascent_rate: f64,
    /// η_s, simulator descent rate.
    pub descent_rate: f64,
    /// Maximum alternation rounds; 0 is an explicit no-op budget.
    pub rounds: usize,
    /// Inner ascent steps per round.
    pub ascent_steps: usize,
    /// Inner descent steps per round.
    pub descent_steps: usize,
    /// Rows sampled from the train split per inner step.
    pub batch_size: usize,
    /// Stop once |Δ validation residual| stays below this for 3 rounds.
    pub val_tolerance: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            ascent_rate: 0.2,
            descent_rate: 0.02,
            rounds: 20,
            ascent_steps: 5,
            descent_steps: 50,
            batch_size: 256,
            val_tolerance: 1e-4,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.ascent_rate.is_finite() || self.ascent_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "ascent rate must be positive, got {}",
                self.ascent_rate
            )));
        }
        if !self.descent_rate.is_finite() || self.descent_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "descent rate must be positive, got {}",
                self.descent_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !self.val_tolerance.is_finite() || self.val_tolerance < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "validation tolerance must be non-negative, got {}",
                self.val_tolerance
            )));
        }
        Ok(())
    }
}

/// One logged alternation round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRound {
    pub round: usize,
    #[serde(rename = "J")]
    pub j: f64,
    pub val_overall: f64,
}

/// Calibration result: best-validation model, final calibrator, and the
/// per-round trace (round 0 is the pre-calibration evaluation).
#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub model: SimulatorModel,
    pub calibrator: CalibratorParams,
    pub trace: Vec<CalibrationRound>,
}

/// Mean unweighted prediction residual over a row set.
pub fn mean_residual(model: &SimulatorModel, rows: &[&Transition]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("residual rows"));
    }
    let total = exec::sum_by(rows.len(), |i| {
        model.residual_norm(rows[i]).expect("validated row")
    });
    Ok(total / rows.len() as f64)
}

/// Alternating minimax calibration. Each round runs the configured number
/// of ascent steps on w, then descent steps on the simulator, each on a
/// fresh seeded batch from the train split. Stops early once the
/// validation residual has moved less than the tolerance for 3 consecutive
/// rounds, and returns the model snapshot with the lowest validation
/// residual seen (the input model counts as round 0).
pub fn run_calibration(
    model: SimulatorModel,
    dataset: &OfflineDataset,
    config: &CalibrationConfig,
) -> Result<CalibrationOutcome> {
    config.validate()?;
    let train: Vec<&Transition> = dataset.split_rows(Split::Train).collect();
    let val: Vec<&Transition> = dataset.split_rows(Split::Val).collect();
    if train.is_empty() {
        return Err(Error::EmptyInput("train split"));
    }
    if val.is_empty() {
        return Err(Error::EmptyInput("validation split"));
    }
    let mut rng = seeds::rng(config.seed, "calibration");
    let probe: Vec<&Transition> = if train.len() <= 2048 {
        train.clone()
    } else {
        rand::seq::index::sample(&mut rng, train.len(), 2048)
            .iter()
            .map(|i| train[i])
            .collect()
    };

    let mut w = CalibratorParams::zeros(dataset.schema.k, dataset.schema.d);
    let mut current = model;
    let mut trace = Vec::with_capacity(config.rounds + 1);
    let j0 = calib_objective(&w, &current, &probe)?;
    let val0 = mean_residual(&current, &val)?;
    trace.push(CalibrationRound {
        round: 0,
        j: j0,
        val_overall: val0,
    });
    let mut best_val = val0;
    let mut best_model = current.clone();
    let mut best_w = w.clone();
    let mut prev_val = val0;
    let mut stable = 0;

    let draw_batch = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<&Transition> {
        let amount = config.batch_size.min(train.len());
        rand::seq::index::sample(rng, train.len(), amount)
            .iter()
            .map(|i| train[i])
            .collect()
    };

    for round in 1..=config.rounds {
        for _ in 0..config.ascent_steps {
            let batch = draw_batch(&mut rng);
            w = calibrator_ascent_step(&w, &current, &batch, config.ascent_rate)?;
        }
        for _ in 0..config.descent_steps {
            let batch = draw_batch(&mut rng);
            current = simulator_descent_step(&w, &current, &batch, config.descent_rate)?;
        }
        let j = calib_objective(&w, &current, &probe)?;
        let val_overall = mean_residual(&current, &val)?;
        if !j.is_finite() || !val_overall.is_finite() {
            return Err(Error::Divergence(format!(
                "calibration round {round}: J {j}, val {val_overall}"
            )));
        }
        trace.push(CalibrationRound {
            round,
            j,
            val_overall,
        });
        if val_overall < best_val {
            best_val = val_overall;
            best_model = current.clone();
            best_w = w.clone();
        }
        if (val_overall - prev_val).abs() < config.val_tolerance {
            stable += 1;
        } else {
            stable = 0;
        }
        prev_val = val_overall;
        if stable >= 3 {
            break;
        }
    }
    Ok(CalibrationOutcome {
        model: best_model,
        calibrator: best_w,
        trace,
    })
}

fn calibrator_spec(k: usize, d: usize) -> ModelSpec {
    ModelSpec::new(&[d, k], Activation::Identity, OutputActivation::Softmax)
}

/// Packs the K×d weight matrix into a single-layer checkpoint (zero bias).
pub fn calibrator_to_params(w: &CalibratorParams) -> Result<Params> {
    w.validate()?;
    let spec = calibrator_spec(w.k(), w.d());
    let mut p = Params::zeros(spec)?;
    let mut pos = 0;
    for wa in &w.w {
        p.values[pos..pos + wa.len()].copy_from_slice(wa);
        pos += wa.len();
    }
    Ok(p)
}

pub fn calibrator_from_params(p: &Params) -> Result<CalibratorParams> {
    if p.spec.layer_widths.len() != 2 {
        return Err(Error::ShapeMismatch {
            context: "calibrator checkpoint layers",
            expected: "single linear layer".into(),
            got: format!("{:?}", p.spec.layer_widths),
        });
    }
    let d = p.spec.layer_widths[0];
    let k = p.spec.layer_widths[1];
    let bias = &p.values[k * d..];
    if bias.iter().any(|&b| b != 0.0) {
        return Err(Error::InvalidConfig("calibrator checkpoint has bias terms".into()));
    }
    let w = (0..k).map(|a| p.values[a * d..(a + 1) * d].to_vec()).collect();
    let out = CalibratorParams { w };
    out.validate()?;
    Ok(out)
}

pub fn save_calibrator(path: &std::path::Path, w: &CalibratorParams) -> Result<()> {
    save_params(path, &calibrator_to_params(w)?)
}

pub fn load_calibrator(path: &std::path::Path) -> Result<CalibratorParams> {
    calibrator_from_params(&load_params(path)?)
}
