//! End-to-end runs: dataset → simulator pretraining → optional adversarial
//! calibration → policy training → robustness evaluation, with every
//! artifact and report written under the run's output directory and
//! indexed by a manifest. `ablate` repeats the run for all four variants
//! over a shared dataset and emits combined comparison tables.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibrator::{run_calibration, save_calibrator, CalibrationConfig};
use crate::data::store::{dataset_hash, save_dataset};
use crate::data::synthetic::generate_synthetic;
use crate::data::{ingest_csv, OfflineDataset, Split, SyntheticEnvConfig, Transition};
use crate::error::{Error, Result};
use crate::pipeline::config::{
    config_hash, stage_seed, DatasetSource, ExperimentConfig, Variant,
};
use crate::policy::{save_policy, train_policy, DecisionTrainConfig, PolicyModel};
use crate::robustness::{
    decision_metrics, expected_decision_metrics, sim_robustness, summary_record, sweep,
    write_summary_csv, write_sweep_jsonl, DecisionMetrics, OutcomeOracle, PerturbKind,
    RobustnessGateConfig, SimRobustnessLevel, SweepReport, SUMMARY_HEADER,
};
use crate::simulator::{save_simulator, train_simulator, SimTrainConfig, SimulatorModel};

pub const DATASET_FILE: &str = "dataset.csv";
pub const SIM_PRETRAINED_FILE: &str = "sim_pretrained.json";
pub const SIMULATOR_FILE: &str = "simulator.json";
pub const CALIBRATOR_FILE: &str = "calibrator.json";
pub const CALIBRATION_TRACE_FILE: &str = "calibration_trace.jsonl";
pub const SIM_EPOCHS_FILE: &str = "sim_epochs.jsonl";
pub const POLICY_FILE: &str = "policy.json";
pub const POLICY_TRACE_FILE: &str = "policy_trace.jsonl";
pub const SWEEP_ROWS_FILE: &str = "sweep_rows.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SIM_ROBUSTNESS_FILE: &str = "sim_robustness.jsonl";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INGEST_REPORT_FILE: &str = "ingest_report.json";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Stage that failed, with the underlying message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

/// Wall clock spent in one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// Index of everything one run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// First 16 hex digits of the config hash.
    pub id: String,
    pub config_hash: String,
    pub variant: Variant,
    pub dataset_hash: String,
    /// Format versions of the artifact files this run writes.
    pub artifact_versions: BTreeMap<String, u32>,
    /// Checkpoint file names under the run directory.
    pub checkpoints: BTreeMap<String, String>,
    /// Report file names under the run directory.
    pub reports: Vec<String>,
    /// Effective per-stage seeds derived from the global seed.
    pub seeds: BTreeMap<String, u64>,
    pub stage_seconds: Vec<StageTime>,
    pub error: Option<StageError>,
}

/// Sweep digest for one perturbation kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub kind: PerturbKind,
    pub slope: f64,
    pub nominal_overall: f64,
    pub cvar_at_zero: f64,
    pub cvar_at_half: f64,
    pub r_at_half: f64,
    pub gate_at_half: bool,
}

/// Evaluation-stage results; the file form of the robustness report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub variant: Variant,
    /// Oracle used for sweep metrics.
    pub oracle: String,
    pub delta: f64,
    /// Gate verdict at the structured-perturbation 0.5 setting.
    pub gate: bool,
    /// Argmax-policy metrics judged by the simulator's own heads.
    pub decision_simulator: DecisionMetrics,
    /// The same metrics judged by generator ground truth, when available.
    pub decision_ground_truth: Option<DecisionMetrics>,
    /// Probability-weighted metrics of the stochastic policy, same two
    /// oracles.
    pub expected_simulator: DecisionMetrics,
    pub expected_ground_truth: Option<DecisionMetrics>,
    pub sweeps: Vec<SweepSummary>,
    pub sim_robustness: Vec<SimRobustnessLevel>,
}

/// Run results surfaced to callers; everything is also on disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub evaluation: EvaluationReport,
    /// Full sweep reports, latent kind first.
    pub sweeps: Vec<SweepReport>,
}

/// Synthetic generator settings with the effective dataset-stage seed.
pub fn effective_synthetic_config(config: &ExperimentConfig) -> Option<SyntheticEnvConfig> {
    match &config.dataset {
        DatasetSource::Synthetic(c) => {
            let mut c = c.clone();
            c.seed = stage_seed(config.seed, "dataset", c.seed);
            Some(c)
        }
        DatasetSource::Csv(_) => None,
    }
}

/// Simulator pretraining settings with the effective stage seed.
pub fn effective_sim_config(config: &ExperimentConfig) -> SimTrainConfig {
    let mut c = config.simulator.train.clone();
    c.seed = stage_seed(config.seed, "simulator", c.seed);
    c
}

/// Calibration settings with the effective stage seed.
pub fn effective_calibration_config(config: &ExperimentConfig) -> CalibrationConfig {
    let mut c = config.calibration.clone();
    c.seed = stage_seed(config.seed, "calibration", c.seed);
    c
}

/// Policy training settings with the effective stage seed and the
/// variant's gating applied: without the perturbation mechanism the
/// group is disabled (scale 0, advantage weight 0).
pub fn effective_decision_config(config: &ExperimentConfig) -> DecisionTrainConfig {
    let mut c = config.decision.train.clone();
    c.seed = stage_seed(config.seed, "decision", c.seed);
    if !config.variant.perturbs() {
        c.perturb_scale = 0.0;
        c.advantage_coeff = 0.0;
    }
    c
}

/// Seed for the policy's weight initialization.
pub fn policy_init_seed(config: &ExperimentConfig) -> u64 {
    crate::seeds::derive(stage_seed(config.seed, "decision", config.decision.train.seed), "policy_init")
}

/// Seed for the evaluation stage.
pub fn evaluate_seed(config: &ExperimentConfig) -> u64 {
    stage_seed(config.seed, "evaluate", config.robustness.seed)
}

/// Builds the configured dataset with the effective dataset-stage seed.
pub fn build_dataset(config: &ExperimentConfig) -> Result<(OfflineDataset, Option<crate::data::IngestReport>)> {
    match &config.dataset {
        DatasetSource::Synthetic(_) => {
            let c = effective_synthetic_config(config).expect("synthetic source");
            Ok((generate_synthetic(&c)?, None))
        }
        DatasetSource::Csv(src) => {
            let seed = stage_seed(config.seed, "dataset", src.seed);
            let (ds, report) = ingest_csv(&src.path, &src.mapping, seed)?;
            Ok((ds, Some(report)))
        }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item)?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(item)?;
    std::fs::write(path, text)?;
    Ok(())
}

struct StageClock<'a> {
    manifest: &'a mut RunManifest,
}

impl StageClock<'_> {
    fn run<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let result = f();
        self.manifest.stage_seconds.push(StageTime {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        if let Err(e) = &result {
            self.manifest.error = Some(StageError {
                stage: stage.to_string(),
                message: e.to_string(),
            });
        }
        result
    }
}

/// Level-0 and level-0.5 rows of a sweep, digested for the report.
fn summarize_sweep(report: &SweepReport) -> Result<SweepSummary> {
    let at = |level: f64| {
        report
            .levels
            .iter()
            .find(|l| l.level == level)
            .ok_or_else(|| Error::InvalidConfig(format!("sweep lacks level {level}")))
    };
    let zero = at(0.0)?;
    let half = at(0.5)?;
    Ok(SweepSummary {
        kind: report.kind,
        slope: report.slope,
        nominal_overall: zero.metrics.overall,
        cvar_at_zero: zero.cvar5,
        cvar_at_half: half.cvar5,
        r_at_half: half.r_score,
        gate_at_half: half.gate,
    })
}

/// Executes every stage for one variant, writing checkpoints, reports,
/// and `manifest.json` under `config.out_dir`. On a stage failure the
/// manifest still lands, recording the stage and error.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let hash = config_hash(config)?;
    let out = config.out_dir.clone();
    std::fs::create_dir_all(&out)?;

    let mut manifest = RunManifest {
        id: hash[..16].to_string(),
        config_hash: hash,
        variant: config.variant,
        dataset_hash: String::new(),
        artifact_versions: BTreeMap::from([
            ("robsim-dataset".to_string(), 1),
            ("robsim-params".to_string(), 1),
            ("robsim-simulator".to_string(), 1),
        ]),
        checkpoints: BTreeMap::new(),
        reports: Vec::new(),
        seeds: BTreeMap::from([
            ("global".to_string(), config.seed),
            ("dataset".to_string(), stage_seed(config.seed, "dataset", dataset_sub_seed(config))),
            ("simulator".to_string(), effective_sim_config(config).seed),
            ("decision".to_string(), effective_decision_config(config).seed),
            ("evaluate".to_string(), evaluate_seed(config)),
        ]),
        stage_seconds: Vec::new(),
        error: None,
    };
    if config.variant.calibrates() {
        manifest.seeds.insert(
            "calibration".to_string(),
            effective_calibration_config(config).seed,
        );
    }

    let result = run_stages(config, &out, &mut manifest);
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    result.map(|(evaluation, sweeps)| RunOutput {
        manifest,
        evaluation,
        sweeps,
    })
}

fn dataset_sub_seed(config: &ExperimentConfig) -> u64 {
    match &config.dataset {
        DatasetSource::Synthetic(c) => c.seed,
        DatasetSource::Csv(src) => src.seed,
    }
}

fn run_stages(
    config: &ExperimentConfig,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<(EvaluationReport, Vec<SweepReport>)> {
    let mut clock = StageClock { manifest };

    let (ds, ingest_report) = clock.run("dataset", || {
        let (ds, report) = build_dataset(config)?;
        save_dataset(&out.join(DATASET_FILE), &ds)?;
        Ok((ds, report))
    })?;
    clock.manifest.dataset_hash = dataset_hash(&ds)?;
    clock
        .manifest
        .checkpoints
        .insert("dataset".to_string(), DATASET_FILE.to_string());
    if let Some(report) = &ingest_report {
        write_json(&out.join(INGEST_REPORT_FILE), report)?;
        clock.manifest.reports.push(INGEST_REPORT_FILE.to_string());
    }

    let (d, k, c) = (ds.schema.d, ds.schema.k, ds.schema.c);
    let pretrained = clock.run("train_sim", || {
        let sim_cfg = effective_sim_config(config);
        let init = SimulatorModel::init(d, k, c, &config.simulator.arch, sim_cfg.seed)?;
        let (model, epochs) =
            train_simulator(init, &ds, &sim_cfg, None, &config.simulator.coeffs)?;
        save_simulator(&out.join(SIM_PRETRAINED_FILE), &model)?;
        write_jsonl(&out.join(SIM_EPOCHS_FILE), &epochs)?;
        Ok(model)
    })?;
    clock
        .manifest
        .checkpoints
        .insert("sim_pretrained".to_string(), SIM_PRETRAINED_FILE.to_string());
    clock.manifest.reports.push(SIM_EPOCHS_FILE.to_string());

    let simulator = if config.variant.calibrates() {
        let outcome = clock.run("calibrate", || {
            run_calibration(pretrained, &ds, &effective_calibration_config(config))
        })?;
        save_calibrator(&out.join(CALIBRATOR_FILE), &outcome.calibrator)?;
        write_jsonl(&out.join(CALIBRATION_TRACE_FILE), &outcome.trace)?;
        clock
            .manifest
            .checkpoints
            .insert("calibrator".to_string(), CALIBRATOR_FILE.to_string());
        clock.manifest.reports.push(CALIBRATION_TRACE_FILE.to_string());
        outcome.model
    } else {
        pretrained
    };
    save_simulator(&out.join(SIMULATOR_FILE), &simulator)?;
    clock
        .manifest
        .checkpoints
        .insert("simulator".to_string(), SIMULATOR_FILE.to_string());

    let policy = clock.run("train_policy", || {
        let init = PolicyModel::init(d, k, &config.decision.hidden, policy_init_seed(config))?;
        let (policy, trace) =
            train_policy(init, &simulator, &ds, &effective_decision_config(config))?;
        save_policy(&out.join(POLICY_FILE), &policy)?;
        write_jsonl(&out.join(POLICY_TRACE_FILE), &trace)?;
        Ok(policy)
    })?;
    clock
        .manifest
        .checkpoints
        .insert("policy".to_string(), POLICY_FILE.to_string());
    clock.manifest.reports.push(POLICY_TRACE_FILE.to_string());

    let (evaluation, sweeps) = clock.run("evaluate", || {
        evaluate(config, out, &ds, &simulator, &policy)
    })?;
    clock.manifest.reports.extend([
        SWEEP_ROWS_FILE.to_string(),
        SUMMARY_FILE.to_string(),
        SIM_ROBUSTNESS_FILE.to_string(),
        EVALUATION_FILE.to_string(),
    ]);
    Ok((evaluation, sweeps))
}

/// Robustness evaluation on the test split (all rows when the dataset is
/// too small to carry one), capped at the configured probe budget.
/// Sweeps judge outcomes by generator ground truth when the dataset has
/// one, otherwise by the simulator's own heads; plain decision metrics
/// are reported under both oracles where possible.
pub fn evaluate(
    config: &ExperimentConfig,
    out: &Path,
    ds: &OfflineDataset,
    simulator: &SimulatorModel,
    policy: &PolicyModel,
) -> Result<(EvaluationReport, Vec<SweepReport>)> {
    let rob = &config.robustness;
    let test: Vec<&Transition> = ds.split_rows(Split::Test).collect();
    let pool: Vec<&Transition> = if test.is_empty() {
        ds.rows.iter().collect()
    } else {
        test
    };
    let rows: Vec<&Transition> = pool.into_iter().take(rob.eval_rows).collect();
    let states: Vec<Vec<f64>> = rows.iter().map(|t| t.state.clone()).collect();
    let seed = evaluate_seed(config);
    let gate_cfg = RobustnessGateConfig { delta: rob.delta };

    let decision_simulator =
        decision_metrics(policy, &rows, &OutcomeOracle::Simulator(simulator))?;
    let decision_ground_truth = ds
        .ground_truth
        .as_ref()
        .map(|truth| decision_metrics(policy, &rows, &OutcomeOracle::GroundTruth(truth)))
        .transpose()?;
    let expected_simulator =
        expected_decision_metrics(policy, &rows, &OutcomeOracle::Simulator(simulator))?;
    let expected_ground_truth = ds
        .ground_truth
        .as_ref()
        .map(|truth| expected_decision_metrics(policy, &rows, &OutcomeOracle::GroundTruth(truth)))
        .transpose()?;

    let oracle = match &ds.ground_truth {
        Some(truth) => OutcomeOracle::GroundTruth(truth),
        None => OutcomeOracle::Simulator(simulator),
    };
    let mut sweeps = Vec::with_capacity(2);
    for kind in [PerturbKind::LatentStructured, PerturbKind::RandomInput] {
        sweeps.push(sweep(
            policy,
            simulator,
            kind,
            &rob.levels,
            rob.runs,
            crate::seeds::derive(seed, kind.label()),
            &states,
            &oracle,
            &gate_cfg,
        )?);
    }
    let sim_rob = sim_robustness(
        simulator,
        &rows,
        &rob.levels,
        rob.runs,
        crate::seeds::derive(seed, "sim_robustness"),
    )?;

    write_sweep_jsonl(&out.join(SWEEP_ROWS_FILE), config.variant.label(), &sweeps)?;
    write_summary_csv(&out.join(SUMMARY_FILE), config.variant.label(), &sweeps)?;
    write_jsonl(&out.join(SIM_ROBUSTNESS_FILE), &sim_rob)?;

    let summaries: Vec<SweepSummary> = sweeps
        .iter()
        .map(summarize_sweep)
        .collect::<Result<_>>()?;
    let evaluation = EvaluationReport {
        variant: config.variant,
        oracle: oracle.label().to_string(),
        delta: rob.delta,
        gate: summaries[0].gate_at_half,
        decision_simulator,
        decision_ground_truth,
        expected_simulator,
        expected_ground_truth,
        sweeps: summaries,
        sim_robustness: sim_rob,
    };
    write_json(&out.join(EVALUATION_FILE), &evaluation)?;
    Ok((evaluation, sweeps))
}

/// Ablation grid results.
#[derive(Debug, Clone)]
pub struct AblationOutput {
    pub runs: Vec<RunOutput>,
    /// Combined per-level summary across variants (`summary.csv`).
    pub summary_path: PathBuf,
    /// Per-run structured-perturbation rows across variants
    /// (`ablation.csv`).
    pub ablation_path: PathBuf,
}

/// Runs all four variants over the shared dataset seed into
/// per-variant subdirectories, then writes the combined per-level
/// `summary.csv` (both kinds) and per-run `ablation.csv` (structured
/// kind) at the root.
pub fn ablate(config: &ExperimentConfig) -> Result<AblationOutput> {
    config.validate()?;
    let base = config.out_dir.clone();
    std::fs::create_dir_all(&base)?;
    let mut runs = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut vc = config.clone();
        vc.variant = variant;
        vc.out_dir = base.join(variant.label());
        runs.push(run_pipeline(&vc)?);
    }

    let summary_path = base.join(SUMMARY_FILE);
    let mut writer = csv::Writer::from_path(&summary_path)?;
    writer.write_record(SUMMARY_HEADER)?;
    for run in &runs {
        for report in &run.sweeps {
            for level in &report.levels {
                writer.write_record(summary_record(
                    run.manifest.variant.label(),
                    report.kind,
                    level,
                ))?;
            }
        }
    }
    writer.flush()?;
    drop(writer);

    let ablation_path = base.join(ABLATION_FILE);
    let mut writer = csv::Writer::from_path(&ablation_path)?;
    writer.write_record([
        "variant", "kind", "level", "run", "timely", "profit", "diff", "overall",
    ])?;
    for run in &runs {
        let latent = run
            .sweeps
            .iter()
            .find(|r| r.kind == PerturbKind::LatentStructured)
            .ok_or(Error::InvalidConfig("missing structured sweep".into()))?;
        for row in &latent.runs {
            writer.write_record([
                run.manifest.variant.label(),
                row.kind.label(),
                &format!("{}", row.level),
                &format!("{}", row.run),
                &format!("{}", row.metrics.timely),
                &format!("{}", row.metrics.profit),
                &format!("{}", row.metrics.diff),
                &format!("{}", row.metrics.overall),
            ])?;
        }
    }
    writer.flush()?;
    Ok(AblationOutput {
        runs,
        summary_path,
        ablation_path,
    })
}
