//! Experiment configuration: one JSON document with documented sections,
//! strict unknown-key rejection, and layered overrides (file < CLI flags <
//! `ROBSIM_*` environment variables).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::calibrator::CalibrationConfig;
use crate::data::csv_ingest::ColumnMapping;
use crate::data::synthetic::SyntheticEnvConfig;
use crate::error::{Error, Result};
use crate::policy::DecisionTrainConfig;
use crate::seeds;
use crate::simulator::{LossCoeffs, SimArchitecture, SimTrainConfig};

/// Ablation variant: which of the two mechanisms are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    None,
    SimCal,
    DecPert,
    #[default]
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::None, Variant::SimCal, Variant::DecPert, Variant::Both];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::SimCal => "sim_cal",
            Variant::DecPert => "dec_pert",
            Variant::Both => "both",
        }
    }

    /// Runs the adversarial calibration stage.
    pub fn calibrates(&self) -> bool {
        matches!(self, Variant::SimCal | Variant::Both)
    }

    /// Trains the policy with perturbation groups.
    pub fn perturbs(&self) -> bool {
        matches!(self, Variant::DecPert | Variant::Both)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Variant::None),
            "sim_cal" => Ok(Variant::SimCal),
            "dec_pert" => Ok(Variant::DecPert),
            "both" => Ok(Variant::Both),
            other => Err(Error::InvalidConfig(format!(
                "variant {other:?}; expected none, sim_cal, dec_pert, or both"
            ))),
        }
    }
}

/// CSV dataset source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub mapping: ColumnMapping,
    /// Sub-seed for the ingest split.
    #[serde(default)]
    pub seed: u64,
}

/// Exactly one dataset source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticEnvConfig),
    Csv(CsvSource),
}

/// Simulator architecture plus pretraining settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorSection {
    pub arch: SimArchitecture,
    pub train: SimTrainConfig,
    pub coeffs: LossCoeffs,
}

/// Policy network shape plus group-relative training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionSection {
    pub hidden: Vec<usize>,
    pub train: DecisionTrainConfig,
}

impl Default for DecisionSection {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            train: DecisionTrainConfig::default(),
        }
    }
}

/// Evaluation settings: sweep grid, gate threshold, probe budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessSection {
    /// Perturbation magnitudes; must include 0 (baseline) and 0.5 (the
    /// reported perturbed setting).
    pub levels: Vec<f64>,
    /// Seeded evaluation runs per level, ≥ 2.
    pub runs: usize,
    /// Cap on evaluation rows used for sweeps and probes.
    pub eval_rows: usize,
    /// Gate threshold δ.
    pub delta: f64,
    /// Sub-seed for evaluation draws.
    pub seed: u64,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        Self {
            levels: vec![0.0, 0.1, 0.25, 0.5, 1.0],
            runs: 3,
            eval_rows: 256,
            delta: -0.05,
            seed: 0,
        }
    }
}

impl RobustnessSection {
    pub fn validate(&self) -> Result<()> {
        if !self.levels.contains(&0.0) || !self.levels.contains(&0.5) {
            return Err(Error::InvalidConfig(
                "levels must include 0 (baseline) and 0.5 (reported setting)".into(),
            ));
        }
        for &level in &self.levels {
            if !level.is_finite() || level < 0.0 {
                return Err(Error::InvalidConfig(format!("perturbation level {level}")));
            }
        }
        if self.runs < 2 {
            return Err(Error::InvalidConfig(format!(
                "evaluation needs ≥ 2 runs per level, got {}",
                self.runs
            )));
        }
        if self.eval_rows == 0 {
            return Err(Error::InvalidConfig("eval_rows must be ≥ 1".into()));
        }
        if !self.delta.is_finite() {
            return Err(Error::NonFinite("gate threshold"));
        }
        Ok(())
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Full experiment description. All sections except `dataset` default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub simulator: SimulatorSection,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub decision: DecisionSection,
    #[serde(default)]
    pub robustness: RobustnessSection,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Global seed; every stage derives its own from it.
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSource::Synthetic(_) => {}
            DatasetSource::Csv(src) => src.mapping.validate()?,
        }
        self.simulator.train.validate()?;
        self.calibration.validate()?;
        self.decision.train.validate()?;
        self.robustness.validate()?;
        Ok(())
    }
}

/// Per-stage seed: the global seed split by stage label, then by the
/// section's own sub-seed, so any stage can be re-run in isolation.
pub fn stage_seed(global: u64, stage: &str, section_seed: u64) -> u64 {
    seeds::derive_idx(seeds::derive(global, stage), section_seed)
}

/// SHA-256 of the resolved config's canonical JSON form.
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let text = serde_json::to_string(config)?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

/// Command-line overrides; applied over the file, under the environment.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
}

/// Environment override prefix: `ROBSIM_section__key=value`, nested keys
/// separated by `__` (e.g. `ROBSIM_simulator__train__epochs=40`). Values
/// parse as JSON where possible, otherwise as strings.
pub const ENV_PREFIX: &str = "ROBSIM_";

fn set_path(root: &mut Value, path: &[&str], value: Value) -> Result<()> {
    let mut node = root;
    for (depth, key) in path.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "override {} descends into a non-object at {}",
                path.join("__"),
                path[..depth].join("__")
            ))
        })?;
        if depth + 1 == path.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        node = obj
            .entry((*key).to_string())
            .or_insert_with(|| Value::Object(serde_json::Map::new()));
    }
    unreachable!("empty override path");
}

/// Resolves a raw config document against CLI flags and environment
/// pairs, then deserializes strictly (unknown keys are errors).
pub fn resolve_config(
    mut raw: Value,
    cli: &CliOverrides,
    env: impl Iterator<Item = (String, String)>,
) -> Result<ExperimentConfig> {
    if !raw.is_object() {
        return Err(Error::InvalidConfig("config root must be an object".into()));
    }
    if let Some(out) = &cli.out_dir {
        set_path(&mut raw, &["out_dir"], Value::String(out.display().to_string()))?;
    }
    if let Some(seed) = cli.seed {
        set_path(&mut raw, &["seed"], Value::from(seed))?;
    }
    if let Some(variant) = cli.variant {
        set_path(&mut raw, &["variant"], Value::String(variant.label().into()))?;
    }
    let mut overrides: Vec<(String, String)> = env
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    overrides.sort();
    for (key, text) in overrides {
        let path: Vec<&str> = key[ENV_PREFIX.len()..].split("__").collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::InvalidConfig(format!("malformed override {key}")));
        }
        let value = serde_json::from_str(&text).unwrap_or(Value::String(text));
        set_path(&mut raw, &path, value)?;
    }
    let config: ExperimentConfig = serde_json::from_value(raw)
        .map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}

/// Reads and resolves a config file with overrides from the process
/// environment.
pub fn load_config(path: &Path, cli: &CliOverrides) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!(
        "{}: {e}",
        path.display()
    )))?;
    resolve_config(raw, cli, std::env::vars())
}
