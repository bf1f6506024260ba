//! `robsim`: stage-by-stage or end-to-end experiment runs.
//!
//! Every subcommand reads the same JSON experiment config; `--seed`,
//! `--variant`, and `--out` override the file, and `ROBSIM_*` environment
//! variables override everything (`ROBSIM_section__key=value`).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use robsim::data::store::{load_dataset, save_dataset};
use robsim::pipeline::{
    ablate, build_dataset, effective_calibration_config, effective_decision_config,
    effective_sim_config, evaluate, load_config, policy_init_seed, run_pipeline, CliOverrides,
    ExperimentConfig, Variant,
};
use robsim::pipeline::run::{SUMMARY_FILE, SWEEP_ROWS_FILE};
use robsim::policy::{load_policy, save_policy, train_policy, PolicyModel};
use robsim::robustness::{
    sweep, write_summary_csv, write_sweep_jsonl, OutcomeOracle, PerturbKind,
    RobustnessGateConfig,
};
use robsim::calibrator::{run_calibration, save_calibrator};
use robsim::simulator::{load_simulator, save_simulator, train_simulator, SimulatorModel};
use robsim::Result;

#[derive(Parser)]
#[command(name = "robsim", version, about = "Calibrated surrogate simulation and perturbation-robust decision policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the variant: none | sim_cal | dec_pert | both.
    #[arg(long)]
    variant: Option<String>,
}

impl ConfigArgs {
    fn load(&self, out_dir: Option<&PathBuf>) -> Result<ExperimentConfig> {
        let variant = self.variant.as_deref().map(Variant::parse).transpose()?;
        let cli = CliOverrides {
            out_dir: out_dir.cloned(),
            seed: self.seed,
            variant,
        };
        load_config(&self.config, &cli)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest the configured dataset and write it to a file.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a simulator on a saved dataset.
    TrainSim {
        #[command(flatten)]
        config: ConfigArgs,
        /// Input dataset file.
        #[arg(long)]
        data: PathBuf,
        /// Output simulator checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Adversarially calibrate a pretrained simulator.
    Calibrate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Input simulator checkpoint.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output calibrated simulator checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Optional output path for the calibrator weights.
        #[arg(long)]
        calibrator: Option<PathBuf>,
    },
    /// Train a decision policy against a saved simulator.
    TrainPolicy {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Simulator checkpoint to train against.
        #[arg(long)]
        sim: PathBuf,
        /// Output policy checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the robustness evaluation for saved checkpoints.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sim: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run perturbation sweeps only.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sim: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one kind: latent_structured | random_input.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Run the full pipeline for one variant.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory; overrides the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run all four variants over a shared dataset and combine reports.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Grid directory; overrides the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> Result<PerturbKind> {
    match s {
        "latent_structured" => Ok(PerturbKind::LatentStructured),
        "random_input" => Ok(PerturbKind::RandomInput),
        other => Err(robsim::Error::InvalidConfig(format!(
            "kind {other:?}; expected latent_structured or random_input"
        ))),
    }
}

fn eval_states(
    config: &ExperimentConfig,
    ds: &robsim::data::OfflineDataset,
) -> Vec<Vec<f64>> {
    let test: Vec<&robsim::data::Transition> =
        ds.split_rows(robsim::data::Split::Test).collect();
    let pool: Vec<&robsim::data::Transition> = if test.is_empty() {
        ds.rows.iter().collect()
    } else {
        test
    };
    pool.into_iter()
        .take(config.robustness.eval_rows)
        .map(|t| t.state.clone())
        .collect()
}

fn real_main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, out } => {
            let cfg = config.load(None)?;
            let (ds, report) = build_dataset(&cfg)?;
            save_dataset(&out, &ds)?;
            if let Some(r) = report {
                println!("ingested {} rows ({} dropped)", r.rows_read, r.rows_dropped);
            }
            println!("wrote {} ({} rows)", out.display(), ds.rows.len());
        }
        Command::TrainSim { config, data, out } => {
            let cfg = config.load(None)?;
            let ds = load_dataset(&data)?;
            let sim_cfg = effective_sim_config(&cfg);
            let init = SimulatorModel::init(
                ds.schema.d,
                ds.schema.k,
                ds.schema.c,
                &cfg.simulator.arch,
                sim_cfg.seed,
            )?;
            let (model, epochs) =
                train_simulator(init, &ds, &sim_cfg, None, &cfg.simulator.coeffs)?;
            save_simulator(&out, &model)?;
            let last = epochs.last().expect("≥ 1 epoch");
            println!(
                "wrote {} (epoch {}, val loss {:.6})",
                out.display(),
                last.epoch,
                last.val_loss
            );
        }
        Command::Calibrate {
            config,
            data,
            input,
            out,
            calibrator,
        } => {
            let cfg = config.load(None)?;
            let ds = load_dataset(&data)?;
            let model = load_simulator(&input)?;
            let outcome = run_calibration(model, &ds, &effective_calibration_config(&cfg))?;
            save_simulator(&out, &outcome.model)?;
            if let Some(path) = calibrator {
                save_calibrator(&path, &outcome.calibrator)?;
                println!("wrote {}", path.display());
            }
            let last = outcome.trace.last().expect("≥ 1 round");
            println!(
                "wrote {} (round {}, val residual {:.6})",
                out.display(),
                last.round,
                last.val_overall
            );
        }
        Command::TrainPolicy {
            config,
            data,
            sim,
            out,
        } => {
            let cfg = config.load(None)?;
            let ds = load_dataset(&data)?;
            let simulator = load_simulator(&sim)?;
            let init = PolicyModel::init(
                ds.schema.d,
                ds.schema.k,
                &cfg.decision.hidden,
                policy_init_seed(&cfg),
            )?;
            let (policy, trace) =
                train_policy(init, &simulator, &ds, &effective_decision_config(&cfg))?;
            save_policy(&out, &policy)?;
            let last = trace.last().expect("≥ 1 epoch");
            println!(
                "wrote {} (epoch {}, val expected reward {:.6})",
                out.display(),
                last.epoch,
                last.val_expected_reward
            );
        }
        Command::Evaluate {
            config,
            data,
            sim,
            policy,
            out,
        } => {
            let cfg = config.load(Some(&out))?;
            let ds = load_dataset(&data)?;
            let simulator = load_simulator(&sim)?;
            let policy = load_policy(&policy)?;
            std::fs::create_dir_all(&out)?;
            let (report, _) = evaluate(&cfg, &out, &ds, &simulator, &policy)?;
            println!(
                "wrote {} (argmax overall {:.4} by {}, gate {})",
                out.join("evaluation.json").display(),
                report
                    .decision_ground_truth
                    .unwrap_or(report.decision_simulator)
                    .overall,
                report.oracle,
                if report.gate { "pass" } else { "fail" }
            );
        }
        Command::Sweep {
            config,
            data,
            sim,
            policy,
            out,
            kind,
        } => {
            let cfg = config.load(Some(&out))?;
            let ds = load_dataset(&data)?;
            let simulator = load_simulator(&sim)?;
            let policy = load_policy(&policy)?;
            std::fs::create_dir_all(&out)?;
            let kinds = match kind {
                Some(k) => vec![parse_kind(&k)?],
                None => vec![PerturbKind::LatentStructured, PerturbKind::RandomInput],
            };
            let states = eval_states(&cfg, &ds);
            let seed = robsim::pipeline::evaluate_seed(&cfg);
            let gate = RobustnessGateConfig {
                delta: cfg.robustness.delta,
            };
            let oracle = match &ds.ground_truth {
                Some(truth) => OutcomeOracle::GroundTruth(truth),
                None => OutcomeOracle::Simulator(&simulator),
            };
            let mut reports = Vec::new();
            for kind in kinds {
                reports.push(sweep(
                    &policy,
                    &simulator,
                    kind,
                    &cfg.robustness.levels,
                    cfg.robustness.runs,
                    robsim::seeds::derive(seed, kind.label()),
                    &states,
                    &oracle,
                    &gate,
                )?);
            }
            write_sweep_jsonl(&out.join(SWEEP_ROWS_FILE), cfg.variant.label(), &reports)?;
            write_summary_csv(&out.join(SUMMARY_FILE), cfg.variant.label(), &reports)?;
            for r in &reports {
                println!("{}: slope {:.6}", r.kind.label(), r.slope);
            }
            println!("wrote {}", out.join(SUMMARY_FILE).display());
        }
        Command::Run { config, out } => {
            let cfg = config.load(out.as_ref())?;
            let run = run_pipeline(&cfg)?;
            println!(
                "run {} ({}) gate {}",
                run.manifest.id,
                run.manifest.variant.label(),
                if run.evaluation.gate { "pass" } else { "fail" }
            );
            println!("wrote {}", cfg.out_dir.join("manifest.json").display());
        }
        Command::Ablate { config, out } => {
            let cfg = config.load(out.as_ref())?;
            let grid = ablate(&cfg)?;
            for run in &grid.runs {
                println!(
                    "{}: gate {} (manifest {})",
                    run.manifest.variant.label(),
                    if run.evaluation.gate { "pass" } else { "fail" },
                    run.manifest.id
                );
            }
            println!("wrote {}", grid.summary_path.display());
            println!("wrote {}", grid.ablation_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
