//! Release acceptance checks. Each test covers one numbered criterion and
//! prints a single `criterion NN <name>: PASS/FAIL (...)` line; checks with
//! runtime budgets measure and enforce them. The heavier criteria share a
//! lock so their wall-clock budgets are not distorted by test parallelism.

use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use rand::Rng;
use robsim::calibrator::{
    calib_objective, calibrator_ascent_step, run_calibration, simulator_descent_step,
    CalibrationConfig, CalibratorParams,
};
use robsim::data::synthetic::{
    generate_synthetic, generate_with_truth, GroundTruth, SyntheticEnvConfig,
};
use robsim::data::{DatasetSchema, OfflineDataset, Outcomes, Split, Splits, Transition};
use robsim::error::Result;
use robsim::numerics::{
    backward, fd_gradient, forward, forward_cache, init_params, max_rel_err, Activation,
    ModelSpec, OutputActivation, Params,
};
use robsim::pipeline::{
    ablate, DatasetSource, DecisionSection, ExperimentConfig, RobustnessSection, RunOutput,
    SimulatorSection, Variant,
};
use robsim::policy::{
    decision_loss, decision_loss_grad, group_adv_loss, group_score_gradient, policy_forward,
    sample_group, train_policy, DecisionTrainConfig, PerturbationGroup, PolicyModel, TargetRef,
    TargetRule,
};
use robsim::robustness::{
    cvar, robustness_gate, robustness_score, DecisionMetrics, PerturbKind, PerturbSpec,
    RobustnessGateConfig,
};
use robsim::seeds;
use robsim::simulator::{
    batch_loss_grad, overall_accuracy, sim_accuracy, train_simulator, weighted_sample_loss,
    LossCoeffs, SimArchitecture, SimTrainConfig, SimulatorModel,
};

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id:02} {name}: {verdict} ({detail})");
    assert!(pass, "criterion {id:02} {name}: {verdict} ({detail})");
}

fn rand_state(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()
}

fn rand_row(rng: &mut rand_chacha::ChaCha8Rng, d: usize, k: usize, c: usize) -> Transition {
    let delivery_time = rng.gen_range(0..c);
    let on_time_status = u8::from(delivery_time <= (c - 1) / 2);
    let profit = rng.gen_range(0.0..1.0);
    Transition {
        state: rand_state(rng, d),
        action: rng.gen_range(0..k),
        next_state: rand_state(rng, d),
        outcomes: Outcomes {
            delay_risk: rng.gen_range(0..2u8),
            delivery_time,
            on_time_status,
            profit,
        },
        reward: profit + f64::from(on_time_status),
    }
}

fn single_row_dataset(row: Transition, d: usize, k: usize, c: usize) -> OfflineDataset {
    OfflineDataset {
        schema: DatasetSchema {
            feature_names: (0..d).map(|i| format!("f{i}")).collect(),
            d,
            k,
            c,
            on_time_threshold: (c - 1) / 2,
        },
        rows: vec![row],
        splits: Splits {
            train: vec![0],
            val: vec![],
            test: vec![],
        },
        ground_truth: None,
    }
}

fn rand_sim(rng: &mut rand_chacha::ChaCha8Rng) -> (SimulatorModel, usize, usize, usize) {
    let d = rng.gen_range(2..=5);
    let k = rng.gen_range(2..=4);
    let c = rng.gen_range(2..=5);
    let arch = SimArchitecture {
        latent: rng.gen_range(2..=4),
        encoder_hidden: vec![rng.gen_range(3..=6)],
        cov_hidden: if rng.gen_bool(0.5) {
            vec![rng.gen_range(2..=4)]
        } else {
            vec![]
        },
        head_hidden: if rng.gen_bool(0.3) { vec![3] } else { vec![] },
    };
    let model = SimulatorModel::init(d, k, c, &arch, rng.gen()).expect("valid dims");
    (model, d, k, c)
}

fn rand_coeffs(rng: &mut rand_chacha::ChaCha8Rng) -> LossCoeffs {
    LossCoeffs {
        next_state: rng.gen_range(0.1..2.0),
        reward: rng.gen_range(0.1..2.0),
        risk: rng.gen_range(0.1..2.0),
        time: rng.gen_range(0.1..2.0),
        status: rng.gen_range(0.1..2.0),
        recon: rng.gen_range(0.1..2.0),
        cov_nll: rng.gen_range(0.1..2.0),
    }
}

fn rand_group(
    rng: &mut rand_chacha::ChaCha8Rng,
    d: usize,
    k: usize,
    equal_reward: Option<f64>,
) -> PerturbationGroup {
    let m = rng.gen_range(2..=6);
    let rewards: Vec<f64> = (0..m)
        .map(|_| equal_reward.unwrap_or_else(|| rng.gen_range(0.0..2.0)))
        .collect();
    let mean_reward = rewards.iter().sum::<f64>() / m as f64;
    PerturbationGroup {
        nominal: rand_state(rng, d),
        latents: vec![vec![0.0; 2]; m],
        states: (0..m).map(|_| rand_state(rng, d)).collect(),
        actions: (0..m).map(|_| rng.gen_range(0..k)).collect(),
        rewards,
        mean_reward,
    }
}

fn flatten_w(w: &CalibratorParams) -> Vec<f64> {
    w.w.iter().flatten().copied().collect()
}

fn unflatten_w(vals: &[f64], k: usize, d: usize) -> CalibratorParams {
    CalibratorParams {
        w: vals.chunks(d).take(k).map(<[f64]>::to_vec).collect(),
    }
}

#[test]
fn criterion_01_metric_identities() {
    let lp = DecisionMetrics::new(0.5162, 0.5434);
    let dqn = DecisionMetrics::new(0.2827, 0.9326);
    let err_lp = (lp.diff - 0.0272).abs().max((lp.overall - 1.0596).abs());
    let err_dqn = (dqn.diff - 0.6499).abs().max((dqn.overall - 1.2153).abs());
    let err_acc = (overall_accuracy(0.4978, 0.1487, 0.5040) - 0.3835).abs();
    let pass = err_lp <= 1e-12 && err_dqn <= 1e-12 && err_acc <= 1e-4;
    report(
        1,
        "metric identities",
        pass,
        &format!("row errors {err_lp:.2e} / {err_dqn:.2e}, accuracy error {err_acc:.2e}"),
    );
}

#[test]
fn criterion_02_gradient_integrity() {
    let _guard = heavy();
    let start = Instant::now();
    const N: u64 = 100;
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    let mut worst_forward: f64 = 0.0;
    for i in 0..N {
        let mut rng = seeds::rng_idx(201, "fd_forward", i);
        let mut widths = vec![rng.gen_range(1..=5)];
        for _ in 0..rng.gen_range(0..3) {
            widths.push(rng.gen_range(1..=6));
        }
        widths.push(rng.gen_range(1..=4));
        let hidden = [Activation::Identity, Activation::Tanh, Activation::Relu]
            [rng.gen_range(0..3usize)];
        let output = [
            OutputActivation::Identity,
            OutputActivation::Sigmoid,
            OutputActivation::Softmax,
        ][rng.gen_range(0..3usize)];
        let spec = ModelSpec::new(&widths, hidden, output);
        let params = init_params(&spec, rng.gen()).unwrap();
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..*widths.last().unwrap())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let probe = |p: &Params, x: &[f64]| -> f64 {
            forward(p, x)
                .unwrap()
                .iter()
                .zip(&v)
                .map(|(y, vi)| y * vi)
                .sum()
        };
        let cache = forward_cache(&params, &x).unwrap();
        let (g_params, g_input) = backward(&params, &cache, &v).unwrap();
        let fd_params = fd_gradient(
            |vals| {
                let p = Params::from_values(spec.clone(), vals.to_vec()).unwrap();
                probe(&p, &x)
            },
            &params.values,
            H,
        );
        let fd_input = fd_gradient(|xs| probe(&params, xs), &x, H);
        worst_forward = worst_forward
            .max(max_rel_err(&g_params, &fd_params))
            .max(max_rel_err(&g_input, &fd_input));
    }

    let mut worst_sample: f64 = 0.0;
    for i in 0..N {
        let mut rng = seeds::rng_idx(202, "fd_sample", i);
        let (model, d, k, c) = rand_sim(&mut rng);
        let coeffs = rand_coeffs(&mut rng);
        let weight = rng.gen_range(0.0..2.0);
        let ds = single_row_dataset(rand_row(&mut rng, d, k, c), d, k, c);
        let (loss, grad) = batch_loss_grad(&model, &ds, &[0], Some(&[weight]), &coeffs).unwrap();
        let direct = weighted_sample_loss(&model, &ds.rows[0], weight, &coeffs).unwrap();
        assert!((loss - direct).abs() <= 1e-12, "batch loss mismatch");
        let fd = fd_gradient(
            |vals| {
                let mut m = model.clone();
                m.set_flat(vals).unwrap();
                weighted_sample_loss(&m, &ds.rows[0], weight, &coeffs).unwrap()
            },
            &model.to_flat(),
            H,
        );
        worst_sample = worst_sample.max(max_rel_err(&grad, &fd));
    }

    let mut worst_calib: f64 = 0.0;
    for i in 0..N {
        let mut rng = seeds::rng_idx(203, "fd_calib", i);
        let (model, d, k, c) = rand_sim(&mut rng);
        let rows: Vec<Transition> = (0..4).map(|_| rand_row(&mut rng, d, k, c)).collect();
        let batch: Vec<&Transition> = rows.iter().collect();
        let w = CalibratorParams {
            w: (0..k)
                .map(|_| (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .collect(),
        };
        let stepped = calibrator_ascent_step(&w, &model, &batch, 1.0).unwrap();
        let g_w: Vec<f64> = flatten_w(&stepped)
            .iter()
            .zip(&flatten_w(&w))
            .map(|(a, b)| a - b)
            .collect();
        let fd_w = fd_gradient(
            |vals| calib_objective(&unflatten_w(vals, k, d), &model, &batch).unwrap(),
            &flatten_w(&w),
            H,
        );
        let descended = simulator_descent_step(&w, &model, &batch, 1.0).unwrap();
        let g_theta: Vec<f64> = model
            .to_flat()
            .iter()
            .zip(&descended.to_flat())
            .map(|(a, b)| a - b)
            .collect();
        let fd_theta = fd_gradient(
            |vals| {
                let mut m = model.clone();
                m.set_flat(vals).unwrap();
                calib_objective(&w, &m, &batch).unwrap()
            },
            &model.to_flat(),
            H,
        );
        worst_calib = worst_calib
            .max(max_rel_err(&g_w, &fd_w))
            .max(max_rel_err(&g_theta, &fd_theta));
    }

    let mut worst_adv: f64 = 0.0;
    for i in 0..N {
        let mut rng = seeds::rng_idx(204, "fd_adv", i);
        let d = rng.gen_range(2..=4);
        let k = rng.gen_range(2..=4);
        let hidden = rng.gen_range(2..=4);
        let policy = PolicyModel::init(d, k, &[hidden], rng.gen()).unwrap();
        let group = rand_group(&mut rng, d, k, None);
        let grad = group_score_gradient(&group, &policy, group.mean_reward).unwrap();
        let fd = fd_gradient(
            |vals| {
                let mut p = policy.clone();
                p.net.values = vals.to_vec();
                group_adv_loss(&group, &p).unwrap().value
            },
            &policy.net.values,
            H,
        );
        worst_adv = worst_adv.max(max_rel_err(&grad, &fd));
    }

    let mut worst_decision: f64 = 0.0;
    for i in 0..N {
        let mut rng = seeds::rng_idx(205, "fd_decision", i);
        let (model, d, k, _c) = rand_sim(&mut rng);
        let policy = PolicyModel::init(d, k, &[rng.gen_range(2..=4)], rng.gen()).unwrap();
        let group = rand_group(&mut rng, d, k, None);
        let eta = rng.gen_range(0.0..2.0);
        let target = TargetRef::Fixed(rng.gen_range(0.5..1.8));
        let (_, grad) = decision_loss_grad(&group, &policy, &model, eta, &target).unwrap();
        let fd = fd_gradient(
            |vals| {
                let mut p = policy.clone();
                p.net.values = vals.to_vec();
                decision_loss(&group, &p, &model, eta, &target).unwrap().total
            },
            &policy.net.values,
            H,
        );
        worst_decision = worst_decision.max(max_rel_err(&grad, &fd));
    }

    let elapsed = start.elapsed().as_secs_f64();
    let worst = [
        worst_forward,
        worst_sample,
        worst_calib,
        worst_adv,
        worst_decision,
    ];
    let pass = worst.iter().all(|&w| w < TOL) && elapsed < 60.0;
    report(
        2,
        "gradient integrity",
        pass,
        &format!(
            "max rel err: forward {:.2e}, sample loss {:.2e}, calibration {:.2e}, \
             group advantage {:.2e}, decision {:.2e}; {elapsed:.1}s",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    );
}

#[test]
fn criterion_03_minimax_monotonicity() {
    let _guard = heavy();
    let run = || -> Result<(f64, f64)> {
        let ds = generate_synthetic(&SyntheticEnvConfig {
            d: 6,
            k: 3,
            c: 3,
            n_rows: 300,
            action_frequency_skew: 2.0,
            rare_action_label_bias: 0.2,
            label_noise: 0.05,
            seed: 33,
        })?;
        let arch = SimArchitecture {
            latent: 4,
            encoder_hidden: vec![8],
            cov_hidden: vec![4],
            head_hidden: vec![],
        };
        let mut model = SimulatorModel::init(6, 3, 3, &arch, 7)?;
        let train_idx = ds.split_indices(Split::Train);
        let mut worst_drop: f64 = 0.0;
        let mut worst_rise: f64 = 0.0;
        for b in 0..50u64 {
            let mut rng = seeds::rng_idx(301, "mono", b);
            let batch: Vec<&Transition> = (0..16)
                .map(|_| &ds.rows[train_idx[rng.gen_range(0..train_idx.len())]])
                .collect();
            let w = CalibratorParams {
                w: (0..3)
                    .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
            };
            let j0 = calib_objective(&w, &model, &batch)?;
            let ascended = calibrator_ascent_step(&w, &model, &batch, 1e-3)?;
            worst_drop = worst_drop.max(j0 - calib_objective(&ascended, &model, &batch)?);
            let descended = simulator_descent_step(&w, &model, &batch, 1e-4)?;
            worst_rise = worst_rise.max(calib_objective(&w, &descended, &batch)? - j0);
            model = descended;
        }
        Ok((worst_drop, worst_rise))
    };
    let (worst_drop, worst_rise) = run().unwrap();
    let pass = worst_drop <= 1e-9 && worst_rise <= 1e-9;
    report(
        3,
        "minimax monotonicity",
        pass,
        &format!("worst ascent drop {worst_drop:.2e}, worst descent rise {worst_rise:.2e}"),
    );
}

fn worst_action_mae(
    model: &SimulatorModel,
    truth: &GroundTruth,
    k: usize,
    states: &[&Vec<f64>],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for a in 0..k {
        let mut total = 0.0;
        for s in states {
            total += (model.predict_reward(s, a)? - truth.reward(s, a)).abs();
        }
        worst = worst.max(total / states.len() as f64);
    }
    Ok(worst)
}

#[test]
fn criterion_04_calibration_efficacy() {
    let _guard = heavy();
    let start = Instant::now();
    let run = || -> Result<(u32, f64, Vec<String>)> {
        let mut wins = 0;
        let mut drop_sum = 0.0;
        let mut lines = Vec::new();
        for seed in 41..=45u64 {
            let cfg = SyntheticEnvConfig {
                rare_action_label_bias: 0.5,
                action_frequency_skew: 1.0,
                seed,
                ..Default::default()
            };
            let ds = generate_synthetic(&cfg)?;
            let init = SimulatorModel::init(
                cfg.d,
                cfg.k,
                cfg.c,
                &SimArchitecture::default(),
                seeds::derive(seed, "sim_init"),
            )?;
            let train_cfg = SimTrainConfig {
                epochs: 8,
                early_stopping_patience: 0,
                seed: seeds::derive(seed, "sim_train"),
                ..Default::default()
            };
            let (uniform, _) = train_simulator(init, &ds, &train_cfg, None, &LossCoeffs::default())?;
            let cal_cfg = CalibrationConfig {
                rounds: 24,
                ascent_steps: 15,
                ascent_rate: 0.5,
                descent_steps: 80,
                descent_rate: 0.025,
                batch_size: 512,
                val_tolerance: 0.0,
                seed: seeds::derive(seed, "calibration"),
                ..Default::default()
            };
            let calibrated = run_calibration(uniform.clone(), &ds, &cal_cfg)?.model;
            let truth = ds.ground_truth.as_ref().expect("synthetic truth");
            let states: Vec<&Vec<f64>> = ds
                .split_rows(Split::Test)
                .map(|t| &t.state)
                .take(1500)
                .collect();
            let mae_uniform = worst_action_mae(&uniform, truth, cfg.k, &states)?;
            let mae_calibrated = worst_action_mae(&calibrated, truth, cfg.k, &states)?;
            if mae_calibrated < mae_uniform {
                wins += 1;
            }
            let rows: Vec<&Transition> = ds.split_rows(Split::Test).collect();
            let acc_uniform = sim_accuracy(&uniform, &rows)?.overall;
            let acc_calibrated = sim_accuracy(&calibrated, &rows)?.overall;
            drop_sum += acc_uniform - acc_calibrated;
            lines.push(format!(
                "seed {seed}: MAE {mae_uniform:.4}->{mae_calibrated:.4}, \
                 acc {acc_uniform:.4}->{acc_calibrated:.4}"
            ));
        }
        Ok((wins, drop_sum / 5.0, lines))
    };
    let (wins, mean_drop, lines) = run().unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = wins >= 4 && mean_drop < 0.01 && elapsed < 300.0;
    report(
        4,
        "calibration efficacy",
        pass,
        &format!(
            "worst-action MAE improved on {wins}/5 seeds, mean accuracy drop {mean_drop:.4}, \
             {elapsed:.0}s; {}",
            lines.join("; ")
        ),
    );
}

#[test]
#[ignore]
fn diag_c8() {
    for (tag, skew, n_rows) in [
        ("skew2.5 clean", 2.5f64, 8000usize),
        ("skew3 clean", 3.0, 8000),
        ("skew3 clean n12k", 3.0, 12000),
    ] {
        for seed in 81..=85u64 {
            let dir = tempfile::tempdir().expect("tempdir");
            let mut config = ablation_config(seed, dir.path().join("grid"));
            if let DatasetSource::Synthetic(env) = &mut config.dataset {
                env.d = 8;
                env.k = 4;
                env.c = 5;
                env.n_rows = 8000;
                env.action_frequency_skew = 1.0;
                env.rare_action_label_bias = 0.5;
            }
            config.simulator.arch.latent = 6;
            config.simulator.train.epochs = 12;
            config.simulator.train.batch_size = 128;
            config.simulator.coeffs.cov_nll = 0.1;
            config.calibration = CalibrationConfig {
                rounds: cal_rounds,
                ascent_steps: 15,
                ascent_rate: asc_rate,
                descent_steps: desc_steps,
                descent_rate: desc_rate,
                batch_size: 512,
                val_tolerance: 0.0,
                seed: 0,
            };
            config.decision.hidden = vec![8];
            config.robustness.eval_rows = 512;
            config.robustness.runs = 8;
            let out = ablate(&config).expect("ablate");
            for run in &out.runs {
                for kind in [PerturbKind::RandomInput, PerturbKind::LatentStructured] {
                    let sweep = run
                        .evaluation
                        .sweeps
                        .iter()
                        .find(|s| s.kind == kind)
                        .expect("sweep summary");
                    let full = run
                        .sweeps
                        .iter()
                        .find(|r| r.kind == kind)
                        .expect("sweep report");
                    let curve: Vec<String> = full
                        .levels
                        .iter()
                        .map(|l| format!("{:.3}", l.metrics.overall))
                        .collect();
                    println!(
                        "[{tag}] seed {seed} {:?} {:>8}: slope {:+.5} cvar@0.5 {:.5} \
                         nominal {:.4} curve [{}]",
                        kind,
                        run.evaluation.variant.label(),
                        sweep.slope,
                        sweep.cvar_at_half,
                        sweep.nominal_overall,
                        curve.join(", ")
                    );
                }
            }
        }
    }
}

#[test]
#[ignore]
fn diag_c4() {
    let seed = 41u64;
    for (epochs, skew, rounds, descent_steps, batch, rate, ascent_steps, ascent_rate) in [
        (8usize, 1.0f64, 24usize, 80usize, 512usize, 0.025f64, 15usize, 0.5f64),
        (8, 1.0, 32, 80, 512, 0.02, 15, 0.5),
    ] {
        let cfg = SyntheticEnvConfig {
            rare_action_label_bias: 0.5,
            action_frequency_skew: skew,
            seed,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let mut counts = vec![0usize; cfg.k];
        for t in &ds.rows {
            counts[t.action] += 1;
        }
        let init = SimulatorModel::init(
            cfg.d,
            cfg.k,
            cfg.c,
            &SimArchitecture::default(),
            seeds::derive(seed, "sim_init"),
        )
        .unwrap();
        let train_cfg = SimTrainConfig {
            epochs,
            early_stopping_patience: 0,
            seed: seeds::derive(seed, "sim_train"),
            ..Default::default()
        };
        let t0 = Instant::now();
        let (uniform, _) =
            train_simulator(init, &ds, &train_cfg, None, &LossCoeffs::default()).unwrap();
        let t_train = t0.elapsed().as_secs_f64();
        let cal_cfg = CalibrationConfig {
            rounds,
            ascent_steps,
            ascent_rate,
            descent_steps,
            descent_rate: rate,
            batch_size: batch,
            val_tolerance: 0.0,
            seed: seeds::derive(seed, "calibration"),
            ..Default::default()
        };
        let t1 = Instant::now();
        let outcome = run_calibration(uniform.clone(), &ds, &cal_cfg).unwrap();
        let calibrated = outcome.model;
        let t_cal = t1.elapsed().as_secs_f64();
        let truth = ds.ground_truth.as_ref().unwrap();
        let states: Vec<&Vec<f64>> = ds
            .split_rows(Split::Test)
            .map(|t| &t.state)
            .take(1500)
            .collect();
        let mut mean_b = vec![0.0; cfg.k];
        for s in states.iter().take(500) {
            let b = robsim::calibrator::calib_weights(s, &outcome.calibrator).unwrap();
            for (acc, bi) in mean_b.iter_mut().zip(&b) {
                *acc += bi / 500.0;
            }
        }
        println!(
            "epochs {epochs} skew {skew} rounds {rounds}x{descent_steps} batch {batch} rate \
             {rate}: counts {counts:?}, train {t_train:.1}s cal {t_cal:.1}s, mean weight \
             {mean_b:.3?}"
        );
        for a in 0..cfg.k {
            let mut mae_u = 0.0;
            let mut mae_c = 0.0;
            let mut mae_mean = 0.0;
            let mut mean_pred = 0.0;
            for s in &states {
                mean_pred += truth.reward(s, a);
            }
            mean_pred /= states.len() as f64;
            for s in &states {
                let rt = truth.reward(s, a);
                mae_u += (uniform.predict_reward(s, a).unwrap() - rt).abs();
                mae_c += (calibrated.predict_reward(s, a).unwrap() - rt).abs();
                mae_mean += (mean_pred - rt).abs();
            }
            let n = states.len() as f64;
            println!(
                "  action {a}: MAE uniform {:.4} calibrated {:.4} (const-mean ref {:.4})",
                mae_u / n,
                mae_c / n,
                mae_mean / n
            );
        }
        let rows: Vec<&Transition> = ds.split_rows(Split::Test).collect();
        println!(
            "  acc uniform {:.4} calibrated {:.4}",
            sim_accuracy(&uniform, &rows).unwrap().overall,
            sim_accuracy(&calibrated, &rows).unwrap().overall
        );
    }
}

#[test]
fn criterion_05_group_advantage_identities() {
    let mut worst_rel: f64 = 0.0;
    for g in 0..10_000u64 {
        let mut rng = seeds::rng_idx(501, "groups", g);
        let m = rng.gen_range(2..=9);
        let rewards: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..2.0)).collect();
        let mean = rewards.iter().sum::<f64>() / m as f64;
        let sum_adv: f64 = rewards.iter().map(|r| r - mean).sum();
        let scale = rewards.iter().map(|r| r.abs()).sum::<f64>().max(1.0);
        worst_rel = worst_rel.max(sum_adv.abs() / scale);
    }
    let sums_ok = worst_rel <= 1e-12;

    let mut worst_equal: f64 = 0.0;
    let mut exact_zero = true;
    for g in 0..100u64 {
        let mut rng = seeds::rng_idx(502, "equal_groups", g);
        let d = rng.gen_range(2..=4);
        let k = rng.gen_range(2..=4);
        let policy = PolicyModel::init(d, k, &[3], rng.gen()).unwrap();
        let value = rng.gen_range(0.0..2.0);
        let group = rand_group(&mut rng, d, k, Some(value));
        let loss = group_adv_loss(&group, &policy).unwrap().value;
        worst_equal = worst_equal.max(loss.abs());
        let dyadic = rand_group(&mut rng, d, k, Some(0.75));
        exact_zero &= group_adv_loss(&dyadic, &policy).unwrap().value == 0.0;
    }
    let equal_ok = worst_equal <= 1e-13 && exact_zero;

    let mut rng = seeds::rng(503, "linearity");
    let (model, d, k, _c) = rand_sim(&mut rng);
    let policy = PolicyModel::init(d, k, &[4], rng.gen()).unwrap();
    let group = rand_group(&mut rng, d, k, None);
    let target = TargetRef::Fixed(1.2);
    let etas = [0.3, 0.9, 1.7];
    let losses: Vec<f64> = etas
        .iter()
        .map(|&eta| {
            decision_loss(&group, &policy, &model, eta, &target)
                .unwrap()
                .total
        })
        .collect();
    let slope_low = (losses[1] - losses[0]) / (etas[1] - etas[0]);
    let slope_high = (losses[2] - losses[1]) / (etas[2] - etas[1]);
    let nonlinearity = (slope_low - slope_high).abs();
    let linear_ok = nonlinearity <= 1e-10;

    let pass = sums_ok && equal_ok && linear_ok;
    report(
        5,
        "group advantage identities",
        pass,
        &format!(
            "advantage sum rel {worst_rel:.2e}, equal-reward loss {worst_equal:.2e} \
             (dyadic exact: {exact_zero}), slope nonlinearity {nonlinearity:.2e}"
        ),
    );
}

#[test]
fn criterion_06_variance_reduction() {
    let _guard = heavy();
    let start = Instant::now();
    let run = || -> Result<(f64, f64)> {
        let cfg = SyntheticEnvConfig {
            d: 8,
            k: 3,
            c: 3,
            n_rows: 3000,
            action_frequency_skew: 2.0,
            rare_action_label_bias: 0.1,
            label_noise: 0.02,
            seed: 61,
        };
        let ds = generate_synthetic(&cfg)?;
        let arch = SimArchitecture {
            latent: 6,
            encoder_hidden: vec![16],
            cov_hidden: vec![8],
            head_hidden: vec![],
        };
        let init = SimulatorModel::init(8, 3, 3, &arch, 62)?;
        let train_cfg = SimTrainConfig {
            epochs: 4,
            batch_size: 128,
            early_stopping_patience: 0,
            seed: 63,
            ..Default::default()
        };
        let (sim, _) = train_simulator(init, &ds, &train_cfg, None, &LossCoeffs::default())?;
        let group_cfg = DecisionTrainConfig {
            group_size: 8,
            advantage_coeff: 1.0,
            perturb_scale: 1.0,
            learning_rate: 0.05,
            epochs: 1,
            batch_size: 32,
            target_rule: TargetRule::PerStateMax,
            seed: 64,
        };
        let (frozen, _) = train_policy(PolicyModel::init(8, 3, &[8], 65)?, &sim, &ds, &group_cfg)?;

        let states: Vec<Vec<f64>> = ds
            .split_rows(Split::Test)
            .take(8)
            .map(|t| t.state.clone())
            .collect();
        const REPS: usize = 25;
        let dim = frozen.net.values.len();
        let mut var_relative = 0.0;
        let mut var_absolute = 0.0;
        let base = seeds::derive(66, "variance_draws");
        for (si, s) in states.iter().enumerate() {
            let mut grads_rel = Vec::with_capacity(REPS);
            let mut grads_abs = Vec::with_capacity(REPS);
            for rep in 0..REPS {
                let gseed = seeds::derive_idx(base, (si * REPS + rep) as u64);
                let group = sample_group(&sim, &frozen, s, &group_cfg, gseed)?;
                grads_rel.push(group_score_gradient(&group, &frozen, group.mean_reward)?);
                grads_abs.push(group_score_gradient(&group, &frozen, 0.0)?);
            }
            for j in 0..dim {
                let var = |draws: &[Vec<f64>]| {
                    let mean = draws.iter().map(|g| g[j]).sum::<f64>() / REPS as f64;
                    draws.iter().map(|g| (g[j] - mean).powi(2)).sum::<f64>() / REPS as f64
                };
                var_relative += var(&grads_rel);
                var_absolute += var(&grads_abs);
            }
        }
        let denom = (states.len() * dim) as f64;
        Ok((var_relative / denom, var_absolute / denom))
    };
    let (var_relative, var_absolute) = run().unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = var_relative <= var_absolute && elapsed < 120.0;
    report(
        6,
        "variance reduction",
        pass,
        &format!(
            "mean component variance: group-relative {var_relative:.3e} vs absolute \
             {var_absolute:.3e}, {elapsed:.0}s"
        ),
    );
}

#[test]
fn criterion_07_non_collapse() {
    let _guard = heavy();
    let run = || -> Result<(u32, Vec<String>)> {
        let d = 6;
        let c = 3;
        let mut wins = 0;
        let mut lines = Vec::new();
        for seed in 71..=75u64 {
            let cfg = SyntheticEnvConfig {
                d,
                k: 2,
                c,
                n_rows: 4000,
                action_frequency_skew: 1.0,
                rare_action_label_bias: 0.0,
                label_noise: 0.0,
                seed,
            };
            let ds = generate_with_truth(&cfg, GroundTruth::contrast(d, c))?;
            let arch = SimArchitecture {
                latent: 6,
                encoder_hidden: vec![16],
                cov_hidden: vec![8],
                head_hidden: vec![],
            };
            let init = SimulatorModel::init(d, 2, c, &arch, seeds::derive(seed, "sim_init"))?;
            let train_cfg = SimTrainConfig {
                epochs: 10,
                batch_size: 128,
                early_stopping_patience: 0,
                seed: seeds::derive(seed, "sim_train"),
                ..Default::default()
            };
            let (sim, _) = train_simulator(init, &ds, &train_cfg, None, &LossCoeffs::default())?;
            let cal_cfg = CalibrationConfig {
                rounds: 4,
                ascent_steps: 4,
                descent_steps: 20,
                batch_size: 128,
                seed: seeds::derive(seed, "calibration"),
                ..Default::default()
            };
            let calibrated = run_calibration(sim, &ds, &cal_cfg)?.model;
            let policy_cfg = DecisionTrainConfig {
                group_size: 8,
                advantage_coeff: 1.0,
                perturb_scale: 1.0,
                learning_rate: 0.1,
                epochs: 6,
                batch_size: 32,
                target_rule: TargetRule::PerStateMax,
                seed: seeds::derive(seed, "policy_train"),
            };
            let init_policy = PolicyModel::init(d, 2, &[8], seeds::derive(seed, "policy_init"))?;
            let (policy, _) = train_policy(init_policy, &calibrated, &ds, &policy_cfg)?;
            let states: Vec<&Vec<f64>> = ds
                .split_rows(Split::Test)
                .map(|t| &t.state)
                .take(400)
                .collect();
            let mut mean_p0 = 0.0;
            for s in &states {
                mean_p0 += policy_forward(&policy, s)?[0];
            }
            mean_p0 /= states.len() as f64;
            if mean_p0 >= 0.5 {
                wins += 1;
            }
            lines.push(format!("seed {seed}: P(high-mean) {mean_p0:.3}"));
        }
        Ok((wins, lines))
    };
    let (wins, lines) = run().unwrap();
    let pass = wins >= 4;
    report(
        7,
        "non-collapse on high-variance action",
        pass,
        &format!("{wins}/5 seeds; {}", lines.join("; ")),
    );
}

fn ablation_config(seed: u64, out_dir: std::path::PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSource::Synthetic(SyntheticEnvConfig {
            d: 8,
            k: 3,
            c: 3,
            n_rows: 8000,
            action_frequency_skew: 2.0,
            rare_action_label_bias: 0.3,
            label_noise: 0.05,
            seed: 0,
        }),
        simulator: SimulatorSection {
            arch: SimArchitecture {
                latent: 6,
                encoder_hidden: vec![16],
                cov_hidden: vec![8],
                head_hidden: vec![],
            },
            train: SimTrainConfig {
                epochs: 12,
                batch_size: 256,
                early_stopping_patience: 0,
                ..Default::default()
            },
            coeffs: LossCoeffs::default(),
        },
        calibration: CalibrationConfig {
            rounds: 4,
            ascent_steps: 4,
            descent_steps: 20,
            batch_size: 128,
            ..Default::default()
        },
        decision: DecisionSection {
            hidden: vec![12],
            train: DecisionTrainConfig {
                group_size: 10,
                advantage_coeff: 1.0,
                perturb_scale: 1.0,
                learning_rate: 0.1,
                epochs: 10,
                batch_size: 48,
                target_rule: TargetRule::PerStateMax,
                seed: 0,
            },
        },
        robustness: RobustnessSection {
            levels: vec![0.0, 0.1, 0.25, 0.5, 1.0],
            runs: 3,
            eval_rows: 256,
            delta: -0.05,
            seed: 0,
        },
        variant: Variant::Both,
        out_dir,
        seed,
    }
}

#[test]
fn criterion_08_robustness_ordering() {
    let _guard = heavy();
    let start = Instant::now();
    let run = || -> Result<(u32, u32, f64, f64, Vec<String>)> {
        let mut slope_wins = 0;
        let mut cvar_wins = 0;
        let mut nominal_none = 0.0;
        let mut nominal_both = 0.0;
        let mut lines = Vec::new();
        for seed in 81..=85u64 {
            let dir = tempfile::tempdir().expect("tempdir");
            let config = ablation_config(seed, dir.path().join("grid"));
            let out = ablate(&config)?;
            let latent = |run: &RunOutput| {
                run.evaluation
                    .sweeps
                    .iter()
                    .find(|s| s.kind == PerturbKind::LatentStructured)
                    .expect("latent sweep")
                    .clone()
            };
            let by_variant = |v: Variant| {
                out.runs
                    .iter()
                    .find(|r| r.evaluation.variant == v)
                    .expect("variant run")
            };
            let none = latent(by_variant(Variant::None));
            let both = latent(by_variant(Variant::Both));
            if both.slope.abs() <= none.slope.abs() {
                slope_wins += 1;
            }
            if both.cvar_at_half >= none.cvar_at_half {
                cvar_wins += 1;
            }
            nominal_none += none.nominal_overall / 5.0;
            nominal_both += both.nominal_overall / 5.0;
            lines.push(format!(
                "seed {seed}: slope {:.4} vs {:.4}, cvar@0.5 {:.4} vs {:.4}",
                both.slope, none.slope, both.cvar_at_half, none.cvar_at_half
            ));
        }
        Ok((slope_wins, cvar_wins, nominal_none, nominal_both, lines))
    };
    let (slope_wins, cvar_wins, nominal_none, nominal_both, lines) = run().unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let nominal_gap = (nominal_both - nominal_none).abs();
    let nominal_ok = nominal_gap <= 0.02 * nominal_none.abs();
    let pass = slope_wins >= 4 && cvar_wins >= 4 && nominal_ok && elapsed < 600.0;
    report(
        8,
        "robustness ordering",
        pass,
        &format!(
            "slope {slope_wins}/5, cvar {cvar_wins}/5, nominal overall {nominal_both:.4} vs \
             {nominal_none:.4} (gap {nominal_gap:.4}), {elapsed:.0}s; {}",
            lines.join("; ")
        ),
    );
}

#[test]
fn criterion_09_score_and_cvar_contracts() {
    let run = || -> Result<(f64, bool, bool, bool)> {
        let mut rng = seeds::rng(901, "contracts");
        let arch = SimArchitecture {
            latent: 3,
            encoder_hidden: vec![6],
            cov_hidden: vec![4],
            head_hidden: vec![],
        };
        let model = SimulatorModel::init(4, 3, 3, &arch, 902)?;
        let policy = PolicyModel::init(4, 3, &[4], 903)?;
        let states: Vec<Vec<f64>> = (0..6).map(|_| rand_state(&mut rng, 4)).collect();
        let mut worst_zero: f64 = 0.0;
        let mut signs_ok = true;
        for kind in [PerturbKind::LatentStructured, PerturbKind::RandomInput] {
            let spec = PerturbSpec {
                kind,
                magnitude: 0.0,
                samples: 3,
                seed: 904,
            };
            let r = robustness_score(&policy, &model, &states, &spec)?;
            worst_zero = worst_zero.max(r.abs());
            signs_ok &= r.is_sign_positive();
        }
        let gate = RobustnessGateConfig { delta: -0.05 };
        let strict = !robustness_gate(-0.05, &gate)? && robustness_gate(-0.05 + 1e-9, &gate)?;
        let constant = cvar(&vec![0.7; 12], 0.05)? == 0.7 && cvar(&vec![0.5; 12], 1.0)? == 0.5;
        let ladder: Vec<f64> = (1..=100).map(f64::from).collect();
        let ladder_ok = cvar(&ladder, 0.05)? == 3.0;
        Ok((worst_zero, signs_ok && strict, constant, ladder_ok))
    };
    let (worst_zero, gate_ok, constant_ok, ladder_ok) = run().unwrap();
    let pass = worst_zero <= 1e-9 && gate_ok && constant_ok && ladder_ok;
    report(
        9,
        "score and cvar contracts",
        pass,
        &format!(
            "zero-magnitude score {worst_zero:.2e}, strict gate {gate_ok}, constant cvar \
             {constant_ok}, 1..100 cvar@5% = 3: {ladder_ok}"
        ),
    );
}

fn reproducibility_config(out_dir: std::path::PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSource::Synthetic(SyntheticEnvConfig {
            d: 3,
            k: 2,
            c: 3,
            n_rows: 80,
            action_frequency_skew: 2.0,
            rare_action_label_bias: 0.2,
            label_noise: 0.05,
            seed: 0,
        }),
        simulator: SimulatorSection {
            arch: SimArchitecture {
                latent: 3,
                encoder_hidden: vec![6],
                cov_hidden: vec![4],
                head_hidden: vec![],
            },
            train: SimTrainConfig {
                epochs: 3,
                batch_size: 32,
                early_stopping_patience: 0,
                ..Default::default()
            },
            coeffs: LossCoeffs::default(),
        },
        calibration: CalibrationConfig {
            rounds: 2,
            ascent_steps: 2,
            descent_steps: 3,
            batch_size: 32,
            ..Default::default()
        },
        decision: DecisionSection {
            hidden: vec![4],
            train: DecisionTrainConfig {
                group_size: 3,
                epochs: 2,
                batch_size: 16,
                ..Default::default()
            },
        },
        robustness: RobustnessSection {
            levels: vec![0.0, 0.5],
            runs: 2,
            eval_rows: 8,
            delta: -0.05,
            seed: 0,
        },
        variant: Variant::Both,
        out_dir,
        seed: 10,
    }
}

#[test]
fn criterion_10_reproducibility() {
    let _guard = heavy();
    let dir = tempfile::tempdir().expect("tempdir");
    let first = reproducibility_config(dir.path().join("a"));
    let second = reproducibility_config(dir.path().join("b"));
    ablate(&first).unwrap();
    ablate(&second).unwrap();
    let mut compared = Vec::new();
    let mut identical = true;
    let mut files = vec![
        "summary.csv".to_string(),
        "ablation.csv".to_string(),
    ];
    for variant in Variant::ALL {
        files.push(format!("{}/summary.csv", variant.label()));
    }
    for name in files {
        let a = std::fs::read(first.out_dir.join(&name)).expect("first run output");
        let b = std::fs::read(second.out_dir.join(&name)).expect("second run output");
        identical &= a == b;
        compared.push(name);
    }
    report(
        10,
        "ablation reproducibility",
        identical,
        &format!("byte-compared {}", compared.join(", ")),
    );
}
