//! Release gate: one PASS/FAIL line per acceptance criterion.

use std::process::ExitCode;
use std::time::Instant;

use fluidctl_core::baselines::{make_baseline, BaselineKind};
use fluidctl_core::environment::{make_environment, EnvironmentId, Simulator};
use fluidctl_core::evaluation::{run_test, test_cases, TestCase};
use fluidctl_core::losses::{Ablation, LossWeights};
use fluidctl_core::policy::{count_parameters_for, default_dims, write_checkpoint, OutputKind, PolicyController, PolicyParams};
use fluidctl_core::rigid_body::Dof;
use fluidctl_core::training::{train_diffphys, TrainConfig};
use fluidctl_core::verification::{
    baseline_oracle_error, coupled_gradient_check, loopshaping_coefficients_exact, loss_example_error, projection_check,
    replay_drift,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

fn desk(id: EnvironmentId, cells: usize) -> Result<Simulator, String> {
    let patch: toml::Table = toml::from_str(&format!("grid_cells = {cells}")).map_err(|e| e.to_string())?;
    make_environment(id, Some(&patch)).and_then(Simulator::new).map_err(|e| e.to_string())
}

fn projection() -> Outcome {
    let mut worst = 0.0f64;
    let mut slowest = 0.0f64;
    for seed in 0..5 {
        let c = projection_check(64, seed, 1e-6).map_err(|e| e.to_string())?;
        worst = worst.max(c.ratio);
        slowest = slowest.max(c.seconds);
    }
    Ok((
        worst < 1e-4 && slowest < 1.0,
        format!("64x64 with box, 5 fields: worst divergence ratio {worst:.2e}, slowest solve {slowest:.3}s"),
    ))
}

fn adjoint() -> Outcome {
    let mut worst = 0.0f64;
    let mut ok = true;
    for seed in 0..10 {
        let r = coupled_gradient_check(seed, 32, 4).map_err(|e| e.to_string())?;
        ok &= r.passes(1e-3);
        worst = worst.max(r.max_rel_err);
    }
    Ok((ok, format!("l=4, 32x32, 10 seeds: worst relative error {worst:.2e}")))
}

fn baselines() -> Outcome {
    let mut pid = 0.0f64;
    let mut ls = 0.0f64;
    for seed in 0..10 {
        let (p, l) = baseline_oracle_error(seed, 100);
        pid = pid.max(p);
        ls = ls.max(l);
    }
    let exact = loopshaping_coefficients_exact();
    Ok((
        pid <= 1e-12 && ls <= 1e-12 && exact,
        format!("100-step sequences: pid {pid:.1e}, loop-shaping {ls:.1e}; coefficients bit-exact: {exact}"),
    ))
}

fn architecture() -> Outcome {
    let cfg = make_environment(EnvironmentId::BaseNR, None).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = PolicyParams::for_environment(&cfg, OutputKind::Bounded, &mut rng).map_err(|e| e.to_string())?;
    let dims = p.dims();
    let n = p.count_parameters();
    Ok((
        n == 2206 && count_parameters_for(&dims) == 2206 && dims == default_dims(Dof::Two),
        format!("2-DOF dims {dims:?}, {n} trainable parameters"),
    ))
}

struct Trained {
    seed: u64,
    params: PolicyParams,
    error: f64,
    minutes: f64,
}

fn unseen_case(sim: &Simulator) -> TestCase {
    test_cases(&sim.cfg, 9001, 1, 5).remove(0)
}

fn spatial_error(sim: &Simulator, controller: &mut dyn fluidctl_core::baselines::Controller, case: &TestCase) -> Result<f64, String> {
    let (_, report) = run_test(sim, controller, case, 9001).map_err(|e| e.to_string())?;
    if !report.complete() {
        return Ok(f64::INFINITY);
    }
    Ok(report.steady.spatial.mean)
}

fn desk_learning(trained: &mut Vec<Trained>) -> Outcome {
    let sim = desk(EnvironmentId::BaseNR, 64)?;
    let case = unseen_case(&sim);
    let mut lines = Vec::new();
    for seed in 0..3 {
        let cfg = TrainConfig {
            n_i: 500,
            seed,
            ..TrainConfig::for_environment(&sim.cfg)
        };
        let clock = Instant::now();
        let out = train_diffphys(&sim, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
        let minutes = clock.elapsed().as_secs_f64() / 60.0;
        let mut c = PolicyController::new(out.params.clone());
        let error = spatial_error(&sim, &mut c, &case)?;
        lines.push(format!("seed {seed}: {error:.4} ({minutes:.1} min)"));
        trained.push(Trained {
            seed,
            params: out.params,
            error,
            minutes,
        });
    }
    let good = trained.iter().filter(|t| t.error < 1.0 && t.minutes < 60.0).count();
    Ok((
        good >= 2,
        format!("BaseNR 64x64, n_i=500, l=16, 5 unseen targets: {}; {good}/3 below 1.0", lines.join(", ")),
    ))
}

fn generalization(trained: &[Trained]) -> Outcome {
    let Some(best) = trained.iter().min_by(|a, b| a.error.total_cmp(&b.error)) else {
        return Err("no trained policy".into());
    };
    let sim = desk(EnvironmentId::BuoyNR, 64)?;
    let case = unseen_case(&sim);
    let mut diff = PolicyController::new(best.params.clone());
    let d = spatial_error(&sim, &mut diff, &case)?;
    let mut pid = make_baseline(BaselineKind::Pid, &sim.cfg).map_err(|e| e.to_string())?;
    let p = spatial_error(&sim, &mut pid, &case)?;
    Ok((d < p, format!("BuoyNR 64x64, policy from seed {}: Diff {d:.4} vs PID {p:.4}", best.seed)))
}

fn replay() -> Outcome {
    let two = replay_drift(EnvironmentId::BuoyNR, 64, 500, 11).map_err(|e| e.to_string())?;
    let three = replay_drift(EnvironmentId::InBuoy, 64, 500, 12).map_err(|e| e.to_string())?;
    let worst = two.max(three);
    Ok((worst < 0.5, format!("500 steps: BuoyNR drift {two:.2e}, InBuoy drift {three:.2e}")))
}

fn losses() -> Outcome {
    let err = loss_example_error().map_err(|e| e.to_string())?;
    let sim = desk(EnvironmentId::BaseNR, 24)?;
    let mut columns = Vec::new();
    let mut ok = err <= 1e-12;
    for ab in [Ablation::Ove, Ablation::Ov, Ablation::Oe, Ablation::O] {
        let cfg = TrainConfig {
            n_i: 2,
            episode_length: 40,
            norm_episodes: 1,
            norm_steps: 10,
            val_every: 0,
            val_episodes: 0,
            weights: LossWeights {
                l: 4,
                ..LossWeights::default_for(Dof::Two)
            }
            .ablated(ab),
            ..TrainConfig::for_environment(&sim.cfg)
        };
        let out = train_diffphys(&sim, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
        let v = out.log.iter().any(|r| r.v != 0.0);
        let e = out.log.iter().any(|r| r.e != 0.0);
        ok &= v == ab.velocity() && e == ab.effort();
        columns.push(format!("{}: V {} E {}", ab.name(), if v { "on" } else { "off" }, if e { "on" } else { "off" }));
    }
    Ok((ok, format!("examples max deviation {err:.1e}; log columns {}", columns.join(", "))))
}

fn determinism() -> Outcome {
    let sim = desk(EnvironmentId::InBuoy, 24)?;
    let cfg = TrainConfig {
        n_i: 3,
        seed: 4,
        episode_length: 30,
        norm_episodes: 1,
        norm_steps: 10,
        val_every: 0,
        val_episodes: 1,
        val_steps: 10,
        weights: LossWeights {
            l: 4,
            ..LossWeights::default_for(Dof::Three)
        },
        ..TrainConfig::for_environment(&sim.cfg)
    };
    let case = test_cases(&sim.cfg, 4, 1, 1).remove(0);
    let run = || -> Result<(Vec<u8>, Vec<u8>), String> {
        let out = train_diffphys(&sim, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
        let mut ckpt = Vec::new();
        write_checkpoint(&mut ckpt, &out.params).map_err(|e| e.to_string())?;
        let mut c = PolicyController::new(out.params);
        let mut short = case.clone();
        short.schedule.objectives.truncate(1);
        short.schedule = fluidctl_core::environment::ObjectiveSchedule::single(
            short.schedule.objectives[0].position,
            short.schedule.objectives[0].alpha,
            5.0,
        );
        let (traj, _) = run_test(&sim, &mut c, &short, 4).map_err(|e| e.to_string())?;
        let mut csv = Vec::new();
        traj.write_csv(&mut csv).map_err(|e| e.to_string())?;
        Ok((ckpt, csv))
    };
    let (a, b) = (run()?, run()?);
    Ok((
        a == b,
        format!("InBuoy training + evaluation twice: checkpoints identical {}, trajectories identical {}", a.0 == b.0, a.1 == b.1),
    ))
}

fn main() -> ExitCode {
    let mut trained = Vec::new();
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Vec<Trained>) -> Outcome>)> = vec![
        ("1 projection invariant", Box::new(|_| projection())),
        ("2 adjoint correctness", Box::new(|_| adjoint())),
        ("3 baseline exactness", Box::new(|_| baselines())),
        ("4 architecture fidelity", Box::new(|_| architecture())),
        ("5 desk-scale learning", Box::new(desk_learning)),
        ("6 generalization ordering", Box::new(|t| generalization(t))),
        ("7 supervised replay", Box::new(|_| replay())),
        ("8 loss terms and ablations", Box::new(|_| losses())),
        ("9 determinism", Box::new(|_| determinism())),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let (passed, detail) = match check(&mut trained) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failed += 1;
        }
        println!("{} criterion {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
