//! Built-in oracle suites run by `fluidctl verify` and the acceptance tests.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckReport, Tape};
use crate::baselines::{loopshaping_step, pid_step, ControllerMemory, LoopShapingCoeffs, PidGains, PID_INTERVAL};
use crate::environment::{make_environment, Effort, EnvironmentId, Objective, Simulator};
use crate::error::Result;
use crate::fluid::{apply_boundary_conditions, max_fluid_divergence, project, FluidParams};
use crate::grid::{CellFlags, DomainBoundary, Grid, StaggeredVelocity};
use crate::losses::{
    effort_term, objective_term, record_total_loss, total_loss, velocity_term, LossWeights, StepTrace, TapedWindow,
    WindowTrace,
};
use crate::policy::{default_dims, count_parameters_for, ObservationLayout};
use crate::rigid_body::{rasterize, BodyShape, BodyState, Dof};
use crate::tensor::Tensor;
use crate::training::{drive_simulation, prescribed_pose, record_trace_step};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn patched(id: EnvironmentId, patch: &str) -> Result<Simulator> {
    let table: toml::Table = toml::from_str(patch).map_err(|e| crate::Error::config(e.to_string()))?;
    Simulator::new(make_environment(id, Some(&table))?)
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionCheck {
    pub pre: f64,
    pub post: f64,
    pub ratio: f64,
    pub seconds: f64,
    pub iterations: usize,
}

/// Projects a random field around a randomly posed box and measures the
/// remaining divergence on fluid cells.
pub fn projection_check(cells: usize, seed: u64, pressure_tol: f64) -> Result<ProjectionCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Grid::square(cells, 100.0)?;
    let base = CellFlags::empty(g, DomainBoundary::Closed);
    let body = BodyState::at_rest([rng.gen_range(35.0..65.0), rng.gen_range(35.0..65.0)], rng.gen_range(-3.0..3.0));
    let shape = BodyShape::Box { width: 20.0, height: 6.0 };
    let (flags, _) = rasterize(&shape, &body, &base)?;
    let mut vel = StaggeredVelocity::zeros(g);
    for v in vel.ux.iter_mut().chain(vel.uy.iter_mut()) {
        *v = rng.gen_range(-1.0..1.0);
    }
    let vel = apply_boundary_conditions(&vel, &flags, &body, 0.0);
    let params = FluidParams {
        pressure_tol,
        ..FluidParams::default()
    };
    let pre = max_fluid_divergence(&vel, &flags);
    let clock = Instant::now();
    let (out, _, stats) = project(&vel, &flags, &params)?;
    let seconds = clock.elapsed().as_secs_f64();
    let post = max_fluid_divergence(&out, &flags);
    Ok(ProjectionCheck {
        pre,
        post,
        ratio: post / pre,
        seconds,
        iterations: stats.iterations,
    })
}

/// Gradient of an `l`-step window loss with respect to the first body-frame
/// effort, taped through the coupled simulator, against central differences.
/// The environment cycles with the seed.
pub fn coupled_gradient_check(seed: u64, cells: usize, l: usize) -> Result<GradCheckReport> {
    let id = EnvironmentId::ALL[seed as usize % EnvironmentId::ALL.len()];
    let sim = patched(id, &format!("grid_cells = {cells}\n[fluid]\npressure_tol = 1e-12\npressure_max_iter = 10000\n"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = sim.cfg.dof.channels();
    let mut effort = || {
        let mut e = [0.0; 3];
        for x in e.iter_mut().take(channels) {
            *x = rng.gen_range(-20.0..20.0);
        }
        e
    };
    let push = effort();
    let mut state = sim.reset()?;
    for _ in 0..5 {
        state = sim.control_step(&state, Effort::from_slice(&push), true)?.0;
    }
    let first = effort();
    let later: Vec<[f64; 3]> = (1..l).map(|_| effort()).collect();
    let objective = Objective {
        start_time: 0.0,
        position: [rng.gen_range(25.0..75.0), rng.gen_range(25.0..75.0)],
        alpha: if sim.cfg.dof.rotates() { rng.gen_range(-1.5..1.5) } else { 0.0 },
    };
    let weights = LossWeights {
        l,
        ..LossWeights::default_for(sim.cfg.dof)
    };
    let window = |tape: &mut Tape, e0: crate::autodiff::Var| -> Result<crate::autodiff::Var> {
        let mut ts = sim.tape_state(tape, &state);
        let prev_effort = ts.effort;
        let mut steps = Vec::with_capacity(l);
        for n in 0..l {
            let e = if n == 0 { e0 } else { tape.constant(Tensor::from_slice(&later[n - 1][..channels])) };
            ts = sim.record_control_step(tape, &ts, e)?.0;
            steps.push(record_trace_step(tape, ts.body, ts.effort, &objective)?);
        }
        Ok(record_total_loss(tape, &TapedWindow { steps, prev_effort }, &weights)?.total)
    };
    grad_check(window, &Tensor::from_slice(&first[..channels]), 1e-4)
}

/// Largest deviation of the recursive baselines from a direct evaluation of
/// their defining sums over a random error sequence.
pub fn baseline_oracle_error(seed: u64, n: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();

    let g = PidGains::CYLINDER_FORCE;
    let mut mem = ControllerMemory::default();
    let mut pid_err: f64 = 0.0;
    for t in 0..n {
        let (u, m) = pid_step(&g, e[t], &mem);
        mem = m;
        let prev = if t == 0 { e[0] } else { e[t - 1] };
        let sum: f64 = e[..=t].iter().sum();
        let direct = g.p * e[t] + g.d * (e[t] - prev) / PID_INTERVAL + PID_INTERVAL * sum * g.i;
        pid_err = pid_err.max((u - direct).abs() / direct.abs().max(1.0));
    }

    let c = LoopShapingCoeffs::default();
    let mut mem = ControllerMemory::default();
    let mut direct_u: Vec<f64> = Vec::with_capacity(n);
    let mut ls_err: f64 = 0.0;
    for t in 0..n {
        let (u, m) = loopshaping_step(&c, e[t], &mem);
        mem = m;
        let at = |v: &[f64], k: isize| if k < 0 { 0.0 } else { v[k as usize] };
        let t = t as isize;
        let direct = c.n[0] * at(&e, t) + c.n[1] * at(&e, t - 1) + c.n[2] * at(&e, t - 2)
            - c.d[0] * at(&direct_u, t - 1)
            - c.d[1] * at(&direct_u, t - 2);
        direct_u.push(direct);
        ls_err = ls_err.max((u - direct).abs() / direct.abs().max(1.0));
    }
    (pid_err, ls_err)
}

/// Loop-shaping coefficients compared bit for bit with the published table.
pub fn loopshaping_coefficients_exact() -> bool {
    let c = LoopShapingCoeffs::default();
    let table: [f64; 5] = [
        1.1700924033918623e00,
        -1.4694211940919182e00,
        3.0598060140064326e-01,
        -1.2306775904257603e00,
        2.6726488821832250e-01,
    ];
    c.n.iter().chain(&c.d).zip(table).all(|(a, b)| a.to_bits() == b.to_bits())
}

fn step(e_xy: [f64; 2], xdot: [f64; 2], force: [f64; 2]) -> StepTrace {
    StepTrace {
        e_xy,
        e_alpha: 0.0,
        xdot,
        alphadot: 0.0,
        force,
        torque: 0.0,
    }
}

/// Largest deviation of the loss terms from their hand-computed examples.
pub fn loss_example_error() -> Result<f64> {
    let o_w = LossWeights {
        beta_xy: 5.0,
        l: 2,
        ..LossWeights::ZERO
    };
    let o_t = WindowTrace {
        steps: vec![step([1.0, 0.0], [0.0; 2], [0.0; 2]), step([0.0, 1.0], [0.0; 2], [0.0; 2])],
        prev_force: [0.0; 2],
        prev_torque: 0.0,
    };
    let a_w = LossWeights {
        beta_alpha: 30.0,
        l: 1,
        ..LossWeights::ZERO
    };
    let a_t = WindowTrace {
        steps: vec![StepTrace {
            e_alpha: 0.1,
            ..step([0.0; 2], [0.0; 2], [0.0; 2])
        }],
        prev_force: [0.0; 2],
        prev_torque: 0.0,
    };
    let v_w = LossWeights {
        beta_xdot: 5.0,
        beta_prox: 0.1,
        l: 1,
        ..LossWeights::ZERO
    };
    let single = |e_xy, xdot, force| WindowTrace {
        steps: vec![step(e_xy, xdot, force)],
        prev_force: [0.0; 2],
        prev_torque: 0.0,
    };
    let e_w = LossWeights {
        beta_f: 0.1,
        beta_df: 1.0,
        l: 1,
        ..LossWeights::ZERO
    };
    let checks = [
        (objective_term(&o_t, &o_w)?, 5.0),
        (objective_term(&a_t, &a_w)?, 0.3),
        (velocity_term(&single([3.0, 4.0], [2.0, 0.0], [0.0; 2]), &v_w)?, 5.0 * 4.0 / 3.5),
        (velocity_term(&single([0.0; 2], [2.0, 0.0], [0.0; 2]), &v_w)?, 20.0),
        (effort_term(&single([0.0; 2], [0.0; 2], [3.0, 4.0]), &e_w)?, 27.5),
        (total_loss(&single([0.0; 2], [0.0; 2], [0.0; 2]), &LossWeights::default_for(Dof::Three))?, 0.0),
    ];
    Ok(checks.iter().fold(0.0, |m, (got, want)| m.max((got - want).abs())))
}

/// Replays the efforts recorded for one prescribed trajectory open loop and
/// returns the largest distance to the prescribed path.
pub fn replay_drift(id: EnvironmentId, cells: usize, steps: usize, seed: u64) -> Result<f64> {
    let sim = patched(id, &format!("grid_cells = {cells}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = (
        [rng.gen_range(25.0..75.0), rng.gen_range(25.0..75.0)],
        if sim.cfg.dof.rotates() { rng.gen_range(-1.5..1.5) } else { 0.0 },
    );
    let layout = ObservationLayout::default_for(sim.cfg.dof);
    let (samples, _) = drive_simulation(&sim, layout, target, steps)?;
    let mut state = sim.reset()?;
    let start = (state.body.position, state.body.alpha);
    let mut drift: f64 = 0.0;
    for (k, s) in samples.iter().enumerate() {
        state = sim.control_step(&state, Effort::from_slice(&s.target), false)?.0;
        let (p, _) = prescribed_pose(start, target, k + 1, steps);
        drift = drift.max((p[0] - state.body.position[0]).hypot(p[1] - state.body.position[1]));
    }
    Ok(drift)
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Pressure tolerance used by the projection suite.
    pub projection_tol: f64,
    pub gradient_seeds: usize,
    pub replay_steps: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            projection_tol: FluidParams::default().pressure_tol,
            gradient_seeds: 3,
            replay_steps: 200,
        }
    }
}

fn suite(name: &'static str, r: Result<(bool, String)>) -> SuiteResult {
    match r {
        Ok((passed, detail)) => SuiteResult { name, passed, detail },
        Err(e) => SuiteResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Every desk-scale oracle suite.
pub fn run_suites(opts: &VerifyOptions) -> Vec<SuiteResult> {
    let mut out = Vec::new();
    out.push(suite(
        "projection divergence",
        (|| {
            let mut worst = 0.0f64;
            let mut slowest = 0.0f64;
            for seed in 0..3 {
                let c = projection_check(64, seed, opts.projection_tol)?;
                worst = worst.max(c.ratio);
                slowest = slowest.max(c.seconds);
            }
            Ok((worst < 1e-4 && slowest < 1.0, format!("worst ratio {worst:.3e}, slowest solve {slowest:.3}s")))
        })(),
    ));
    out.push(suite(
        "coupled gradients",
        (|| {
            let mut worst = 0.0f64;
            let mut ok = true;
            for seed in 0..opts.gradient_seeds as u64 {
                let r = coupled_gradient_check(seed, 32, 4)?;
                ok &= r.passes(1e-3);
                worst = worst.max(r.max_rel_err);
            }
            Ok((ok, format!("{} seeds, worst relative error {worst:.3e}", opts.gradient_seeds)))
        })(),
    ));
    out.push(suite(
        "baseline formulas",
        (|| {
            let (pid, ls) = baseline_oracle_error(7, 100);
            let exact = loopshaping_coefficients_exact();
            Ok((
                pid <= 1e-12 && ls <= 1e-12 && exact,
                format!("pid {pid:.1e}, loop-shaping {ls:.1e}, coefficients exact: {exact}"),
            ))
        })(),
    ));
    out.push(suite(
        "parameter counts",
        (|| {
            let two = count_parameters_for(&default_dims(Dof::Two));
            let three = count_parameters_for(&default_dims(Dof::Three));
            Ok((two == 2206, format!("2-DOF {two}, 3-DOF {three}")))
        })(),
    ));
    out.push(suite(
        "loss examples",
        (|| {
            let err = loss_example_error()?;
            Ok((err <= 1e-12, format!("max deviation {err:.1e}")))
        })(),
    ));
    out.push(suite(
        "supervised replay",
        (|| {
            let drift = replay_drift(EnvironmentId::BuoyNR, 32, opts.replay_steps, 3)?;
            Ok((drift < 0.5, format!("max drift {drift:.3e} over {} steps", opts.replay_steps)))
        })(),
    ));
    out
}
