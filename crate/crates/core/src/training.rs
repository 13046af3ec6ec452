//! Controller training: backpropagation through unrolled simulation windows,
//! and the supervised pipeline (prescribed-trajectory dataset + regression).

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::baselines::{make_baseline, BaselineKind, Controller};
use crate::environment::{Effort, EnvironmentConfig, Objective, ObjectiveSchedule, SimState, Simulator};
use crate::error::{Error, Result};
use crate::evaluation::rollout;
use crate::losses::{record_total_loss, LossTerms, LossWeights, TapedStep, TapedWindow};
use crate::policy::{observation_frame, record_frame, ObservationHistory, ObservationLayout, OutputKind, PolicyController, PolicyParams};
use crate::rigid_body::{rotate, wrap_angle, Dof};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of optimizer updates.
    pub n_i: usize,
    pub lr0: f64,
    pub lr_half_every: usize,
    /// Control steps per training episode.
    pub episode_length: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Global gradient-norm limit.
    pub grad_clip: f64,
    /// PID episodes used to measure input statistics.
    pub norm_episodes: usize,
    pub norm_steps: usize,
    /// Updates between validation rollouts; 0 validates only at the start
    /// and the end.
    pub val_every: usize,
    pub val_episodes: usize,
    pub val_steps: usize,
    /// Objectives are drawn uniformly from `[lo, hi]^2`.
    pub target_range: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_dof(Dof::Two)
    }
}

impl TrainConfig {
    pub fn for_dof(dof: Dof) -> Self {
        let (n_i, half) = match dof {
            Dof::Two => (1000, 200),
            Dof::Three => (5000, 1000),
        };
        Self {
            n_i,
            lr0: 0.01,
            lr_half_every: half,
            episode_length: 1000,
            seed: 0,
            weights: LossWeights::default_for(dof),
            grad_clip: 1.0,
            norm_episodes: 10,
            norm_steps: 200,
            val_every: 100,
            val_episodes: 2,
            val_steps: 400,
            target_range: [25.0, 75.0],
        }
    }

    pub fn for_environment(cfg: &EnvironmentConfig) -> Self {
        Self {
            episode_length: cfg.episode_length,
            ..Self::for_dof(cfg.dof)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.lr0 > 0.0) || self.lr_half_every == 0 {
            return Err(Error::config("learning rate and its halving interval must be positive"));
        }
        if self.episode_length == 0 {
            return Err(Error::config("episode length must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("gradient clip must be positive"));
        }
        if !(self.target_range[0] < self.target_range[1]) {
            return Err(Error::config("target range must be increasing"));
        }
        Ok(())
    }
}

/// `lr0 * 0.5^floor(iteration / lr_half_every)`
pub fn lr_schedule(lr0: f64, lr_half_every: usize, iteration: usize) -> f64 {
    lr0 * 0.5f64.powi((iteration / lr_half_every) as i32)
}

/// Adaptive moment estimation with the usual decay constants.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (x, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so their joint norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub o: f64,
    pub v: f64,
    pub e: f64,
    pub wall_time: f64,
}

pub const TRAIN_LOG_HEADER: &str = "iteration,lr,loss,O,V,E,wall_time";

impl TrainLogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.iteration, self.lr, self.loss, self.o, self.v, self.e, self.wall_time
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation score.
    pub params: PolicyParams,
    pub final_params: PolicyParams,
    pub log: Vec<TrainLogRow>,
    /// `(iteration, score)` of every validation.
    pub validation: Vec<(usize, f64)>,
    pub best_iteration: usize,
}

/// Random objective within the configured range.
fn sample_objective(rng: &mut impl Rng, range: [f64; 2], dof: Dof) -> Objective {
    let s = ObjectiveSchedule::random(rng, 1, 1.0, range[0], range[1], dof.rotates());
    s.objectives[0]
}

/// Raw policy inputs seen while `controller` tracks random objectives.
pub fn warmup_inputs(
    sim: &Simulator,
    controller: &mut dyn Controller,
    layout: ObservationLayout,
    episodes: usize,
    steps: usize,
    range: [f64; 2],
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(episodes * steps);
    for _ in 0..episodes {
        let obj = sample_objective(rng, range, sim.cfg.dof);
        let mut state = sim.reset()?;
        controller.reset();
        let mut hist = ObservationHistory::new(layout);
        for _ in 0..steps {
            hist.push(observation_frame(&state, &obj, layout.dof)?);
            out.push(hist.input());
            let e = controller.act(&state, &obj)?;
            match sim.control_step(&state, e, controller.bounded()) {
                Ok((next, _)) if next.body.is_finite() => state = next,
                Ok(_) | Err(Error::OutOfDomain { .. }) => break,
                Err(err) => return Err(err),
            }
        }
    }
    Ok(out)
}

/// Per-channel input scales of one observation frame implied by the task
/// bounds: spread of the objective range, speed gained from one time unit of
/// full effort, and the spread of an effort uniform within its bounds.
pub fn envelope_scales(env: &EnvironmentConfig, range: [f64; 2]) -> Vec<f64> {
    let e = (range[1] - range[0]) / 12f64.sqrt();
    let v = env.f_max / env.props.mass;
    let f = env.f_max / 3f64.sqrt();
    let mut out = vec![e, e, v, v, f, f];
    if env.dof.rotates() {
        out.extend([std::f64::consts::PI / 12f64.sqrt(), env.t_max / env.props.inertia, env.t_max / 3f64.sqrt()]);
    }
    out
}

/// Mean spatial (plus angular, with rotation) error over the last quarter of
/// each validation episode. Steps lost to leaving the domain score the
/// domain diagonal.
pub fn validation_score(sim: &Simulator, params: &PolicyParams, targets: &[Objective], steps: usize) -> Result<f64> {
    let mut total = 0.0;
    for obj in targets {
        let mut c = PolicyController::new(params.clone());
        let sched = ObjectiveSchedule::single(obj.position, obj.alpha, steps as f64 * sim.cfg.control_dt());
        let traj = rollout(sim, &mut c, &sched, steps)?;
        let from = steps - (steps / 4).max(1);
        let rotates = sim.cfg.dof.rotates();
        let worst = sim.cfg.domain_size * std::f64::consts::SQRT_2 + if rotates { std::f64::consts::PI } else { 0.0 };
        let err = |k: usize| match traj.steps.get(k) {
            Some(s) if traj.terminated_at.map_or(true, |t| k < t) => {
                s.spatial_error() + if rotates { s.angular_error() } else { 0.0 }
            }
            _ => worst,
        };
        total += (from..steps).map(err).sum::<f64>() / (steps - from) as f64;
    }
    Ok(total / targets.len() as f64)
}

struct Episode {
    state: SimState,
    objective: Objective,
    history: ObservationHistory,
    step: usize,
}

fn start_episode(sim: &Simulator, layout: ObservationLayout, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Episode> {
    let objective = sample_objective(rng, cfg.target_range, sim.cfg.dof);
    let mut state = sim.reset()?;
    let mut history = ObservationHistory::new(layout);
    // fill the history before the policy takes over
    for _ in 0..layout.n_p {
        history.push(observation_frame(&state, &objective, layout.dof)?);
        state = sim.control_step(&state, Effort::default(), true)?.0;
    }
    Ok(Episode {
        step: layout.n_p,
        state,
        objective,
        history,
    })
}

/// Loss-trace entry of a post-step body `[x, y, alpha, vx, vy, omega]`
/// under the world-frame effort that produced it.
pub fn record_trace_step(tape: &mut Tape, body: Var, effort_world: Var, objective: &Objective) -> Result<TapedStep> {
    let target = tape.constant(Tensor::from_slice(&objective.position));
    let pos = tape.slice(body, 0, 2)?;
    let alpha = tape.slice(body, 2, 1)?;
    let raw = objective.alpha - tape.value(alpha).item();
    let neg = tape.scale(alpha, -1.0)?;
    Ok(TapedStep {
        e_xy: tape.sub(target, pos)?,
        e_alpha: tape.offset(neg, objective.alpha + (wrap_angle(raw) - raw))?,
        xdot: tape.slice(body, 3, 2)?,
        alphadot: tape.slice(body, 5, 1)?,
        effort: effort_world,
    })
}

struct WindowResult {
    terms: Option<LossTerms>,
    grads: Option<Vec<Tensor>>,
    left_domain: bool,
    dump: String,
}

/// Records up to `l` policy-driven steps, then differentiates the window
/// loss with respect to the network weights.
fn run_window(sim: &Simulator, params: &PolicyParams, ep: &mut Episode, cfg: &TrainConfig) -> Result<WindowResult> {
    let layout = params.layout;
    let mut tape = Tape::new();
    let vars = params.place(&mut tape, true);
    let mut ts = sim.tape_state(&mut tape, &ep.state);
    let mut hist: VecDeque<Var> = ep.history.frames().map(|f| tape.constant(Tensor::from_slice(f))).collect();
    let zero_frame = tape.constant(Tensor::zeros(&[layout.frame_dim()]));
    let pad = (layout.pad > 0).then(|| tape.constant(Tensor::zeros(&[layout.pad])));
    let prev_effort = ts.effort;
    let mut steps = Vec::with_capacity(cfg.weights.l);
    let mut left_domain = false;
    let mut dump = String::new();

    while steps.len() < cfg.weights.l && ep.step < cfg.episode_length {
        let frame = record_frame(&mut tape, ts.body, ts.effort, &ep.objective, layout.dof)?;
        hist.push_front(frame);
        hist.truncate(layout.frames());
        let mut parts: Vec<Var> = hist.iter().copied().collect();
        parts.resize(layout.frames(), zero_frame);
        parts.extend(pad);
        let z = tape.concat(&parts)?;
        let zn = params.record_normalize(&mut tape, z)?;
        let out = params.record_forward(&mut tape, &vars, zn)?;
        match sim.record_control_step(&mut tape, &ts, out) {
            Ok((next, _)) => ts = next,
            Err(Error::OutOfDomain { .. }) => {
                left_domain = true;
                break;
            }
            Err(e) => return Err(e),
        }
        ep.step += 1;
        let body = tape.value(ts.body).data().to_vec();
        let effort = tape.value(ts.effort).data().to_vec();
        dump.push_str(&format!("step {}: body {body:?} effort {effort:?}\n", ep.step));
        if body.iter().any(|x| !x.is_finite()) {
            left_domain = true;
            break;
        }
        steps.push(record_trace_step(&mut tape, ts.body, ts.effort, &ep.objective)?);
    }

    if !left_domain {
        ep.state = sim.untape_state(&tape, &ts)?;
        let frames: Vec<Vec<f64>> = hist.iter().map(|v| tape.value(*v).data().to_vec()).collect();
        ep.history.clear();
        for f in frames.into_iter().rev() {
            ep.history.push(f);
        }
    }
    if steps.is_empty() {
        return Ok(WindowResult { terms: None, grads: None, left_domain, dump });
    }
    let window = TapedWindow { steps, prev_effort };
    let loss = record_total_loss(&mut tape, &window, &cfg.weights)?;
    let terms = loss.values(&tape);
    if !terms.total.is_finite() {
        return Ok(WindowResult { terms: Some(terms), grads: None, left_domain, dump });
    }
    let g = tape.backward(loss.total)?;
    let grads = vars.all().into_iter().map(|v| g.wrt(v)).collect();
    Ok(WindowResult {
        terms: Some(terms),
        grads: Some(grads),
        left_domain,
        dump,
    })
}

/// Trains a fresh bounded policy by backpropagation through the simulator.
/// `on_row` sees every log row as it is produced.
pub fn train_diffphys(sim: &Simulator, cfg: &TrainConfig, on_row: &mut dyn FnMut(&TrainLogRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = PolicyParams::for_environment(&sim.cfg, OutputKind::Bounded, &mut rng)?;
    let mut stats_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    stats_rng.set_stream(1);
    let mut pid = make_baseline(BaselineKind::Pid, &sim.cfg)?;
    let inputs = warmup_inputs(sim, &mut pid, params.layout, cfg.norm_episodes, cfg.norm_steps, cfg.target_range, &mut stats_rng)?;
    params.fit_normalization(&inputs);
    params.floor_normalization(&envelope_scales(&sim.cfg, cfg.target_range))?;
    train_diffphys_from(sim, cfg, params, on_row)
}

/// Like [`train_diffphys`] but starting from given parameters.
pub fn train_diffphys_from(
    sim: &Simulator,
    cfg: &TrainConfig,
    mut params: PolicyParams,
    on_row: &mut dyn FnMut(&TrainLogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.validate()?;
    if params.output != OutputKind::Bounded || params.layout.dof != sim.cfg.dof {
        return Err(Error::config("differentiable training needs a bounded policy matching the body's DOF"));
    }
    let mut ep_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ep_rng.set_stream(2);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    val_rng.set_stream(3);
    let val_targets: Vec<Objective> = (0..cfg.val_episodes)
        .map(|_| sample_objective(&mut val_rng, cfg.target_range, sim.cfg.dof))
        .collect();
    let validate = |p: &PolicyParams| -> Result<f64> {
        if val_targets.is_empty() || cfg.val_steps == 0 {
            return Ok(0.0);
        }
        validation_score(sim, p, &val_targets, cfg.val_steps)
    };

    let clock = Instant::now();
    let mut validation = vec![(0, validate(&params)?)];
    let mut best = (params.clone(), 0, validation[0].1);
    let mut log = Vec::with_capacity(cfg.n_i);
    let mut flat = params.flat();
    let mut adam = Adam::new(&flat);
    let mut ep = start_episode(sim, params.layout, cfg, &mut ep_rng)?;
    let mut iteration = 0;
    let mut failed_starts = 0;

    while iteration < cfg.n_i {
        let w = run_window(sim, &params, &mut ep, cfg)?;
        if let Some(terms) = w.terms {
            let Some(mut grads) = w.grads.filter(|g| g.iter().all(Tensor::all_finite)) else {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    dump: format!("objective {:?}, loss {terms:?}\n{}", ep.objective, w.dump),
                });
            };
            let lr = lr_schedule(cfg.lr0, cfg.lr_half_every, iteration);
            clip_global_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut flat, &grads, lr);
            params.set_flat(&flat)?;
            iteration += 1;
            failed_starts = 0;
            let row = TrainLogRow {
                iteration,
                lr,
                loss: terms.total,
                o: terms.o,
                v: terms.v,
                e: terms.e,
                wall_time: clock.elapsed().as_secs_f64(),
            };
            on_row(&row);
            log.push(row);
            let due = cfg.val_every > 0 && iteration % cfg.val_every == 0;
            if due || iteration == cfg.n_i {
                let score = validate(&params)?;
                log::info!("iteration {iteration}: validation error {score:.4}");
                validation.push((iteration, score));
                if score < best.2 {
                    best = (params.clone(), iteration, score);
                }
            }
        } else {
            failed_starts += 1;
            if failed_starts > 100 {
                return Err(Error::config("episodes keep ending before the first policy step"));
            }
        }
        if w.left_domain || ep.step >= cfg.episode_length || !ep.state.body.is_finite() {
            if w.left_domain {
                log::debug!("body left the domain at episode step {}; restarting", ep.step);
            }
            ep = start_episode(sim, params.layout, cfg, &mut ep_rng)?;
        }
    }
    Ok(TrainOutcome {
        params: best.0,
        final_params: params,
        log,
        validation,
        best_iteration: best.1,
    })
}

// ---------------------------------------------------------------------------
// supervised pipeline

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedSample {
    pub z: Vec<f64>,
    /// Body-frame `[F_x, F_y, T]`.
    pub target: [f64; 3],
}

/// Samples grouped by simulation, `samples.len() / n_sims` per simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub z_dim: usize,
    pub n_sims: usize,
    pub samples: Vec<SupervisedSample>,
}

/// Simulations held out for validation: a fifth, at most 20, at least one.
pub fn validation_sims(n_sims: usize) -> Result<usize> {
    if n_sims < 2 {
        return Err(Error::config(format!(
            "a dataset needs at least 2 simulations for a validation split, got {n_sims}"
        )));
    }
    Ok(((n_sims as f64 * 0.2).round() as usize).clamp(1, 20))
}

impl Dataset {
    pub fn steps_per_sim(&self) -> usize {
        if self.n_sims == 0 {
            0
        } else {
            self.samples.len() / self.n_sims
        }
    }

    /// Training and validation samples, split by simulation.
    pub fn split(&self) -> Result<(&[SupervisedSample], &[SupervisedSample])> {
        let n_val = validation_sims(self.n_sims)?;
        let cut = (self.n_sims - n_val) * self.steps_per_sim();
        Ok(self.samples.split_at(cut))
    }
}

const DATASET_MAGIC: &[u8; 4] = b"DSET";

/// `DSET`, sample count (u64), z dim (u32), simulation count (u32), then
/// per sample `z` and three targets; little endian.
pub fn write_dataset(w: &mut impl Write, d: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(d.samples.len() as u64).to_le_bytes())?;
    w.write_all(&(d.z_dim as u32).to_le_bytes())?;
    w.write_all(&(d.n_sims as u32).to_le_bytes())?;
    for s in &d.samples {
        for x in s.z.iter().chain(&s.target) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format("dataset", "bad magic"));
    }
    let mut b8 = [0u8; 8];
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b4)?;
    let z_dim = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let n_sims = u32::from_le_bytes(b4) as usize;
    if z_dim == 0 || n_sims == 0 || count % n_sims != 0 {
        return Err(Error::format("dataset", format!("{count} samples, z dim {z_dim}, {n_sims} simulations")));
    }
    let mut samples = Vec::with_capacity(count.min(1 << 24));
    let mut read = |n: usize| -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            v.push(f64::from_le_bytes(b8));
        }
        Ok(v)
    };
    for _ in 0..count {
        let z = read(z_dim)?;
        let t = read(3)?;
        samples.push(SupervisedSample { z, target: [t[0], t[1], t[2]] });
    }
    Ok(Dataset { z_dim, n_sims, samples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_sims: usize,
    /// Control steps per simulation; also the trajectory duration.
    pub steps: usize,
    pub seed: u64,
    pub target_range: [f64; 2],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_sims: 100,
            steps: 500,
            seed: 0,
            target_range: [25.0, 75.0],
        }
    }
}

/// Rest-to-rest quintic from `a` to `b` over `[0, 1]`.
pub fn quintic(a: f64, b: f64, tau: f64) -> f64 {
    let s = tau.clamp(0.0, 1.0);
    a + (b - a) * s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// Pose `(position, alpha)` prescribed at control step `k` of `n`.
pub fn prescribed_pose(start: ([f64; 2], f64), end: ([f64; 2], f64), k: usize, n: usize) -> ([f64; 2], f64) {
    let tau = k as f64 / n as f64;
    (
        [quintic(start.0[0], end.0[0], tau), quintic(start.0[1], end.0[1], tau)],
        quintic(start.1, end.1, tau),
    )
}

/// Finds the held body-frame effort that brings the body to `pose` at the
/// end of one control interval. Returns the effort and the resulting state.
pub fn drive_to(
    sim: &Simulator,
    state: &SimState,
    pose: ([f64; 2], f64),
    guess: Effort,
) -> Result<(Effort, SimState, crate::environment::StepInfo)> {
    let dt = sim.cfg.fluid.dt;
    let s = sim.cfg.controller_stride as f64;
    // displacement per unit acceleration after `s` semi-implicit steps
    let reach = dt * dt * s * (s + 1.0) / 2.0;
    let rotates = sim.cfg.dof.rotates();
    let mut effort = guess;
    if !rotates {
        effort.torque = 0.0;
    }
    let mut last = None;
    for _ in 0..8 {
        let (next, info) = sim.control_step(state, effort, false)?;
        let d = [pose.0[0] - next.body.position[0], pose.0[1] - next.body.position[1]];
        let da = if rotates { wrap_angle(pose.1 - next.body.alpha) } else { 0.0 };
        let done = d[0].abs().max(d[1].abs()) < 1e-10 && da.abs() < 1e-12;
        last = Some((effort, next, info));
        if done {
            break;
        }
        let m = sim.cfg.props.mass;
        let corr = rotate([m * d[0] / reach, m * d[1] / reach], -state.body.alpha);
        effort.force[0] += corr[0];
        effort.force[1] += corr[1];
        if rotates {
            effort.torque += sim.cfg.props.inertia * da / reach;
        }
    }
    Ok(last.expect("at least one iteration"))
}

/// One prescribed-trajectory simulation: samples and the body positions
/// reached after every step.
pub fn drive_simulation(
    sim: &Simulator,
    layout: ObservationLayout,
    target: ([f64; 2], f64),
    steps: usize,
) -> Result<(Vec<SupervisedSample>, Vec<[f64; 2]>)> {
    let mut state = sim.reset()?;
    let start = (state.body.position, state.body.alpha);
    let objective = Objective { start_time: 0.0, position: target.0, alpha: target.1 };
    let mut hist = ObservationHistory::new(layout);
    let mut effort = Effort::default();
    let mut samples = Vec::with_capacity(steps);
    let mut path = Vec::with_capacity(steps);
    for k in 0..steps {
        hist.push(observation_frame(&state, &objective, layout.dof)?);
        let pose = prescribed_pose(start, target, k + 1, steps);
        let (e, next, _) = drive_to(sim, &state, pose, effort)?;
        samples.push(SupervisedSample {
            z: hist.input(),
            target: e.to_array(),
        });
        path.push(next.body.position);
        effort = e;
        state = next;
    }
    Ok((samples, path))
}

/// Builds the regression dataset from prescribed rest-to-rest trajectories
/// towards random targets.
pub fn generate_supervised_dataset(sim: &Simulator, cfg: &DatasetConfig, layout: ObservationLayout) -> Result<Dataset> {
    validation_sims(cfg.n_sims)?;
    if cfg.steps == 0 {
        return Err(Error::config("dataset simulations need at least one step"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.n_sims * cfg.steps);
    for k in 0..cfg.n_sims {
        let mut tries = 0;
        loop {
            let obj = sample_objective(&mut rng, cfg.target_range, sim.cfg.dof);
            match drive_simulation(sim, layout, (obj.position, obj.alpha), cfg.steps) {
                Ok((s, _)) => {
                    samples.extend(s);
                    break;
                }
                Err(Error::OutOfDomain { .. }) if tries < 10 => {
                    tries += 1;
                    log::warn!("dataset simulation {k} left the domain; resampling its target");
                }
                Err(e) => return Err(e),
            }
        }
        log::info!("dataset simulation {}/{} done", k + 1, cfg.n_sims);
    }
    Ok(Dataset {
        z_dim: layout.input_dim(),
        n_sims: cfg.n_sims,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub n_i: usize,
    pub lr0: f64,
    pub lr_half_every: usize,
    pub batch: usize,
    pub seed: u64,
    pub val_every: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            n_i: 150_000,
            lr0: 0.01,
            lr_half_every: 15_000,
            batch: 128,
            seed: 0,
            val_every: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupervisedLogRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub wall_time: f64,
}

pub const SUPERVISED_LOG_HEADER: &str = "iteration,lr,loss,val_loss,wall_time";

impl SupervisedLogRow {
    pub fn csv(&self) -> String {
        let v = self.val_loss.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{v},{:.3}", self.iteration, self.lr, self.loss, self.wall_time)
    }
}

#[derive(Clone, Debug)]
pub struct SupervisedOutcome {
    pub params: PolicyParams,
    pub log: Vec<SupervisedLogRow>,
    pub best_iteration: usize,
    pub best_val_loss: f64,
    pub initial_val_loss: f64,
}

fn batch_loss(tape: &mut Tape, params: &PolicyParams, vars: &crate::policy::ParamVars, batch: &[&SupervisedSample]) -> Result<Var> {
    let n_in = params.input_dim();
    let n_out = params.output_dim();
    let z: Vec<f64> = batch.iter().flat_map(|s| s.z.iter().copied()).collect();
    let y: Vec<f64> = batch.iter().flat_map(|s| s.target[..n_out].iter().copied()).collect();
    let zv = tape.constant(Tensor::new(vec![batch.len(), n_in], z)?);
    let yv = tape.constant(Tensor::new(vec![batch.len(), n_out], y)?);
    let zn = params.record_normalize(tape, zv)?;
    let out = params.record_forward(tape, vars, zn)?;
    let d = tape.sub(yv, out)?;
    let s = tape.sum_squares(d)?;
    tape.scale(s, 1.0 / batch.len() as f64)
}

/// Mean `||target - P(z)||^2` over a sample set.
pub fn regression_loss(params: &PolicyParams, samples: &[SupervisedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in samples.chunks(1024) {
        let mut tape = Tape::inference();
        let vars = params.place(&mut tape, false);
        let refs: Vec<&SupervisedSample> = chunk.iter().collect();
        let l = batch_loss(&mut tape, params, &vars, &refs)?;
        total += tape.scalar_value(l) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Minibatch regression of a linear-output network on effort targets.
/// Validation falls back to the training set when `val` is empty.
pub fn train_supervised(
    train: &[SupervisedSample],
    val: &[SupervisedSample],
    template: &PolicyParams,
    cfg: &SupervisedConfig,
    on_row: &mut dyn FnMut(&SupervisedLogRow),
) -> Result<SupervisedOutcome> {
    if train.is_empty() {
        return Err(Error::config("supervised training needs at least one sample"));
    }
    if cfg.batch == 0 || !(cfg.lr0 > 0.0) || cfg.lr_half_every == 0 {
        return Err(Error::config("batch size, learning rate and halving interval must be positive"));
    }
    if train[0].z.len() != template.input_dim() {
        return Err(Error::config(format!(
            "dataset inputs have {} values but the network takes {}",
            train[0].z.len(),
            template.input_dim()
        )));
    }
    let val = if val.is_empty() { train } else { val };
    let mut params = template.clone();
    params.output = OutputKind::Linear;
    let inputs: Vec<Vec<f64>> = train.iter().map(|s| s.z.clone()).collect();
    params.fit_normalization(&inputs);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let clock = Instant::now();
    let initial = regression_loss(&params, val)?;
    let mut best = (params.clone(), 0, initial);
    let mut flat = params.flat();
    let mut adam = Adam::new(&flat);
    let mut log = Vec::new();
    let batch_size = cfg.batch.min(train.len());
    for it in 0..cfg.n_i {
        let batch: Vec<&SupervisedSample> = (0..batch_size).map(|_| &train[rng.gen_range(0..train.len())]).collect();
        let mut tape = Tape::new();
        let vars = params.place(&mut tape, true);
        let loss = batch_loss(&mut tape, &params, &vars, &batch)?;
        let lv = tape.scalar_value(loss);
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it, dump: "supervised minibatch".into() });
        }
        let g = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.all().into_iter().map(|v| g.wrt(v)).collect();
        let lr = lr_schedule(cfg.lr0, cfg.lr_half_every, it);
        adam.step(&mut flat, &grads, lr);
        params.set_flat(&flat)?;
        let iteration = it + 1;
        let due = cfg.val_every > 0 && iteration % cfg.val_every == 0;
        let val_loss = if due || iteration == cfg.n_i {
            let v = regression_loss(&params, val)?;
            if v < best.2 {
                best = (params.clone(), iteration, v);
            }
            Some(v)
        } else {
            None
        };
        let row = SupervisedLogRow {
            iteration,
            lr,
            loss: lv,
            val_loss,
            wall_time: clock.elapsed().as_secs_f64(),
        };
        on_row(&row);
        log.push(row);
    }
    Ok(SupervisedOutcome {
        params: best.0,
        log,
        best_iteration: best.1,
        best_val_loss: best.2,
        initial_val_loss: initial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{make_environment, EnvironmentId};
    use crate::policy::default_dims;

    fn desk(id: EnvironmentId, cells: usize) -> Simulator {
        let patch: toml::Table = toml::from_str(&format!("grid_cells = {cells}")).unwrap();
        Simulator::new(make_environment(id, Some(&patch)).unwrap()).unwrap()
    }

    #[test]
    fn learning_rate_schedule() {
        assert_eq!(lr_schedule(0.01, 200, 0), 0.01);
        assert_eq!(lr_schedule(0.01, 200, 200), 0.005);
        assert_eq!(lr_schedule(0.01, 200, 399), 0.005);
        assert_eq!(lr_schedule(0.01, 1000, 2500), 0.0025);
    }

    #[test]
    fn defaults_follow_dof() {
        let two = TrainConfig::for_dof(Dof::Two);
        assert_eq!((two.n_i, two.lr_half_every, two.weights.l), (1000, 200, 16));
        let three = TrainConfig::for_dof(Dof::Three);
        assert_eq!((three.n_i, three.lr_half_every, three.lr0), (5000, 1000, 0.01));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![Tensor::vector(vec![3.0, -2.0])];
        let mut opt = Adam::new(&p);
        for _ in 0..2000 {
            let g = vec![p[0].scaled(2.0)];
            opt.step(&mut p, &g, 0.01);
        }
        assert!(p[0].norm() < 1e-3, "{:?}", p[0]);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].item() - 0.6).abs() < 1e-15 && (g[1].item() - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::vector(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].item(), 0.1);
    }

    #[test]
    fn quintic_is_rest_to_rest() {
        assert_eq!(quintic(2.0, 5.0, 0.0), 2.0);
        assert_eq!(quintic(2.0, 5.0, 1.0), 5.0);
        assert!((quintic(2.0, 5.0, 0.5) - 3.5).abs() < 1e-15);
        let h = 1e-4;
        let d = |t: f64| (quintic(0.0, 1.0, t + h) - quintic(0.0, 1.0, t - h)) / (2.0 * h);
        assert!(d(h).abs() < 1e-6 && d(1.0 - h).abs() < 1e-6);
    }

    #[test]
    fn zero_iterations_return_initial_params() {
        let sim = desk(EnvironmentId::BaseNR, 32);
        let cfg = TrainConfig {
            n_i: 0,
            norm_episodes: 1,
            norm_steps: 5,
            val_episodes: 1,
            val_steps: 8,
            ..TrainConfig::for_environment(&sim.cfg)
        };
        let out = train_diffphys(&sim, &cfg, &mut |_| {}).unwrap();
        assert_eq!(out.params, out.final_params);
        assert!(out.log.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let init = PolicyParams::for_environment(&sim.cfg, OutputKind::Bounded, &mut rng).unwrap();
        assert_eq!(out.params.layers, init.layers);
    }

    #[test]
    fn short_training_is_reproducible() {
        let sim = desk(EnvironmentId::BaseNR, 32);
        let cfg = TrainConfig {
            n_i: 3,
            episode_length: 20,
            norm_episodes: 1,
            norm_steps: 10,
            val_every: 0,
            val_episodes: 1,
            val_steps: 8,
            weights: LossWeights { l: 4, ..LossWeights::default_for(Dof::Two) },
            ..TrainConfig::for_environment(&sim.cfg)
        };
        let a = train_diffphys(&sim, &cfg, &mut |_| {}).unwrap();
        let b = train_diffphys(&sim, &cfg, &mut |_| {}).unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.log.len(), 3);
        assert!(a.log.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = PolicyParams::for_environment(&sim.cfg, OutputKind::Bounded, &mut rng).unwrap();
        assert_ne!(a.final_params.layers, init.layers);
    }

    #[test]
    fn hover_target_cancels_fluid_force() {
        let sim = desk(EnvironmentId::BuoyNR, 32);
        let mut state = sim.reset().unwrap();
        // let the plume develop and reach the body
        for _ in 0..40 {
            state = sim.control_step(&state, Effort::default(), false).unwrap().0;
        }
        let still = crate::rigid_body::BodyState::at_rest(state.body.position, 0.0);
        state.body = still;
        let (e, next, info) = drive_to(&sim, &state, (still.position, 0.0), Effort::default()).unwrap();
        assert!(info.fluid_force[0].abs() + info.fluid_force[1].abs() > 0.0);
        assert!((e.force[0] + info.fluid_force[0]).abs() < 1e-9, "{e:?} {info:?}");
        assert!((e.force[1] + info.fluid_force[1]).abs() < 1e-9);
        assert!((next.body.position[0] - still.position[0]).abs() < 1e-10);
    }

    #[test]
    fn dataset_round_trip_and_split() {
        let d = Dataset {
            z_dim: 2,
            n_sims: 5,
            samples: (0..10)
                .map(|k| SupervisedSample { z: vec![k as f64, -1.0], target: [1.0, 2.0, k as f64] })
                .collect(),
        };
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d).unwrap();
        assert_eq!(&buf[..4], b"DSET");
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), d);
        let (train, val) = d.split().unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        assert_eq!(validation_sims(100).unwrap(), 20);
        assert_eq!(validation_sims(200).unwrap(), 20);
        assert!(validation_sims(1).is_err());
    }

    #[test]
    fn memorizes_a_single_sample() {
        let layout = ObservationLayout::default_for(Dof::Two);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let template = PolicyParams::init(&default_dims(Dof::Two), layout, OutputKind::Linear, 50.0, 1.0, &mut rng).unwrap();
        let sample = SupervisedSample {
            z: (0..16).map(|k| 0.1 * k as f64 - 0.5).collect(),
            target: [3.0, -7.5, 0.0],
        };
        let cfg = SupervisedConfig { n_i: 3000, val_every: 100, lr_half_every: 1000, ..Default::default() };
        let set = [sample];
        let out = train_supervised(&set, &[], &template, &cfg, &mut |_| {}).unwrap();
        assert!(out.best_val_loss < 1e-6, "{}", out.best_val_loss);
        assert!(out.best_val_loss <= out.initial_val_loss);
        assert_eq!(out.params.output, OutputKind::Linear);
    }
}
