//! Classical controllers: PID and a fixed discrete loop-shaping filter.

use serde::{Deserialize, Serialize};

use crate::environment::{Effort, EnvironmentConfig, Objective, SimState};
use crate::error::{Error, Result};
use crate::rigid_body::{rotate, wrap_angle, BodyShape};

/// Sampling interval baked into the PID formula.
pub const PID_INTERVAL: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub p: f64,
    pub d: f64,
    pub i: f64,
}

impl PidGains {
    pub const CYLINDER_FORCE: PidGains = PidGains { p: 1.0, d: 8.0, i: 0.001 };
    pub const BOX_FORCE: PidGains = PidGains { p: 2.0, d: 15.0, i: 0.001 };
    pub const BOX_TORQUE: PidGains = PidGains { p: 100.0, d: 1000.0, i: 0.01 };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopShapingCoeffs {
    /// `n_0, n_1, n_2`
    pub n: [f64; 3],
    /// `d_1, d_2`
    pub d: [f64; 2],
}

impl Default for LoopShapingCoeffs {
    fn default() -> Self {
        Self {
            n: [1.1700924033918623e00, -1.4694211940919182e00, 3.0598060140064326e-01],
            d: [-1.2306775904257603e00, 2.6726488821832250e-01],
        }
    }
}

/// Per-channel history.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ControllerMemory {
    /// `e^{t-1}, e^{t-2}`
    pub errors: [f64; 2],
    pub error_sum: f64,
    /// `U^{t-1}, U^{t-2}`
    pub outputs: [f64; 2],
    pub steps: usize,
}

/// `U = P e + D (e - e_prev) / 0.1 + 0.1 I sum(e)`. On the first step after a
/// reset the previous error is taken to be the current one.
pub fn pid_step(gains: &PidGains, e: f64, mem: &ControllerMemory) -> (f64, ControllerMemory) {
    let prev = if mem.steps == 0 { e } else { mem.errors[0] };
    let sum = mem.error_sum + e;
    let u = gains.p * e + gains.d * (e - prev) / PID_INTERVAL + PID_INTERVAL * sum * gains.i;
    let next = ControllerMemory {
        errors: [e, prev],
        error_sum: sum,
        outputs: [u, mem.outputs[0]],
        steps: mem.steps + 1,
    };
    (u, next)
}

/// `U^t = sum_p n_p e^{t-p} - sum_p d_p U^{t-p}` with zero initial history.
pub fn loopshaping_step(c: &LoopShapingCoeffs, e: f64, mem: &ControllerMemory) -> (f64, ControllerMemory) {
    let u = c.n[0] * e + c.n[1] * mem.errors[0] + c.n[2] * mem.errors[1]
        - c.d[0] * mem.outputs[0]
        - c.d[1] * mem.outputs[1];
    let next = ControllerMemory {
        errors: [e, mem.errors[0]],
        error_sum: mem.error_sum + e,
        outputs: [u, mem.outputs[0]],
        steps: mem.steps + 1,
    };
    (u, next)
}

/// Body-frame tracking errors `(e_xy, e_alpha)`.
pub fn body_frame_errors(state: &SimState, objective: &Objective) -> ([f64; 2], f64) {
    let b = &state.body;
    let world = [objective.position[0] - b.position[0], objective.position[1] - b.position[1]];
    (rotate(world, -b.alpha), wrap_angle(objective.alpha - b.alpha))
}

/// Anything that maps the observed state to a body-frame effort.
pub trait Controller: Send {
    fn name(&self) -> &str;

    /// Clears all history; called at episode start.
    fn reset(&mut self);

    /// Called when the objective switches mid-episode.
    fn objective_changed(&mut self) {}

    /// Whether the environment should clamp the output to its effort bounds.
    fn bounded(&self) -> bool;

    fn act(&mut self, state: &SimState, objective: &Objective) -> Result<Effort>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Pid,
    #[serde(rename = "loopshaping")]
    LoopShaping,
}

#[derive(Clone, Debug)]
enum Law {
    Pid([PidGains; 3]),
    LoopShaping(LoopShapingCoeffs),
}

/// Independent per-channel linear controllers on the body-frame errors.
#[derive(Clone, Debug)]
pub struct LinearController {
    law: Law,
    channels: usize,
    memory: [ControllerMemory; 3],
}

impl LinearController {
    pub fn pid(force: PidGains, torque: PidGains, channels: usize) -> Self {
        Self {
            law: Law::Pid([force, force, torque]),
            channels,
            memory: Default::default(),
        }
    }

    pub fn loopshaping(coeffs: LoopShapingCoeffs) -> Self {
        Self {
            law: Law::LoopShaping(coeffs),
            channels: 2,
            memory: Default::default(),
        }
    }
}

impl Controller for LinearController {
    fn name(&self) -> &str {
        match self.law {
            Law::Pid(_) => "PID",
            Law::LoopShaping(_) => "LS",
        }
    }

    fn reset(&mut self) {
        self.memory = Default::default();
    }

    fn objective_changed(&mut self) {
        self.reset();
    }

    fn bounded(&self) -> bool {
        false
    }

    fn act(&mut self, state: &SimState, objective: &Objective) -> Result<Effort> {
        let (exy, ea) = body_frame_errors(state, objective);
        let errors = [exy[0], exy[1], ea];
        let mut u = [0.0; 3];
        for c in 0..self.channels {
            let (out, mem) = match &self.law {
                Law::Pid(g) => pid_step(&g[c], errors[c], &self.memory[c]),
                Law::LoopShaping(k) => loopshaping_step(k, errors[c], &self.memory[c]),
            };
            u[c] = out;
            self.memory[c] = mem;
        }
        Ok(Effort::new(u[0], u[1], u[2]))
    }
}

/// The baseline for an environment, using the gain rows of its body shape.
pub fn make_baseline(kind: BaselineKind, cfg: &EnvironmentConfig) -> Result<LinearController> {
    let channels = cfg.dof.channels();
    match kind {
        BaselineKind::Pid => {
            let force = match cfg.shape {
                BodyShape::Cylinder { .. } => PidGains::CYLINDER_FORCE,
                BodyShape::Box { .. } => PidGains::BOX_FORCE,
            };
            Ok(LinearController::pid(force, PidGains::BOX_TORQUE, channels))
        }
        BaselineKind::LoopShaping if channels == 2 => Ok(LinearController::loopshaping(LoopShapingCoeffs::default())),
        BaselineKind::LoopShaping => Err(Error::config(format!(
            "the loop-shaping controller only covers 2-DOF force channels, {} has 3 DOF",
            cfg.id
        ))),
    }
}
