use super::{external_forcing, EnvironmentConfig};
use crate::autodiff::{AdjointRegistry, Tape, Var};
use crate::error::{Error, Result};
use crate::fluid::{record_fluid_step, FluidOps};
use crate::grid::{CellFlags, Grid, ScalarField, StaggeredVelocity};
use crate::rigid_body::{rasterize, rotate, BodyOps, BodyState};
use crate::tensor::Tensor;

/// Control force and torque.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Effort {
    pub force: [f64; 2],
    pub torque: f64,
}

impl Effort {
    pub fn new(fx: f64, fy: f64, torque: f64) -> Self {
        Self { force: [fx, fy], torque }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.force[0], self.force[1], self.torque]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            force: [v[0], v[1]],
            torque: v.get(2).copied().unwrap_or(0.0),
        }
    }

    /// Rotates the force by `angle`; the torque is frame independent.
    pub fn rotated(self, angle: f64) -> Self {
        Self {
            force: rotate(self.force, angle),
            torque: self.torque,
        }
    }
}

/// The complete coupled state.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub vel: StaggeredVelocity,
    pub pressure: ScalarField,
    pub marker: ScalarField,
    pub flags: CellFlags,
    pub body: BodyState,
    pub t: f64,
    pub step_index: usize,
    /// Last applied control, world frame.
    pub last_efforts: Effort,
}

/// Diagnostics of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepInfo {
    pub fluid_force: [f64; 2],
    pub fluid_torque: f64,
    /// The control actually applied, world frame.
    pub applied: Effort,
    pub clamped: bool,
}

/// A state whose fields live on a tape.
#[derive(Clone, Debug)]
pub struct TapedState {
    pub vel: Var,
    pub pressure: Var,
    pub marker: Var,
    pub body: Var,
    /// World-frame `[F_x, F_y, T]` of the last control.
    pub effort: Var,
    pub flags: CellFlags,
    pub step_index: usize,
}

/// A configured environment with its registered operators.
pub struct Simulator {
    pub cfg: EnvironmentConfig,
    grid: Grid,
    base_flags: CellFlags,
    registry: AdjointRegistry,
    fluid_ops: FluidOps,
    body_ops: BodyOps,
}

impl Simulator {
    pub fn new(cfg: EnvironmentConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let base_flags = CellFlags::empty(grid, cfg.boundary());
        let source = source_cells(&cfg, &base_flags);
        let mut registry = AdjointRegistry::new();
        let fluid_ops = FluidOps::register(&mut registry, grid, &cfg.fluid, source)?;
        let body_ops = BodyOps::register(&mut registry, grid, &cfg.shape, cfg.props, cfg.fluid.dt, cfg.dof)?;
        Ok(Self {
            cfg,
            grid,
            base_flags,
            registry,
            fluid_ops,
            body_ops,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn registry(&self) -> &AdjointRegistry {
        &self.registry
    }

    /// Quiescent fluid with the body at rest at its start position. Every
    /// reset is identical; the seed only matters to callers that sample
    /// objectives.
    pub fn reset(&self) -> Result<SimState> {
        let body = BodyState::at_rest(self.cfg.start_position, 0.0);
        let flags = self.rasterize(&body, 0)?;
        Ok(SimState {
            vel: StaggeredVelocity::zeros(self.grid),
            pressure: ScalarField::zeros(self.grid),
            marker: ScalarField::zeros(self.grid),
            flags,
            body,
            t: 0.0,
            step_index: 0,
            last_efforts: Effort::default(),
        })
    }

    fn rasterize(&self, body: &BodyState, step: usize) -> Result<CellFlags> {
        match rasterize(&self.cfg.shape, body, &self.base_flags) {
            Ok((flags, _)) => Ok(flags),
            Err(Error::OutOfDomain { x, y, alpha, .. }) => Err(Error::OutOfDomain { step, x, y, alpha }),
            Err(e) => Err(e),
        }
    }

    pub fn time_of(&self, step_index: usize) -> f64 {
        step_index as f64 * self.cfg.fluid.dt
    }

    /// Places a state on the tape as constants.
    pub fn tape_state(&self, tape: &mut Tape, s: &SimState) -> TapedState {
        TapedState {
            vel: tape.constant(s.vel.to_tensor()),
            pressure: tape.constant(s.pressure.to_tensor()),
            marker: tape.constant(s.marker.to_tensor()),
            body: tape.constant(s.body.to_tensor()),
            effort: tape.constant(Tensor::from_slice(&s.last_efforts.to_array())),
            flags: s.flags.clone(),
            step_index: s.step_index,
        }
    }

    /// Reads a taped state back.
    pub fn untape_state(&self, tape: &Tape, s: &TapedState) -> Result<SimState> {
        Ok(SimState {
            vel: StaggeredVelocity::from_tensor(self.grid, tape.value(s.vel))?,
            pressure: ScalarField::from_tensor(self.grid, tape.value(s.pressure))?,
            marker: ScalarField::from_tensor(self.grid, tape.value(s.marker))?,
            flags: s.flags.clone(),
            body: BodyState::from_tensor(tape.value(s.body))?,
            t: self.time_of(s.step_index),
            step_index: s.step_index,
            last_efforts: Effort::from_slice(tape.value(s.effort).data()),
        })
    }

    /// Rotates a body-frame effort `[F_x, F_y(, T)]` into the world frame,
    /// padding a missing torque with zero.
    pub fn effort_to_world(&self, tape: &mut Tape, effort: Var, body: Var) -> Result<Var> {
        let n = tape.value(effort).len();
        let force = tape.slice(effort, 0, 2)?;
        let alpha = tape.slice(body, 2, 1)?;
        let world = tape.rotate2d(force, alpha)?;
        let torque = if n >= 3 {
            tape.slice(effort, 2, 1)?
        } else {
            tape.constant(Tensor::vector(vec![0.0]))
        };
        tape.concat(&[world, torque])
    }

    /// Records one solver step driven by a world-frame effort; returns the
    /// new state and the fluid force/torque `[F_x, F_y, T]` on the body.
    pub fn record_step(&self, tape: &mut Tape, s: &TapedState, effort_world: Var) -> Result<(TapedState, Var)> {
        let body = BodyState::from_tensor(tape.value(s.body))?;
        let flags = self.rasterize(&body, s.step_index)?;
        let flags_var = tape.constant(flags.to_tensor());
        let fluid = record_fluid_step(
            tape,
            &self.fluid_ops,
            s.vel,
            s.marker,
            s.body,
            flags_var,
            self.cfg.buoyancy,
        )?;
        let force = tape.custom(&self.body_ops.fluid_force, &[fluid.pressure, s.body, flags_var])?;
        let mut total = tape.add(force, effort_world)?;
        if self.cfg.forcing {
            let (f, t) = external_forcing(&self.cfg.forcing_schedule, self.time_of(s.step_index));
            if f != [0.0, 0.0] || t != 0.0 {
                let ext = tape.constant(Tensor::from_slice(&[f[0], f[1], t]));
                total = tape.add(total, ext)?;
            }
        }
        let body_next = tape.custom(&self.body_ops.integrate, &[s.body, total])?;
        let next = TapedState {
            vel: fluid.vel,
            pressure: fluid.pressure,
            marker: fluid.marker,
            body: body_next,
            effort: effort_world,
            flags,
            step_index: s.step_index + 1,
        };
        Ok((next, force))
    }

    /// Records one controller interval with a body-frame effort held for
    /// `controller_stride` solver steps. Returns the fluid force of the last
    /// solver step.
    pub fn record_control_step(&self, tape: &mut Tape, s: &TapedState, effort_body: Var) -> Result<(TapedState, Var)> {
        let world = self.effort_to_world(tape, effort_body, s.body)?;
        let (mut cur, mut force) = self.record_step(tape, s, world)?;
        for _ in 1..self.cfg.controller_stride {
            let (next, f) = self.record_step(tape, &cur, world)?;
            cur = next;
            force = f;
        }
        Ok((cur, force))
    }

    fn clamp(&self, e: Effort) -> (Effort, bool) {
        let (fm, tm) = (self.cfg.f_max, self.cfg.t_max);
        let c = Effort {
            force: [e.force[0].clamp(-fm, fm), e.force[1].clamp(-fm, fm)],
            torque: e.torque.clamp(-tm, tm),
        };
        let clamped = c != e;
        if clamped {
            log::debug!("control {e:?} clamped to {c:?}");
        }
        (c, clamped)
    }

    /// One solver step with a world-frame effort, without recording.
    pub fn step_world(&self, state: &SimState, effort_world: Effort) -> Result<(SimState, StepInfo)> {
        let mut tape = Tape::inference();
        let ts = self.tape_state(&mut tape, state);
        let e = tape.constant(Tensor::from_slice(&effort_world.to_array()));
        let (next, force) = self.record_step(&mut tape, &ts, e)?;
        let f = tape.value(force).data();
        let info = StepInfo {
            fluid_force: [f[0], f[1]],
            fluid_torque: f[2],
            applied: effort_world,
            clamped: false,
        };
        Ok((self.untape_state(&tape, &next)?, info))
    }

    /// One controller interval with a body-frame effort. When `clamp` is set
    /// the effort is limited to `f_max` / `t_max` first.
    pub fn control_step(&self, state: &SimState, effort_body: Effort, clamp: bool) -> Result<(SimState, StepInfo)> {
        let (e, clamped) = if clamp { self.clamp(effort_body) } else { (effort_body, false) };
        let mut e = e;
        if !self.cfg.dof.rotates() {
            e.torque = 0.0;
        }
        let world = e.rotated(state.body.alpha);
        let (mut cur, mut info) = self.step_world(state, world)?;
        for _ in 1..self.cfg.controller_stride {
            let (next, i) = self.step_world(&cur, world)?;
            cur = next;
            info = i;
        }
        info.clamped = clamped;
        Ok((cur, info))
    }
}

fn source_cells(cfg: &EnvironmentConfig, base: &CellFlags) -> Vec<usize> {
    if !cfg.buoyancy {
        return Vec::new();
    }
    let g = base.grid;
    let half = 0.5 * cfg.source_width;
    (0..g.nx)
        .filter(|&i| (g.cell_center(i, 1)[0] - cfg.source_center).abs() <= half && base.is_fluid(i, 1))
        .map(|i| g.cell(i, 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{make_environment, EnvironmentId};
    use crate::fluid::max_fluid_divergence;

    fn desk(id: EnvironmentId) -> Simulator {
        let patch: toml::Table = toml::from_str("grid_cells = 64").unwrap();
        Simulator::new(make_environment(id, Some(&patch)).unwrap()).unwrap()
    }

    #[test]
    fn reset_is_quiescent() {
        let sim = desk(EnvironmentId::Base);
        let s = sim.reset().unwrap();
        assert_eq!(s.body.position, [40.0, 40.0]);
        assert_eq!(s.body.velocity, [0.0, 0.0]);
        assert_eq!(max_fluid_divergence(&s.vel, &s.flags), 0.0);
        assert_eq!(sim.reset().unwrap(), s);
    }

    #[test]
    fn quiescent_equilibrium() {
        let sim = desk(EnvironmentId::Base);
        let s = sim.reset().unwrap();
        let (n, _) = sim.control_step(&s, Effort::default(), true).unwrap();
        assert_eq!(n.body, s.body);
        assert_eq!(n.vel, s.vel);
        assert_eq!(n.step_index, 1);
    }

    #[test]
    fn push_from_rest_is_damped_by_fluid() {
        let sim = desk(EnvironmentId::BaseNR);
        let s = sim.reset().unwrap();
        let m = sim.cfg.props.mass;
        let (n, info) = sim.control_step(&s, Effort::new(m / 0.1 * 0.1, 0.0, 0.0), false).unwrap();
        assert!(n.body.velocity[0] > 0.0 && n.body.velocity[0] <= 0.1 + 1e-12, "{:?}", n.body);
        // the first step imposes the new velocity only on the following step
        assert!(info.fluid_force[0] <= 1e-9);
        let (n2, info2) = sim.control_step(&n, Effort::default(), false).unwrap();
        assert!(info2.fluid_force[0] < 0.0, "{info2:?}");
        assert!(n2.body.velocity[0] < n.body.velocity[0]);
        // two-way coupling: the fluid near the body moves
        assert!(n2.vel.max_abs() > 0.0);
    }

    #[test]
    fn stepping_is_deterministic() {
        let sim = desk(EnvironmentId::InBuoy);
        let run = || {
            let mut s = sim.reset().unwrap();
            for k in 0..5 {
                s = sim.control_step(&s, Effort::new(3.0, -2.0 + k as f64, 40.0), true).unwrap().0;
            }
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn taped_and_plain_steps_agree_bitwise() {
        let sim = desk(EnvironmentId::Base);
        let s = sim.reset().unwrap();
        let e = Effort::new(10.0, 5.0, 100.0);
        let (plain, _) = sim.control_step(&s, e, false).unwrap();
        let mut tape = Tape::new();
        let ts = sim.tape_state(&mut tape, &s);
        let ev = tape.leaf(Tensor::from_slice(&e.to_array()));
        let (next, _) = sim.record_control_step(&mut tape, &ts, ev).unwrap();
        assert_eq!(sim.untape_state(&tape, &next).unwrap(), plain);
    }

    #[test]
    fn two_dof_never_rotates() {
        let sim = desk(EnvironmentId::BuoyNR);
        let mut s = sim.reset().unwrap();
        for _ in 0..20 {
            s = sim.control_step(&s, Effort::new(5.0, 5.0, 1000.0), true).unwrap().0;
        }
        assert_eq!(s.body.alpha, 0.0);
        assert_eq!(s.body.omega, 0.0);
    }
}
