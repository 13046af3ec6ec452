//! Fluid operators as tape nodes.
//!
//! Velocities travel as packed `[u_x..., u_y...]` vectors, cell fields as
//! `[ny, nx]` tensors, flags as a constant tensor of flag codes and the body
//! as `[x, y, alpha, vx, vy, omega]`.

use super::advect::{maccormack, maccormack_vjp};
use super::boundary::{apply_boundary_conditions, boundary_vjp};
use super::buoyancy::{apply_buoyancy, buoyancy_vjp_marker};
use super::diffuse::{diffuse, diffuse_vjp};
use super::interp::Lattice;
use super::pressure::{solve_laplace, PoissonSystem};
use super::project::{divergence, divergence_vjp, pressure_gradient_vjp, solve_projection_pressure, subtract_gradient};
use super::FluidParams;
use crate::autodiff::{AdjointHandle, AdjointRegistry, BackwardCtx, CustomAdjoint, Saved, Tape, Var};
use crate::error::Result;
use crate::grid::{CellFlags, Grid, ScalarField, StaggeredVelocity};
use crate::rigid_body::BodyState;
use crate::tensor::Tensor;

fn vel_of(g: Grid, t: &Tensor) -> Result<StaggeredVelocity> {
    StaggeredVelocity::from_tensor(g, t)
}

fn cells(g: Grid, values: Vec<f64>) -> Tensor {
    Tensor::new(vec![g.ny, g.nx], values).expect("cell field shape")
}

fn nothing() -> Saved {
    Box::new(())
}

struct Boundary {
    grid: Grid,
    inflow_speed: f64,
}

impl CustomAdjoint for Boundary {
    fn name(&self) -> &str {
        "fluid.boundary"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let vel = vel_of(self.grid, inputs[0])?;
        let body = BodyState::from_tensor(inputs[1])?;
        let flags = CellFlags::from_tensor(self.grid, inputs[2])?;
        Ok((apply_boundary_conditions(&vel, &flags, &body, self.inflow_speed).to_tensor(), nothing()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let body = BodyState::from_tensor(ctx.inputs[1])?;
        let flags = CellFlags::from_tensor(self.grid, ctx.inputs[2])?;
        let g = vel_of(self.grid, ctx.grad_output)?;
        let (gv, gb) = boundary_vjp(&g, &flags, &body);
        Ok(vec![Some(gv.to_tensor()), Some(Tensor::from_slice(&gb)), None])
    }
}

struct AdvectVelocity {
    grid: Grid,
    dt: f64,
}

impl CustomAdjoint for AdvectVelocity {
    fn name(&self) -> &str {
        "fluid.advect_velocity"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let vel = vel_of(self.grid, inputs[0])?;
        Ok((super::advect::advect_velocity(&vel, &vel, self.dt).to_tensor(), nothing()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = self.grid;
        let vel = vel_of(g, ctx.inputs[0])?;
        let go = vel_of(g, ctx.grad_output)?;
        let (gqx, mut gx, mut gy) = maccormack_vjp(&vel.ux, Lattice::ux(&g), &vel, self.dt, &go.ux);
        let (gqy, gx2, gy2) = maccormack_vjp(&vel.uy, Lattice::uy(&g), &vel, self.dt, &go.uy);
        for (a, b) in gx.iter_mut().zip(gqx.iter().zip(&gx2)) {
            *a += b.0 + b.1;
        }
        for (a, b) in gy.iter_mut().zip(gqy.iter().zip(&gy2)) {
            *a += b.0 + b.1;
        }
        Ok(vec![Some(StaggeredVelocity { grid: g, ux: gx, uy: gy }.to_tensor())])
    }
}

/// Marker transport followed by a clamp to `[0, 1]`.
struct AdvectMarker {
    grid: Grid,
    dt: f64,
}

impl CustomAdjoint for AdvectMarker {
    fn name(&self) -> &str {
        "fluid.advect_marker"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let vel = vel_of(self.grid, inputs[1])?;
        let out = maccormack(inputs[0].data(), Lattice::cells(&self.grid), &vel, self.dt);
        Ok((cells(self.grid, out.into_iter().map(|m| m.clamp(0.0, 1.0)).collect()), nothing()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = self.grid;
        let vel = vel_of(g, ctx.inputs[1])?;
        let q = ctx.inputs[0].data();
        let raw = maccormack(q, Lattice::cells(&g), &vel, self.dt);
        let go: Vec<f64> = raw
            .iter()
            .zip(ctx.grad_output.data())
            .map(|(m, gv)| if (0.0..=1.0).contains(m) { *gv } else { 0.0 })
            .collect();
        let (gq, gx, gy) = maccormack_vjp(q, Lattice::cells(&g), &vel, self.dt, &go);
        Ok(vec![
            Some(cells(g, gq)),
            Some(StaggeredVelocity { grid: g, ux: gx, uy: gy }.to_tensor()),
        ])
    }
}

struct Diffuse {
    grid: Grid,
    nu: f64,
    dt: f64,
}

impl CustomAdjoint for Diffuse {
    fn name(&self) -> &str {
        "fluid.diffuse"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let vel = vel_of(self.grid, inputs[0])?;
        let flags = CellFlags::from_tensor(self.grid, inputs[1])?;
        Ok((diffuse(&vel, &flags, self.nu, self.dt).to_tensor(), nothing()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let flags = CellFlags::from_tensor(self.grid, ctx.inputs[1])?;
        let go = vel_of(self.grid, ctx.grad_output)?;
        Ok(vec![Some(diffuse_vjp(&go, &flags, self.nu, self.dt).to_tensor()), None])
    }
}

struct Buoyancy {
    grid: Grid,
    coeff: f64,
    dt: f64,
}

impl CustomAdjoint for Buoyancy {
    fn name(&self) -> &str {
        "fluid.buoyancy"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let vel = vel_of(self.grid, inputs[0])?;
        let marker = ScalarField::from_tensor(self.grid, inputs[1])?;
        Ok((apply_buoyancy(&vel, &marker, self.coeff, self.dt).to_tensor(), nothing()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = self.grid;
        let go = ctx.grad_output.data();
        let gm = buoyancy_vjp_marker(&go[g.n_ux()..], g, self.coeff, self.dt);
        Ok(vec![Some(ctx.grad_output.clone()), Some(cells(g, gm))])
    }
}

/// Sets the marker to 1 on the source cells.
struct MarkerSource {
    grid: Grid,
    cells: Vec<usize>,
}

impl CustomAdjoint for MarkerSource {
    fn name(&self) -> &str {
        "fluid.marker_source"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let mut out = inputs[0].clone();
        for &k in &self.cells {
            out.data_mut()[k] = 1.0;
        }
        Ok((out, nothing()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let mut g = ctx.grad_output.clone();
        for &k in &self.cells {
            g.data_mut()[k] = 0.0;
        }
        debug_assert_eq!(g.len(), self.grid.n_cells());
        Ok(vec![Some(g)])
    }
}

/// Pressure of the projection, `lap p = (rho / dt) div u`. The adjoint runs
/// the same symmetric solve on the incoming cotangent.
struct PressureSolve {
    grid: Grid,
    params: FluidParams,
}

impl CustomAdjoint for PressureSolve {
    fn name(&self) -> &str {
        "fluid.pressure_solve"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let vel = vel_of(self.grid, inputs[0])?;
        let flags = CellFlags::from_tensor(self.grid, inputs[1])?;
        let (p, _) = solve_projection_pressure(&vel, &flags, &self.params)?;
        Ok((p.to_tensor(), nothing()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let flags = CellFlags::from_tensor(self.grid, ctx.inputs[1])?;
        let sys = PoissonSystem::new(&flags);
        let (z, _) = solve_laplace(
            &sys,
            ctx.grad_output.data(),
            self.params.pressure_tol,
            self.params.pressure_max_iter,
        );
        let s = self.params.rho / self.params.dt;
        let gd: Vec<f64> = z.into_iter().map(|v| s * v).collect();
        Ok(vec![Some(divergence_vjp(&gd, self.grid).to_tensor()), None])
    }
}

struct PressureGradient {
    grid: Grid,
    scale: f64,
}

impl CustomAdjoint for PressureGradient {
    fn name(&self) -> &str {
        "fluid.pressure_gradient"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let vel = vel_of(self.grid, inputs[0])?;
        let p = ScalarField::from_tensor(self.grid, inputs[1])?;
        let flags = CellFlags::from_tensor(self.grid, inputs[2])?;
        Ok((subtract_gradient(&vel, &p, &flags, self.scale).to_tensor(), nothing()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let flags = CellFlags::from_tensor(self.grid, ctx.inputs[2])?;
        let go = vel_of(self.grid, ctx.grad_output)?;
        let gp = pressure_gradient_vjp(&go, &flags);
        Ok(vec![
            Some(ctx.grad_output.clone()),
            Some(cells(self.grid, gp.into_iter().map(|v| -self.scale * v).collect())),
            None,
        ])
    }
}

/// Handles to the fluid operators of one grid and parameter set.
#[derive(Clone, Debug)]
pub struct FluidOps {
    pub boundary: AdjointHandle,
    pub advect_velocity: AdjointHandle,
    pub advect_marker: AdjointHandle,
    pub diffuse: AdjointHandle,
    pub buoyancy: AdjointHandle,
    pub marker_source: AdjointHandle,
    pub pressure_solve: AdjointHandle,
    pub pressure_gradient: AdjointHandle,
}

impl FluidOps {
    /// Registers every fluid operator; `source_cells` are the marker emitter cells.
    pub fn register(
        registry: &mut AdjointRegistry,
        grid: Grid,
        params: &FluidParams,
        source_cells: Vec<usize>,
    ) -> Result<Self> {
        params.validate()?;
        let p = params.clone();
        Ok(Self {
            boundary: registry.register(Boundary {
                grid,
                inflow_speed: p.inflow_speed,
            })?,
            advect_velocity: registry.register(AdvectVelocity { grid, dt: p.dt })?,
            advect_marker: registry.register(AdvectMarker { grid, dt: p.dt })?,
            diffuse: registry.register(Diffuse {
                grid,
                nu: p.nu(),
                dt: p.dt,
            })?,
            buoyancy: registry.register(Buoyancy {
                grid,
                coeff: p.buoyancy_coeff,
                dt: p.dt,
            })?,
            marker_source: registry.register(MarkerSource {
                grid,
                cells: source_cells,
            })?,
            pressure_solve: registry.register(PressureSolve { grid, params: p.clone() })?,
            pressure_gradient: registry.register(PressureGradient {
                grid,
                scale: p.dt / p.rho,
            })?,
        })
    }
}

/// Tape variables produced by one fluid step.
#[derive(Clone, Copy, Debug)]
pub struct FluidStepVars {
    pub vel: Var,
    pub pressure: Var,
    pub marker: Var,
}

/// Records one fluid step: marker source, boundary conditions, advection,
/// diffusion, buoyancy, boundary conditions again, projection.
pub fn record_fluid_step(
    tape: &mut Tape,
    ops: &FluidOps,
    vel: Var,
    marker: Var,
    body: Var,
    flags: Var,
    buoyancy: bool,
) -> Result<FluidStepVars> {
    let marker = if buoyancy { tape.custom(&ops.marker_source, &[marker])? } else { marker };
    let v = tape.custom(&ops.boundary, &[vel, body, flags])?;
    let marker = if buoyancy { tape.custom(&ops.advect_marker, &[marker, v])? } else { marker };
    let v = tape.custom(&ops.advect_velocity, &[v])?;
    let v = tape.custom(&ops.diffuse, &[v, flags])?;
    let v = if buoyancy { tape.custom(&ops.buoyancy, &[v, marker])? } else { v };
    let v = tape.custom(&ops.boundary, &[v, body, flags])?;
    let p = tape.custom(&ops.pressure_solve, &[v, flags])?;
    let v = tape.custom(&ops.pressure_gradient, &[v, p, flags])?;
    Ok(FluidStepVars { vel: v, pressure: p, marker })
}

/// Divergence of a packed velocity tensor, for diagnostics.
pub fn tensor_divergence(grid: Grid, vel: &Tensor) -> Result<ScalarField> {
    Ok(divergence(&vel_of(grid, vel)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, FD_STEP};
    use crate::grid::DomainBoundary;
    use crate::rigid_body::{rasterize, BodyShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        ops: FluidOps,
        grid: Grid,
        flags: Tensor,
        body: BodyState,
        vel: Tensor,
        marker: Tensor,
        rng: ChaCha8Rng,
    }

    fn fixture(seed: u64) -> Fixture {
        let grid = Grid::square(16, 16.0).unwrap();
        let params = FluidParams {
            dt: 0.5,
            rho: 0.2,
            reynolds: 50.0,
            pressure_tol: 1e-13,
            ..Default::default()
        };
        let mut reg = AdjointRegistry::new();
        let ops = FluidOps::register(&mut reg, grid, &params, vec![grid.cell(7, 1), grid.cell(8, 1)]).unwrap();
        let body = BodyState {
            position: [8.3, 7.6],
            alpha: 0.2,
            velocity: [0.3, -0.2],
            omega: 0.05,
        };
        let base = CellFlags::empty(grid, DomainBoundary::Channel);
        let (flags, _) = rasterize(&BodyShape::Cylinder { radius: 2.6 }, &body, &base).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vel = StaggeredVelocity::from_fn(grid, |x, y| {
            [0.6 * (0.4 * y + 0.3).sin() + 0.2 * (0.5 * x).cos(), 0.5 * (0.35 * x - 0.2).cos() - 0.1 * (0.3 * y).sin()]
        });
        let mut vel = vel.to_tensor();
        for v in vel.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let marker = cells(grid, (0..grid.n_cells()).map(|_| rng.gen_range(0.1..0.9)).collect());
        Fixture {
            ops,
            grid,
            flags: flags.to_tensor(),
            body,
            vel,
            marker,
            rng,
        }
    }

    fn weights(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// `sum(w * out)`, flattening `out`.
    fn contract(t: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
        let n = t.value(out).len();
        let flat = t.reshape(out, vec![n])?;
        let w = t.constant(w.clone());
        let prod = t.mul(flat, w)?;
        t.sum(prod)
    }

    fn assert_passes(what: &str, r: crate::autodiff::GradCheckReport, tol: f64) {
        assert!(r.passes(tol), "{what}: max rel err {} ({} non-finite)", r.max_rel_err, r.non_finite.len());
    }

    #[test]
    fn boundary_adjoint() {
        let mut fx = fixture(1);
        let w = weights(&mut fx.rng, fx.grid.n_faces());
        let (ops, flags, body) = (&fx.ops, &fx.flags, fx.body.to_tensor());
        let r = grad_check(
            |t, v| {
                let b = t.constant(body.clone());
                let f = t.constant(flags.clone());
                let o = t.custom(&ops.boundary, &[v, b, f])?;
                contract(t, o, &w)
            },
            &fx.vel,
            FD_STEP,
        )
        .unwrap();
        assert_passes("boundary/vel", r, 1e-6);
        let vel = fx.vel.clone();
        let r = grad_check(
            |t, b| {
                let v = t.constant(vel.clone());
                let f = t.constant(flags.clone());
                let o = t.custom(&ops.boundary, &[v, b, f])?;
                contract(t, o, &w)
            },
            &body,
            FD_STEP,
        )
        .unwrap();
        assert_passes("boundary/body", r, 1e-6);
    }

    #[test]
    fn advection_adjoints() {
        let mut fx = fixture(2);
        let w = weights(&mut fx.rng, fx.grid.n_faces());
        let ops = &fx.ops;
        let r = grad_check(
            |t, v| {
                let o = t.custom(&ops.advect_velocity, &[v])?;
                contract(t, o, &w)
            },
            &fx.vel,
            FD_STEP,
        )
        .unwrap();
        assert_passes("advect_velocity", r, 1e-5);

        let wm = weights(&mut fx.rng, fx.grid.n_cells());
        let vel = fx.vel.clone();
        let r = grad_check(
            |t, m| {
                let v = t.constant(vel.clone());
                let o = t.custom(&ops.advect_marker, &[m, v])?;
                contract(t, o, &wm)
            },
            &fx.marker,
            FD_STEP,
        )
        .unwrap();
        assert_passes("advect_marker/marker", r, 1e-5);
        let marker = fx.marker.clone();
        let r = grad_check(
            |t, v| {
                let m = t.constant(marker.clone());
                let o = t.custom(&ops.advect_marker, &[m, v])?;
                contract(t, o, &wm)
            },
            &fx.vel,
            FD_STEP,
        )
        .unwrap();
        assert_passes("advect_marker/vel", r, 1e-5);
    }

    #[test]
    fn diffusion_and_buoyancy_adjoints() {
        let mut fx = fixture(3);
        let w = weights(&mut fx.rng, fx.grid.n_faces());
        let (ops, flags) = (&fx.ops, &fx.flags);
        let marker = fx.marker.clone();
        let r = grad_check(
            |t, v| {
                let f = t.constant(flags.clone());
                let o = t.custom(&ops.diffuse, &[v, f])?;
                let m = t.constant(marker.clone());
                let o = t.custom(&ops.buoyancy, &[o, m])?;
                contract(t, o, &w)
            },
            &fx.vel,
            FD_STEP,
        )
        .unwrap();
        assert_passes("diffuse", r, 1e-6);
        let vel = fx.vel.clone();
        let r = grad_check(
            |t, m| {
                let v = t.constant(vel.clone());
                let m = t.custom(&ops.marker_source, &[m])?;
                let o = t.custom(&ops.buoyancy, &[v, m])?;
                contract(t, o, &w)
            },
            &fx.marker,
            FD_STEP,
        )
        .unwrap();
        assert_passes("buoyancy/marker", r, 1e-6);
    }

    #[test]
    fn projection_adjoint() {
        let mut fx = fixture(4);
        let w = weights(&mut fx.rng, fx.grid.n_faces());
        let (ops, flags) = (&fx.ops, &fx.flags);
        let r = grad_check(
            |t, v| {
                let f = t.constant(flags.clone());
                let p = t.custom(&ops.pressure_solve, &[v, f])?;
                let o = t.custom(&ops.pressure_gradient, &[v, p, f])?;
                contract(t, o, &w)
            },
            &fx.vel,
            FD_STEP,
        )
        .unwrap();
        assert_passes("project", r, 1e-4);
    }

    #[test]
    fn full_fluid_step_adjoint() {
        let mut fx = fixture(5);
        let w = weights(&mut fx.rng, fx.grid.n_faces());
        let (ops, flags, body) = (&fx.ops, &fx.flags, fx.body.to_tensor());
        let marker = fx.marker.clone();
        let r = grad_check(
            |t, v| {
                let f = t.constant(flags.clone());
                let b = t.constant(body.clone());
                let m = t.constant(marker.clone());
                let out = record_fluid_step(t, ops, v, m, b, f, true)?;
                contract(t, out.vel, &w)
            },
            &fx.vel,
            FD_STEP,
        )
        .unwrap();
        assert_passes("fluid step", r, 1e-3);
    }
}
