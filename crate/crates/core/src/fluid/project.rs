//! Divergence, masked pressure gradient and the Chorin projection.

use super::pressure::{solve_laplace, PoissonSystem, SolveStats};
use super::FluidParams;
use crate::error::{Error, Result};
use crate::grid::{CellFlag, CellFlags, Grid, ScalarField, StaggeredVelocity};

/// Per-cell `(u_x[i+1] - u_x[i] + u_y[j+1] - u_y[j]) / dx`.
pub fn divergence(vel: &StaggeredVelocity) -> ScalarField {
    let g = vel.grid;
    let mut out = ScalarField::zeros(g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            out.values[g.cell(i, j)] = (vel.ux[g.ux(i + 1, j)] - vel.ux[g.ux(i, j)] + vel.uy[g.uy(i, j + 1)]
                - vel.uy[g.uy(i, j)])
                / g.dx;
        }
    }
    out
}

/// Transpose of [`divergence`].
pub(crate) fn divergence_vjp(g_div: &[f64], g: Grid) -> StaggeredVelocity {
    let mut out = StaggeredVelocity::zeros(g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let v = g_div[g.cell(i, j)] / g.dx;
            out.ux[g.ux(i + 1, j)] += v;
            out.ux[g.ux(i, j)] -= v;
            out.uy[g.uy(i, j + 1)] += v;
            out.uy[g.uy(i, j)] -= v;
        }
    }
    out
}

fn couples(a: CellFlag, b: CellFlag) -> bool {
    let open = |f| matches!(f, CellFlag::Fluid | CellFlag::Outflow);
    open(a) && open(b) && (a == CellFlag::Fluid || b == CellFlag::Fluid)
}

/// Faces that carry a pressure gradient: both sides fluid or outflow, at
/// least one side fluid.
pub(crate) fn gradient_masks(flags: &CellFlags) -> (Vec<bool>, Vec<bool>) {
    let g = flags.grid;
    let mut mx = vec![false; g.n_ux()];
    let mut my = vec![false; g.n_uy()];
    for j in 0..g.ny {
        for i in 1..g.nx {
            mx[g.ux(i, j)] = couples(flags.get(i - 1, j), flags.get(i, j));
        }
    }
    for j in 1..g.ny {
        for i in 0..g.nx {
            my[g.uy(i, j)] = couples(flags.get(i, j - 1), flags.get(i, j));
        }
    }
    (mx, my)
}

fn fluid_value(p: &ScalarField, flags: &CellFlags, k: usize) -> f64 {
    if flags.flags[k] == CellFlag::Fluid {
        p.values[k]
    } else {
        0.0
    }
}

/// Masked face gradient of a cell field; outflow cells read as `p = 0`.
pub fn pressure_gradient(p: &ScalarField, flags: &CellFlags) -> StaggeredVelocity {
    let g = p.grid;
    let (mx, my) = gradient_masks(flags);
    let mut out = StaggeredVelocity::zeros(g);
    for j in 0..g.ny {
        for i in 1..g.nx {
            let f = g.ux(i, j);
            if mx[f] {
                out.ux[f] = (fluid_value(p, flags, g.cell(i, j)) - fluid_value(p, flags, g.cell(i - 1, j))) / g.dx;
            }
        }
    }
    for j in 1..g.ny {
        for i in 0..g.nx {
            let f = g.uy(i, j);
            if my[f] {
                out.uy[f] = (fluid_value(p, flags, g.cell(i, j)) - fluid_value(p, flags, g.cell(i, j - 1))) / g.dx;
            }
        }
    }
    out
}

/// Transpose of [`pressure_gradient`].
pub(crate) fn pressure_gradient_vjp(g_vel: &StaggeredVelocity, flags: &CellFlags) -> Vec<f64> {
    let g = flags.grid;
    let (mx, my) = gradient_masks(flags);
    let mut out = vec![0.0; g.n_cells()];
    let mut add = |k: usize, v: f64| {
        if flags.flags[k] == CellFlag::Fluid {
            out[k] += v;
        }
    };
    for j in 0..g.ny {
        for i in 1..g.nx {
            let f = g.ux(i, j);
            if mx[f] {
                let v = g_vel.ux[f] / g.dx;
                add(g.cell(i, j), v);
                add(g.cell(i - 1, j), -v);
            }
        }
    }
    for j in 1..g.ny {
        for i in 0..g.nx {
            let f = g.uy(i, j);
            if my[f] {
                let v = g_vel.uy[f] / g.dx;
                add(g.cell(i, j), v);
                add(g.cell(i, j - 1), -v);
            }
        }
    }
    out
}

/// `u - scale * G p`.
pub(crate) fn subtract_gradient(vel: &StaggeredVelocity, p: &ScalarField, flags: &CellFlags, scale: f64) -> StaggeredVelocity {
    let gp = pressure_gradient(p, flags);
    let mut out = vel.clone();
    for (u, d) in out.ux.iter_mut().zip(&gp.ux) {
        *u -= scale * d;
    }
    for (u, d) in out.uy.iter_mut().zip(&gp.uy) {
        *u -= scale * d;
    }
    out
}

/// Pressure for the projection: `lap p = (rho / dt) div u` on fluid cells.
pub(crate) fn solve_projection_pressure(
    vel: &StaggeredVelocity,
    flags: &CellFlags,
    params: &FluidParams,
) -> Result<(ScalarField, SolveStats)> {
    let sys = PoissonSystem::new(flags);
    if sys.n() == 0 {
        return Err(Error::config("pressure solve needs at least one fluid cell"));
    }
    let s = params.rho / params.dt;
    let rhs: Vec<f64> = divergence(vel).values.into_iter().map(|d| s * d).collect();
    let (p, stats) = solve_laplace(&sys, &rhs, params.pressure_tol, params.pressure_max_iter);
    Ok((ScalarField { grid: vel.grid, values: p }, stats))
}

/// Chorin projection: solves for pressure and removes its gradient.
pub fn project(
    vel: &StaggeredVelocity,
    flags: &CellFlags,
    params: &FluidParams,
) -> Result<(StaggeredVelocity, ScalarField, SolveStats)> {
    let (p, stats) = solve_projection_pressure(vel, flags, params)?;
    let out = subtract_gradient(vel, &p, flags, params.dt / params.rho);
    Ok((out, p, stats))
}

/// Largest `|div u|` over fluid cells.
pub fn max_fluid_divergence(vel: &StaggeredVelocity, flags: &CellFlags) -> f64 {
    divergence(vel)
        .values
        .iter()
        .zip(&flags.flags)
        .filter(|(_, f)| **f == CellFlag::Fluid)
        .fold(0.0, |m, (d, _)| m.max(d.abs()))
}
