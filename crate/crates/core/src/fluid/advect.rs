//! Second-order (MacCormack) semi-Lagrangian transport with a min/max limiter.

use super::interp::{sample_velocity, Lattice, Stencil};
use crate::grid::{ScalarField, StaggeredVelocity};

/// Largest Courant number `max|u| dt / dx` of a velocity field.
pub fn cfl_number(vel: &StaggeredVelocity, dt: f64) -> f64 {
    vel.max_abs() * dt.abs() / vel.grid.dx
}

fn warn_cfl(vel: &StaggeredVelocity, dt: f64) {
    let c = cfl_number(vel, dt);
    if c > 1.0 {
        log::warn!("advection CFL number {c:.3} exceeds 1");
    }
}

pub fn advect_scalar(q: &ScalarField, vel: &StaggeredVelocity, dt: f64) -> ScalarField {
    warn_cfl(vel, dt);
    ScalarField {
        grid: q.grid,
        values: maccormack(&q.values, Lattice::cells(&q.grid), vel, dt),
    }
}

/// Transports both velocity components of `field` along `vel`.
pub fn advect_velocity(field: &StaggeredVelocity, vel: &StaggeredVelocity, dt: f64) -> StaggeredVelocity {
    warn_cfl(vel, dt);
    let g = field.grid;
    StaggeredVelocity {
        grid: g,
        ux: maccormack(&field.ux, Lattice::ux(&g), vel, dt),
        uy: maccormack(&field.uy, Lattice::uy(&g), vel, dt),
    }
}

struct Trace {
    sx: Stencil,
    sy: Stencil,
    back: Stencil,
    ahead: Stencil,
}

fn traces(lat: Lattice, vel: &StaggeredVelocity, dt: f64) -> Vec<Trace> {
    (0..lat.len())
        .map(|k| {
            let x = lat.point(k);
            let s = sample_velocity(vel, x);
            let back = lat.stencil([x[0] - dt * s.v[0], x[1] - dt * s.v[1]]);
            let ahead = lat.stencil([x[0] + dt * s.v[0], x[1] + dt * s.v[1]]);
            Trace { sx: s.sx, sy: s.sy, back, ahead }
        })
        .collect()
}

pub(crate) fn maccormack(q: &[f64], lat: Lattice, vel: &StaggeredVelocity, dt: f64) -> Vec<f64> {
    let tr = traces(lat, vel, dt);
    let fwd: Vec<f64> = tr.iter().map(|t| t.back.value(q)).collect();
    tr.iter()
        .enumerate()
        .map(|(k, t)| {
            let bwd = t.ahead.value(&fwd);
            let mc = fwd[k] + 0.5 * (q[k] - bwd);
            let (lo, _, hi, _) = t.back.bounds(q);
            if mc < lo {
                lo
            } else if mc > hi {
                hi
            } else {
                mc
            }
        })
        .collect()
}

/// Cotangents of [`maccormack`] with respect to the transported quantity and
/// both velocity components.
pub(crate) fn maccormack_vjp(
    q: &[f64],
    lat: Lattice,
    vel: &StaggeredVelocity,
    dt: f64,
    g_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let tr = traces(lat, vel, dt);
    let fwd: Vec<f64> = tr.iter().map(|t| t.back.value(q)).collect();
    let n = lat.len();
    let mut g_q = vec![0.0; n];
    let mut g_fwd = vec![0.0; n];
    let mut g_vel = vec![[0.0f64; 2]; n];

    for (k, t) in tr.iter().enumerate() {
        let g = g_out[k];
        if g == 0.0 {
            continue;
        }
        let bwd = t.ahead.value(&fwd);
        let mc = fwd[k] + 0.5 * (q[k] - bwd);
        let (lo, lo_i, hi, hi_i) = t.back.bounds(q);
        if mc < lo {
            g_q[lo_i] += g;
        } else if mc > hi {
            g_q[hi_i] += g;
        } else {
            g_fwd[k] += g;
            g_q[k] += 0.5 * g;
            let g_bwd = -0.5 * g;
            t.ahead.scatter(g_bwd, &mut g_fwd);
            let d = t.ahead.grad(&fwd);
            g_vel[k][0] += dt * g_bwd * d[0];
            g_vel[k][1] += dt * g_bwd * d[1];
        }
    }
    for (k, t) in tr.iter().enumerate() {
        let g = g_fwd[k];
        if g == 0.0 {
            continue;
        }
        t.back.scatter(g, &mut g_q);
        let d = t.back.grad(q);
        g_vel[k][0] -= dt * g * d[0];
        g_vel[k][1] -= dt * g * d[1];
    }
    let mut g_ux = vec![0.0; vel.ux.len()];
    let mut g_uy = vec![0.0; vel.uy.len()];
    for (t, gv) in tr.iter().zip(&g_vel) {
        if gv[0] != 0.0 {
            t.sx.scatter(gv[0], &mut g_ux);
        }
        if gv[1] != 0.0 {
            t.sy.scatter(gv[1], &mut g_uy);
        }
    }
    (g_q, g_ux, g_uy)
}
