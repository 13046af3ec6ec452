use super::interp::Lattice;
use crate::grid::{CellFlag, CellFlags, Grid, StaggeredVelocity};

/// Faces whose both neighbouring cells are fluid; everything else is pinned
/// by boundary conditions.
pub(crate) fn free_face_masks(flags: &CellFlags) -> (Vec<bool>, Vec<bool>) {
    let g = flags.grid;
    let mut mx = vec![false; g.n_ux()];
    let mut my = vec![false; g.n_uy()];
    for j in 0..g.ny {
        for i in 1..g.nx {
            mx[g.ux(i, j)] = flags.get(i - 1, j) == CellFlag::Fluid && flags.get(i, j) == CellFlag::Fluid;
        }
    }
    for j in 1..g.ny {
        for i in 0..g.nx {
            my[g.uy(i, j)] = flags.get(i, j - 1) == CellFlag::Fluid && flags.get(i, j) == CellFlag::Fluid;
        }
    }
    (mx, my)
}

/// Graph Laplacian on one face lattice (missing neighbours are skipped, which
/// keeps the operator symmetric).
fn laplacian(q: &[f64], lat: Lattice, out: &mut [f64]) {
    let (nx, ny) = (lat.nx, lat.ny);
    for j in 0..ny {
        for i in 0..nx {
            let k = j * nx + i;
            let c = q[k];
            let mut acc = 0.0;
            if i > 0 {
                acc += q[k - 1] - c;
            }
            if i + 1 < nx {
                acc += q[k + 1] - c;
            }
            if j > 0 {
                acc += q[k - nx] - c;
            }
            if j + 1 < ny {
                acc += q[k + nx] - c;
            }
            out[k] = acc;
        }
    }
}

fn diffusion_number(g: &Grid, nu: f64, dt: f64) -> f64 {
    nu * dt / (g.dx * g.dx)
}

/// Explicit viscous step `u += dt nu lap(u)` on fluid faces.
pub fn diffuse(vel: &StaggeredVelocity, flags: &CellFlags, nu: f64, dt: f64) -> StaggeredVelocity {
    let g = vel.grid;
    let c = diffusion_number(&g, nu, dt);
    if c > 0.25 {
        log::warn!("explicit diffusion number {c:.3} exceeds the stability bound 0.25");
    }
    if c == 0.0 {
        return vel.clone();
    }
    let (mx, my) = free_face_masks(flags);
    let mut out = vel.clone();
    let mut lap = vec![0.0; g.n_ux()];
    laplacian(&vel.ux, Lattice::ux(&g), &mut lap);
    for (k, u) in out.ux.iter_mut().enumerate() {
        if mx[k] {
            *u += c * lap[k];
        }
    }
    let mut lap = vec![0.0; g.n_uy()];
    laplacian(&vel.uy, Lattice::uy(&g), &mut lap);
    for (k, u) in out.uy.iter_mut().enumerate() {
        if my[k] {
            *u += c * lap[k];
        }
    }
    out
}

pub(crate) fn diffuse_vjp(g_out: &StaggeredVelocity, flags: &CellFlags, nu: f64, dt: f64) -> StaggeredVelocity {
    let g = g_out.grid;
    let c = diffusion_number(&g, nu, dt);
    if c == 0.0 {
        return g_out.clone();
    }
    let (mx, my) = free_face_masks(flags);
    let mut res = g_out.clone();
    let masked: Vec<f64> = g_out.ux.iter().zip(&mx).map(|(v, m)| if *m { *v } else { 0.0 }).collect();
    let mut lap = vec![0.0; g.n_ux()];
    laplacian(&masked, Lattice::ux(&g), &mut lap);
    for (r, l) in res.ux.iter_mut().zip(&lap) {
        *r += c * l;
    }
    let masked: Vec<f64> = g_out.uy.iter().zip(&my).map(|(v, m)| if *m { *v } else { 0.0 }).collect();
    let mut lap = vec![0.0; g.n_uy()];
    laplacian(&masked, Lattice::uy(&g), &mut lap);
    for (r, l) in res.uy.iter_mut().zip(&lap) {
        *r += c * l;
    }
    res
}
