//! Velocity boundary conditions at obstacle, inflow, wall and outflow cells.

use crate::grid::{CellFlag, CellFlags, Grid, StaggeredVelocity};
use crate::rigid_body::BodyState;

#[derive(Clone, Copy, Debug, PartialEq)]
enum FaceRule {
    Free,
    Rigid,
    Inflow,
    Zero,
    /// Copy the value of the face one column to the left.
    CopyLeft,
}

fn rule(a: CellFlag, b: CellFlag) -> FaceRule {
    use CellFlag::*;
    let any = |f| a == f || b == f;
    if any(Obstacle) {
        FaceRule::Rigid
    } else if any(Inflow) {
        FaceRule::Inflow
    } else if any(Wall) {
        FaceRule::Zero
    } else if any(Outflow) {
        FaceRule::CopyLeft
    } else {
        FaceRule::Free
    }
}

/// The two cells next to each face; neighbours outside the grid take the
/// flag of the ring cell they border.
fn face_rules(flags: &CellFlags) -> (Vec<FaceRule>, Vec<FaceRule>) {
    let g = flags.grid;
    let mut rx = Vec::with_capacity(g.n_ux());
    for j in 0..g.ny {
        for i in 0..=g.nx {
            let l = flags.get(i.saturating_sub(1), j);
            let r = flags.get(i.min(g.nx - 1), j);
            rx.push(rule(l, r));
        }
    }
    let mut ry = Vec::with_capacity(g.n_uy());
    for j in 0..=g.ny {
        for i in 0..g.nx {
            let b = flags.get(i, j.saturating_sub(1));
            let t = flags.get(i, j.min(g.ny - 1));
            ry.push(rule(b, t));
        }
    }
    (rx, ry)
}

fn rigid_velocity(body: &BodyState, p: [f64; 2]) -> [f64; 2] {
    let rx = p[0] - body.position[0];
    let ry = p[1] - body.position[1];
    [body.velocity[0] - body.omega * ry, body.velocity[1] + body.omega * rx]
}

/// Imposes face values; rows are swept left to right so outflow copies see
/// already-updated upstream faces.
pub fn apply_boundary_conditions(
    vel: &StaggeredVelocity,
    flags: &CellFlags,
    body: &BodyState,
    inflow_speed: f64,
) -> StaggeredVelocity {
    let g = vel.grid;
    let (rx, ry) = face_rules(flags);
    let mut out = vel.clone();
    for j in 0..g.ny {
        for i in 0..=g.nx {
            let f = g.ux(i, j);
            out.ux[f] = match rx[f] {
                FaceRule::Free => continue,
                FaceRule::Rigid => rigid_velocity(body, g.ux_pos(i, j))[0],
                FaceRule::Inflow => inflow_speed,
                FaceRule::Zero => 0.0,
                FaceRule::CopyLeft if i > 0 => out.ux[f - 1],
                FaceRule::CopyLeft => continue,
            };
        }
    }
    for j in 0..=g.ny {
        for i in 0..g.nx {
            let f = g.uy(i, j);
            out.uy[f] = match ry[f] {
                FaceRule::Free => continue,
                FaceRule::Rigid => rigid_velocity(body, g.uy_pos(i, j))[1],
                FaceRule::Inflow | FaceRule::Zero => 0.0,
                FaceRule::CopyLeft if i > 0 => out.uy[f - 1],
                FaceRule::CopyLeft => continue,
            };
        }
    }
    out
}

/// Cotangents of [`apply_boundary_conditions`] with respect to the incoming
/// velocity and the body tensor `[x, y, alpha, vx, vy, omega]`.
pub(crate) fn boundary_vjp(g_out: &StaggeredVelocity, flags: &CellFlags, body: &BodyState) -> (StaggeredVelocity, [f64; 6]) {
    let g: Grid = g_out.grid;
    let (rx, ry) = face_rules(flags);
    let mut gv = g_out.clone();
    let mut gb = [0.0; 6];
    for j in (0..=g.ny).rev() {
        for i in (0..g.nx).rev() {
            let f = g.uy(i, j);
            let gf = gv.uy[f];
            match ry[f] {
                FaceRule::Free => continue,
                FaceRule::Rigid => {
                    let p = g.uy_pos(i, j);
                    gb[4] += gf;
                    gb[5] += gf * (p[0] - body.position[0]);
                    gb[0] -= gf * body.omega;
                }
                FaceRule::CopyLeft if i > 0 => gv.uy[f - 1] += gf,
                FaceRule::CopyLeft => continue,
                _ => {}
            }
            gv.uy[f] = 0.0;
        }
    }
    for j in (0..g.ny).rev() {
        for i in (0..=g.nx).rev() {
            let f = g.ux(i, j);
            let gf = gv.ux[f];
            match rx[f] {
                FaceRule::Free => continue,
                FaceRule::Rigid => {
                    let p = g.ux_pos(i, j);
                    gb[3] += gf;
                    gb[5] -= gf * (p[1] - body.position[1]);
                    gb[1] += gf * body.omega;
                }
                FaceRule::CopyLeft if i > 0 => gv.ux[f - 1] += gf,
                FaceRule::CopyLeft => continue,
                _ => {}
            }
            gv.ux[f] = 0.0;
        }
    }
    (gv, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DomainBoundary;

    fn with_block(g: Grid) -> CellFlags {
        let mut f = CellFlags::empty(g, DomainBoundary::Channel);
        for j in 4..7 {
            for i in 4..7 {
                f.flags[g.cell(i, j)] = CellFlag::Obstacle;
            }
        }
        f
    }

    fn body(v: [f64; 2], omega: f64) -> BodyState {
        BodyState {
            position: [5.5, 5.5],
            alpha: 0.0,
            velocity: v,
            omega,
        }
    }

    #[test]
    fn stationary_body_zeroes_obstacle_faces() {
        let g = Grid::square(12, 12.0).unwrap();
        let f = with_block(g);
        let v = StaggeredVelocity::uniform(g, 0.3, -0.2);
        let out = apply_boundary_conditions(&v, &f, &body([0.0, 0.0], 0.0), 1.0);
        assert_eq!(out.ux[g.ux(5, 5)], 0.0);
        assert_eq!(out.ux[g.ux(4, 5)], 0.0);
        assert_eq!(out.uy[g.uy(5, 7)], 0.0);
        assert_eq!(out.ux[g.ux(2, 5)], 0.3);
    }

    #[test]
    fn translating_body_sets_face_velocity() {
        let g = Grid::square(12, 12.0).unwrap();
        let f = with_block(g);
        let out = apply_boundary_conditions(&StaggeredVelocity::zeros(g), &f, &body([1.0, 0.0], 0.0), 0.0);
        for j in 4..7 {
            for i in 4..8 {
                assert_eq!(out.ux[g.ux(i, j)], 1.0);
            }
        }
    }

    #[test]
    fn rotation_gives_cross_product_velocity() {
        let b = BodyState {
            position: [0.0, 0.0],
            alpha: 0.0,
            velocity: [0.0, 0.0],
            omega: 0.1,
        };
        let v = rigid_velocity(&b, [0.0, 10.0]);
        assert!((v[0] + 1.0).abs() < 1e-15 && v[1].abs() < 1e-15);
    }

    #[test]
    fn channel_ring_values() {
        let g = Grid::square(8, 8.0).unwrap();
        let f = CellFlags::empty(g, DomainBoundary::Channel);
        let v = StaggeredVelocity::uniform(g, 0.5, 0.5);
        let out = apply_boundary_conditions(&v, &f, &body([0.0, 0.0], 0.0), 2.0);
        assert_eq!(out.ux[g.ux(0, 3)], 2.0);
        assert_eq!(out.ux[g.ux(1, 3)], 2.0);
        assert_eq!(out.uy[g.uy(3, 1)], 0.0);
        assert_eq!(out.ux[g.ux(8, 3)], out.ux[g.ux(6, 3)]);
    }

    #[test]
    fn vjp_matches_dot_product_identity() {
        use rand::{Rng, SeedableRng};
        let g = Grid::square(12, 12.0).unwrap();
        let f = with_block(g);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut rnd = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let v = StaggeredVelocity { grid: g, ux: rnd(g.n_ux()), uy: rnd(g.n_uy()) };
        let w = StaggeredVelocity { grid: g, ux: rnd(g.n_ux()), uy: rnd(g.n_uy()) };
        let b = body([0.3, -0.4], 0.05);
        let dot = |a: &StaggeredVelocity, b: &StaggeredVelocity| -> f64 {
            a.ux.iter().zip(&b.ux).chain(a.uy.iter().zip(&b.uy)).map(|(x, y)| x * y).sum()
        };
        // linear in the velocity input once the body contribution is removed
        let base = apply_boundary_conditions(&StaggeredVelocity::zeros(g), &f, &b, 1.0);
        let mut out = apply_boundary_conditions(&v, &f, &b, 1.0);
        for (o, z) in out.ux.iter_mut().zip(&base.ux) {
            *o -= z;
        }
        for (o, z) in out.uy.iter_mut().zip(&base.uy) {
            *o -= z;
        }
        let (gv, _) = boundary_vjp(&w, &f, &b);
        assert!((dot(&out, &w) - dot(&v, &gv)).abs() < 1e-12);
    }
}
