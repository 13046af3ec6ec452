use crate::grid::{ScalarField, StaggeredVelocity};

/// Boussinesq forcing: interior `u_y` faces gain `coeff dt` times the marker
/// density averaged onto the face.
pub fn apply_buoyancy(vel: &StaggeredVelocity, marker: &ScalarField, coeff: f64, dt: f64) -> StaggeredVelocity {
    let g = vel.grid;
    let k = coeff * dt;
    let mut out = vel.clone();
    if k == 0.0 {
        return out;
    }
    for j in 1..g.ny {
        for i in 0..g.nx {
            let m = 0.5 * (marker.at(i, j - 1) + marker.at(i, j));
            out.uy[g.uy(i, j)] += k * m;
        }
    }
    out
}

/// Cotangent with respect to the marker (the velocity cotangent passes through).
pub(crate) fn buoyancy_vjp_marker(g_uy: &[f64], grid: crate::grid::Grid, coeff: f64, dt: f64) -> Vec<f64> {
    let k = 0.5 * coeff * dt;
    let mut gm = vec![0.0; grid.n_cells()];
    for j in 1..grid.ny {
        for i in 0..grid.nx {
            let gf = k * g_uy[grid.uy(i, j)];
            gm[grid.cell(i, j - 1)] += gf;
            gm[grid.cell(i, j)] += gf;
        }
    }
    gm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn no_marker_no_force() {
        let g = Grid::square(8, 8.0).unwrap();
        let v = StaggeredVelocity::from_fn(g, |x, _| [x, 0.5]);
        assert_eq!(apply_buoyancy(&v, &ScalarField::zeros(g), 0.5, 0.1), v);
    }

    #[test]
    fn full_marker_lifts_interior_faces() {
        let g = Grid::square(8, 8.0).unwrap();
        let v = StaggeredVelocity::zeros(g);
        let m = ScalarField { grid: g, values: vec![1.0; g.n_cells()] };
        let out = apply_buoyancy(&v, &m, 0.5, 0.1);
        for j in 0..=g.ny {
            for i in 0..g.nx {
                let expect = if j == 0 || j == g.ny { 0.0 } else { 0.05 };
                assert!((out.uy[g.uy(i, j)] - expect).abs() < 1e-15);
            }
        }
        assert!(out.ux.iter().all(|&u| u == 0.0));
    }
}
