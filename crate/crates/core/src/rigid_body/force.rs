use super::{cross, SurfaceSample};
use crate::grid::{CellFlag, CellFlags, ScalarField};

/// Pressure at a point as a linear combination of fluid-cell values, with the
/// spatial gradient of that reconstruction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PressureStencil {
    pub cells: Vec<usize>,
    pub w: Vec<f64>,
    pub gw: Vec<[f64; 2]>,
}

impl PressureStencil {
    pub fn value(&self, p: &[f64]) -> f64 {
        self.cells.iter().zip(&self.w).map(|(&k, w)| w * p[k]).sum()
    }

    pub fn grad(&self, p: &[f64]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for (&k, gw) in self.cells.iter().zip(&self.gw) {
            g[0] += gw[0] * p[k];
            g[1] += gw[1] * p[k];
        }
        g
    }
}

fn invert3(m: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1)],
        [-c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1)],
        [c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1)],
    ];
    let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    if det.abs() <= 1e-9 * scale.powi(3) {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (col, v) in row.iter_mut().enumerate() {
            *v = cof[col][r] / det;
        }
    }
    Some(inv)
}

/// Reconstruction stencil at `pos`: bilinear when the four surrounding cell
/// centers are fluid, otherwise a least-squares plane through the fluid
/// cells of the surrounding 4x4 block, falling back to their mean or to the
/// nearest fluid cell.
pub fn pressure_at(flags: &CellFlags, pos: [f64; 2]) -> PressureStencil {
    let g = flags.grid;
    let fx = pos[0] / g.dx - 0.5;
    let fy = pos[1] / g.dx - 0.5;
    let i0 = (fx.floor() as isize).clamp(0, g.nx as isize - 2);
    let j0 = (fy.floor() as isize).clamp(0, g.ny as isize - 2);
    let fluid = |i: isize, j: isize| flags.get_or_wall(i, j) == CellFlag::Fluid;

    if fluid(i0, j0) && fluid(i0 + 1, j0) && fluid(i0, j0 + 1) && fluid(i0 + 1, j0 + 1) {
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        let (i, j) = (i0 as usize, j0 as usize);
        let inv = 1.0 / g.dx;
        return PressureStencil {
            cells: vec![g.cell(i, j), g.cell(i + 1, j), g.cell(i, j + 1), g.cell(i + 1, j + 1)],
            w: vec![(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty],
            gw: vec![
                [-(1.0 - ty) * inv, -(1.0 - tx) * inv],
                [(1.0 - ty) * inv, -tx * inv],
                [-ty * inv, (1.0 - tx) * inv],
                [ty * inv, tx * inv],
            ],
        };
    }

    // offsets in units of dx relative to the query point
    let mut pts = Vec::new();
    for j in j0 - 1..=j0 + 2 {
        for i in i0 - 1..=i0 + 2 {
            if fluid(i, j) {
                let c = g.cell_center(i as usize, j as usize);
                pts.push((g.cell(i as usize, j as usize), (c[0] - pos[0]) / g.dx, (c[1] - pos[1]) / g.dx));
            }
        }
    }
    if pts.len() >= 3 {
        let mut m = [[0.0; 3]; 3];
        for &(_, x, y) in &pts {
            let phi = [1.0, x, y];
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] += phi[r] * phi[c];
                }
            }
        }
        if let Some(inv) = invert3(m) {
            let mut st = PressureStencil::default();
            for &(k, x, y) in &pts {
                let phi = [1.0, x, y];
                let coef = |r: usize| inv[r][0] * phi[0] + inv[r][1] * phi[1] + inv[r][2] * phi[2];
                st.cells.push(k);
                st.w.push(coef(0));
                st.gw.push([coef(1) / g.dx, coef(2) / g.dx]);
            }
            return st;
        }
    }
    if !pts.is_empty() {
        let n = pts.len() as f64;
        return PressureStencil {
            cells: pts.iter().map(|p| p.0).collect(),
            w: vec![1.0 / n; pts.len()],
            gw: vec![[0.0; 2]; pts.len()],
        };
    }
    // nearest fluid cell, searching rings of growing radius
    let ci = (fx.round() as isize).clamp(0, g.nx as isize - 1);
    let cj = (fy.round() as isize).clamp(0, g.ny as isize - 1);
    for rad in 1..g.nx.max(g.ny) as isize {
        let mut best: Option<(f64, usize)> = None;
        for j in cj - rad..=cj + rad {
            for i in ci - rad..=ci + rad {
                if (i - ci).abs().max((j - cj).abs()) != rad || !fluid(i, j) {
                    continue;
                }
                let c = g.cell_center(i as usize, j as usize);
                let d = (c[0] - pos[0]).hypot(c[1] - pos[1]);
                if best.map_or(true, |b| d < b.0) {
                    best = Some((d, g.cell(i as usize, j as usize)));
                }
            }
        }
        if let Some((_, k)) = best {
            return PressureStencil { cells: vec![k], w: vec![1.0], gw: vec![[0.0; 2]] };
        }
    }
    PressureStencil::default()
}

/// `F = -sum p n ds`, `T = -sum (r x n) p ds` over the surface samples.
pub fn fluid_force_torque(pressure: &ScalarField, flags: &CellFlags, samples: &[SurfaceSample]) -> ([f64; 2], f64) {
    let mut f = [0.0; 2];
    let mut t = 0.0;
    for s in samples {
        let p = pressure_at(flags, s.position).value(&pressure.values);
        f[0] -= p * s.normal[0] * s.ds;
        f[1] -= p * s.normal[1] * s.ds;
        t -= cross(s.r, s.normal) * p * s.ds;
    }
    (f, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DomainBoundary, Grid};
    use crate::rigid_body::{rasterize, BodyShape, BodyState};
    use std::f64::consts::PI;

    fn setup(shape: BodyShape, pos: [f64; 2], alpha: f64) -> (CellFlags, Vec<SurfaceSample>) {
        let base = CellFlags::empty(Grid::square(100, 100.0).unwrap(), DomainBoundary::Closed);
        rasterize(&shape, &BodyState::at_rest(pos, alpha), &base).unwrap()
    }

    #[test]
    fn constant_pressure_gives_no_force() {
        for (shape, alpha) in [
            (BodyShape::Cylinder { radius: 5.0 }, 0.0),
            (BodyShape::Box { width: 20.0, height: 6.0 }, 0.37),
        ] {
            let (f, s) = setup(shape, [40.2, 41.7], alpha);
            let p = ScalarField { grid: f.grid, values: vec![3.5; f.grid.n_cells()] };
            let (force, torque) = fluid_force_torque(&p, &f, &s);
            let tol = 1e-13 * s.len() as f64 * 3.5 * 10.0;
            assert!(force[0].abs() < tol && force[1].abs() < tol && torque.abs() < tol * 10.0, "{force:?} {torque}");
        }
    }

    #[test]
    fn linear_pressure_on_box() {
        let (f, s) = setup(BodyShape::Box { width: 20.0, height: 6.0 }, [40.0, 40.0], 0.0);
        let p = ScalarField::from_fn(f.grid, |_, y| y);
        let (force, torque) = fluid_force_torque(&p, &f, &s);
        assert!(force[0].abs() < 1e-9 && (force[1] + 120.0).abs() < 1e-9, "{force:?}");
        assert!(torque.abs() < 1e-8);
    }

    #[test]
    fn linear_pressure_on_cylinder() {
        let (f, s) = setup(BodyShape::Cylinder { radius: 5.0 }, [40.0, 40.0], 0.0);
        let p = ScalarField::from_fn(f.grid, |x, _| x);
        let (force, _) = fluid_force_torque(&p, &f, &s);
        assert!((force[0] + 25.0 * PI).abs() < 0.02 * 25.0 * PI && force[1].abs() < 1e-9, "{force:?}");
    }

    #[test]
    fn linear_fields_are_reconstructed_exactly() {
        let (f, s) = setup(BodyShape::Box { width: 20.0, height: 6.0 }, [40.3, 39.6], 0.5);
        let p = ScalarField::from_fn(f.grid, |x, y| 2.0 * x - 0.5 * y + 1.0);
        for smp in &s {
            let st = pressure_at(&f, smp.position);
            let v = st.value(&p.values);
            let exact = 2.0 * smp.position[0] - 0.5 * smp.position[1] + 1.0;
            assert!((v - exact).abs() < 1e-9);
            let g = st.grad(&p.values);
            assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] + 0.5).abs() < 1e-9);
        }
    }
}
