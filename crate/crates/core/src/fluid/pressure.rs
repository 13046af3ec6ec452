//! Conjugate-gradient Poisson solve over the fluid cells.
//!
//! Neighbouring fluid cells couple through the 5-point stencil; OUTFLOW
//! neighbours are Dirichlet `p = 0`; OBSTACLE, WALL and INFLOW neighbours are
//! Neumann (their faces carry prescribed velocities). Connected fluid regions
//! without a Dirichlet neighbour have their gauge fixed to zero mean.

use crate::error::{Error, Result};
use crate::grid::{CellFlag, CellFlags, Grid, ScalarField};

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Final `max|r| / max|b|`.
    pub residual: f64,
    pub converged: bool,
}

/// The SPD (or semi-definite) matrix `-dx^2 lap` restricted to fluid cells.
pub(crate) struct PoissonSystem {
    grid: Grid,
    cells: Vec<usize>,
    nbrs: Vec<[u32; 4]>,
    diag: Vec<f64>,
    component: Vec<u32>,
    /// Sizes of the components that need a zero-mean gauge; anchored ones are 0.
    free_sizes: Vec<usize>,
}

impl PoissonSystem {
    pub fn new(flags: &CellFlags) -> Self {
        let g = flags.grid;
        let mut compact = vec![NONE; g.n_cells()];
        let mut cells = Vec::new();
        for (k, f) in flags.flags.iter().enumerate() {
            if *f == CellFlag::Fluid {
                compact[k] = cells.len() as u32;
                cells.push(k);
            }
        }
        let mut nbrs = Vec::with_capacity(cells.len());
        let mut diag = Vec::with_capacity(cells.len());
        let mut touches_dirichlet = vec![false; cells.len()];
        for (c, &k) in cells.iter().enumerate() {
            let (i, j) = ((k % g.nx) as isize, (k / g.nx) as isize);
            let mut nb = [NONE; 4];
            let mut d = 0.0;
            for (slot, (di, dj)) in [(-1, 0), (1, 0), (0, -1), (0, 1)].into_iter().enumerate() {
                match flags.get_or_wall(i + di, j + dj) {
                    CellFlag::Fluid => {
                        nb[slot] = compact[g.cell((i + di) as usize, (j + dj) as usize)];
                        d += 1.0;
                    }
                    CellFlag::Outflow => {
                        d += 1.0;
                        touches_dirichlet[c] = true;
                    }
                    _ => {}
                }
            }
            nbrs.push(nb);
            diag.push(d);
        }

        // connected components by flood fill
        let mut component = vec![NONE; cells.len()];
        let mut anchored = Vec::new();
        let mut sizes = Vec::new();
        let mut stack = Vec::new();
        for start in 0..cells.len() {
            if component[start] != NONE {
                continue;
            }
            let id = anchored.len() as u32;
            let (mut anchor, mut size) = (false, 0);
            component[start] = id;
            stack.push(start);
            while let Some(c) = stack.pop() {
                size += 1;
                anchor |= touches_dirichlet[c];
                for &n in &nbrs[c] {
                    if n != NONE && component[n as usize] == NONE {
                        component[n as usize] = id;
                        stack.push(n as usize);
                    }
                }
            }
            anchored.push(anchor);
            sizes.push(size);
        }
        let free_sizes = sizes.iter().zip(&anchored).map(|(&s, &a)| if a { 0 } else { s }).collect();
        Self {
            grid: g,
            cells,
            nbrs,
            diag,
            component,
            free_sizes,
        }
    }

    pub fn n(&self) -> usize {
        self.cells.len()
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (c, (nb, d)) in self.nbrs.iter().zip(&self.diag).enumerate() {
            let mut acc = d * x[c];
            for &n in nb {
                if n != NONE {
                    acc -= x[n as usize];
                }
            }
            out[c] = acc;
        }
    }

    /// Removes the null-space component of a compact vector.
    pub fn project_nullspace(&self, v: &mut [f64]) {
        if self.free_sizes.iter().all(|&s| s == 0) {
            return;
        }
        let mut sums = vec![0.0; self.free_sizes.len()];
        for (x, &c) in v.iter().zip(&self.component) {
            sums[c as usize] += x;
        }
        for (x, &c) in v.iter_mut().zip(&self.component) {
            let s = self.free_sizes[c as usize];
            if s > 0 {
                *x -= sums[c as usize] / s as f64;
            }
        }
    }

    pub fn gather(&self, field: &[f64]) -> Vec<f64> {
        self.cells.iter().map(|&k| field[k]).collect()
    }

    pub fn scatter(&self, compact: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.n_cells()];
        for (&k, v) in self.cells.iter().zip(compact) {
            out[k] = *v;
        }
        out
    }

    /// Solves `A x = b` (after projecting `b` onto the range of `A`).
    pub fn solve(&self, b: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, SolveStats) {
        let n = self.n();
        let mut b = b.to_vec();
        self.project_nullspace(&mut b);
        let b_max = max_abs(&b);
        let mut x = vec![0.0; n];
        if b_max == 0.0 {
            return (
                x,
                SolveStats {
                    iterations: 0,
                    residual: 0.0,
                    converged: true,
                },
            );
        }
        let mut r = b.clone();
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let mut rr = dot(&r, &r);
        let mut iterations = 0;
        let mut rel = 1.0;
        while iterations < max_iter {
            self.apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rr / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            iterations += 1;
            rel = max_abs(&r) / b_max;
            if rel <= tol {
                break;
            }
            let rr_new = dot(&r, &r);
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
        }
        self.project_nullspace(&mut x);
        let converged = rel <= tol;
        if !converged {
            log::warn!("pressure solve stopped after {iterations} iterations, relative residual {rel:.3e}");
        }
        (
            x,
            SolveStats {
                iterations,
                residual: rel,
                converged,
            },
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Solves `lap p = rhs` on the fluid cells of `flags`; non-fluid cells of the
/// result are zero.
pub fn pressure_solve(
    rhs: &ScalarField,
    flags: &CellFlags,
    tol: f64,
    max_iter: usize,
) -> Result<(ScalarField, SolveStats)> {
    let sys = PoissonSystem::new(flags);
    if sys.n() == 0 {
        return Err(Error::config("pressure solve needs at least one fluid cell"));
    }
    let (p, stats) = solve_laplace(&sys, &rhs.values, tol, max_iter);
    Ok((
        ScalarField {
            grid: rhs.grid,
            values: p,
        },
        stats,
    ))
}

/// `lap p = rhs` in full-grid layout, via `A p = -dx^2 rhs`.
pub(crate) fn solve_laplace(sys: &PoissonSystem, rhs: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, SolveStats) {
    let dx2 = sys.grid.dx * sys.grid.dx;
    let b: Vec<f64> = sys.gather(rhs).into_iter().map(|v| -dx2 * v).collect();
    let (x, stats) = sys.solve(&b, tol, max_iter);
    (sys.scatter(&x), stats)
}

/// The masked 5-point Laplacian the solver inverts, in full-grid layout.
pub fn masked_laplacian(p: &ScalarField, flags: &CellFlags) -> ScalarField {
    let sys = PoissonSystem::new(flags);
    let x = sys.gather(&p.values);
    let mut ax = vec![0.0; x.len()];
    sys.apply(&x, &mut ax);
    let dx2 = p.grid.dx * p.grid.dx;
    let lap: Vec<f64> = ax.into_iter().map(|v| -v / dx2).collect();
    ScalarField {
        grid: p.grid,
        values: sys.scatter(&lap),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DomainBoundary;

    /// Dense Gaussian elimination with partial pivoting.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        x
    }

    #[test]
    fn zero_rhs_gives_zero_pressure() {
        let g = Grid::square(10, 10.0).unwrap();
        let f = CellFlags::empty(g, DomainBoundary::Closed);
        let (p, st) = pressure_solve(&ScalarField::zeros(g), &f, 1e-6, 100).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
        assert!(st.converged);
    }

    #[test]
    fn point_source_matches_dense_solve() {
        let g = Grid::square(16, 16.0).unwrap();
        let flags = CellFlags::empty(g, DomainBoundary::Closed);
        let mut rhs = ScalarField::zeros(g);
        rhs.values[g.cell(7, 9)] = 1.0;
        let (p, st) = pressure_solve(&rhs, &flags, 1e-6, 256).unwrap();
        assert!(st.converged && st.iterations <= 256, "{st:?}");

        // oracle: A + 11^T/n is nonsingular and shares the zero-mean solution
        let sys = PoissonSystem::new(&flags);
        let n = sys.n();
        let mut a = vec![vec![1.0 / n as f64; n]; n];
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for c in 0..n {
            e[c] = 1.0;
            sys.apply(&e, &mut col);
            for r in 0..n {
                a[r][c] += col[r];
            }
            e[c] = 0.0;
        }
        let mut b: Vec<f64> = sys.gather(&rhs.values).iter().map(|v| -v * g.dx * g.dx).collect();
        sys.project_nullspace(&mut b);
        let exact = dense_solve(a, b);
        let got = sys.gather(&p.values);
        let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in got.iter().zip(&exact) {
            assert!((x - y).abs() < 1e-4 * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn solution_satisfies_stencil() {
        let g = Grid::square(16, 16.0).unwrap();
        let flags = CellFlags::empty(g, DomainBoundary::Channel);
        let rhs = ScalarField::from_fn(g, |x, y| (0.4 * x).sin() + (0.3 * y).cos());
        let tol = 1e-8;
        let (p, st) = pressure_solve(&rhs, &flags, tol, 2000).unwrap();
        assert!(st.converged);
        let lap = masked_laplacian(&p, &flags);
        let rmax = (0..g.n_cells()).filter(|&k| flags.flags[k] == CellFlag::Fluid).fold(0.0f64, |m, k| m.max(rhs.values[k].abs()));
        for k in 0..g.n_cells() {
            if flags.flags[k] == CellFlag::Fluid {
                assert!((lap.values[k] - rhs.values[k]).abs() <= 10.0 * tol * rmax);
            }
        }
    }

    #[test]
    fn closed_domain_gauge_is_zero_mean() {
        let g = Grid::square(12, 12.0).unwrap();
        let flags = CellFlags::empty(g, DomainBoundary::Closed);
        let rhs = ScalarField::from_fn(g, |x, y| x - y);
        let (p, _) = pressure_solve(&rhs, &flags, 1e-10, 1000).unwrap();
        let sys = PoissonSystem::new(&flags);
        let mean: f64 = sys.gather(&p.values).iter().sum::<f64>() / sys.n() as f64;
        assert!(mean.abs() < 1e-12);
    }
}
