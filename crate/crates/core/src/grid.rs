//! Square MAC grid layout shared by the fluid and body modules.
//!
//! Cell `(i, j)` has its center at `((i + 0.5) dx, (j + 0.5) dx)`, `y` pointing
//! up. `u_x` lives on x-faces (`ny` rows of `nx + 1`), `u_y` on y-faces
//! (`ny + 1` rows of `nx`). All arrays are row-major with `j` as the row.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, dx: f64) -> Result<Self> {
        if nx < 3 || ny < 3 || !(dx > 0.0) {
            return Err(Error::config(format!(
                "grid needs at least 3x3 cells and dx > 0, got {nx}x{ny}, dx={dx}"
            )));
        }
        Ok(Self { nx, ny, dx })
    }

    /// `n x n` cells covering a square of side `size`.
    pub fn square(n: usize, size: f64) -> Result<Self> {
        Self::new(n, n, size / n as f64)
    }

    pub fn width(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    pub fn height(&self) -> f64 {
        self.ny as f64 * self.dx
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_ux(&self) -> usize {
        self.ny * (self.nx + 1)
    }

    pub fn n_uy(&self) -> usize {
        (self.ny + 1) * self.nx
    }

    pub fn n_faces(&self) -> usize {
        self.n_ux() + self.n_uy()
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn ux(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    #[inline]
    pub fn uy(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [(i as f64 + 0.5) * self.dx, (j as f64 + 0.5) * self.dx]
    }

    pub fn ux_pos(&self, i: usize, j: usize) -> [f64; 2] {
        [i as f64 * self.dx, (j as f64 + 0.5) * self.dx]
    }

    pub fn uy_pos(&self, i: usize, j: usize) -> [f64; 2] {
        [(i as f64 + 0.5) * self.dx, j as f64 * self.dx]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum CellFlag {
    Fluid = 0,
    Obstacle = 1,
    Inflow = 2,
    Outflow = 3,
    Wall = 4,
}

impl CellFlag {
    pub fn code(self) -> f64 {
        self as u8 as f64
    }

    pub fn from_code(c: f64) -> Result<Self> {
        Ok(match c as i64 {
            0 => CellFlag::Fluid,
            1 => CellFlag::Obstacle,
            2 => CellFlag::Inflow,
            3 => CellFlag::Outflow,
            4 => CellFlag::Wall,
            _ => return Err(Error::format("cell flags", format!("unknown flag code {c}"))),
        })
    }
}

/// What surrounds the fluid on each side of the domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainBoundary {
    /// Walls on all four sides.
    Closed,
    /// Inflow on the left, outflow on the right, walls top and bottom.
    Channel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellFlags {
    pub grid: Grid,
    pub flags: Vec<CellFlag>,
}

impl CellFlags {
    /// All-fluid interior surrounded by a one-cell ring.
    pub fn empty(grid: Grid, boundary: DomainBoundary) -> Self {
        let mut flags = vec![CellFlag::Fluid; grid.n_cells()];
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let top_bottom = j == 0 || j == grid.ny - 1;
                let left = i == 0;
                let right = i == grid.nx - 1;
                let f = if top_bottom {
                    CellFlag::Wall
                } else if left {
                    match boundary {
                        DomainBoundary::Closed => CellFlag::Wall,
                        DomainBoundary::Channel => CellFlag::Inflow,
                    }
                } else if right {
                    match boundary {
                        DomainBoundary::Closed => CellFlag::Wall,
                        DomainBoundary::Channel => CellFlag::Outflow,
                    }
                } else {
                    continue;
                };
                flags[grid.cell(i, j)] = f;
            }
        }
        Self { grid, flags }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> CellFlag {
        self.flags[self.grid.cell(i, j)]
    }

    /// Flag of a possibly out-of-range cell; outside the grid counts as wall.
    #[inline]
    pub fn get_or_wall(&self, i: isize, j: isize) -> CellFlag {
        if i < 0 || j < 0 || i >= self.grid.nx as isize || j >= self.grid.ny as isize {
            CellFlag::Wall
        } else {
            self.get(i as usize, j as usize)
        }
    }

    pub fn is_fluid(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == CellFlag::Fluid
    }

    pub fn count(&self, f: CellFlag) -> usize {
        self.flags.iter().filter(|&&c| c == f).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.flags.iter().map(|f| f.code()).collect();
        Tensor::new(vec![self.grid.ny, self.grid.nx], data).expect("flag tensor shape")
    }

    pub fn from_tensor(grid: Grid, t: &Tensor) -> Result<Self> {
        if t.len() != grid.n_cells() {
            return Err(Error::shape("cell flags", format!("{} codes for {} cells", t.len(), grid.n_cells())));
        }
        let flags = t.data().iter().map(|&c| CellFlag::from_code(c)).collect::<Result<_>>()?;
        Ok(Self { grid, flags })
    }
}

/// Cell-centered scalar (pressure, marker density).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.n_cells()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.n_cells());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let [x, y] = grid.cell_center(i, j);
                values.push(f(x, y));
            }
        }
        Self { grid, values }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.cell(i, j)]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.grid.ny, self.grid.nx], self.values.clone()).expect("scalar field shape")
    }

    pub fn from_tensor(grid: Grid, t: &Tensor) -> Result<Self> {
        if t.len() != grid.n_cells() {
            return Err(Error::shape("scalar field", format!("{} values for {} cells", t.len(), grid.n_cells())));
        }
        Ok(Self {
            grid,
            values: t.data().to_vec(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Face-centered velocity on the MAC grid.
#[derive(Clone, Debug, PartialEq)]
pub struct StaggeredVelocity {
    pub grid: Grid,
    pub ux: Vec<f64>,
    pub uy: Vec<f64>,
}

impl StaggeredVelocity {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            ux: vec![0.0; grid.n_ux()],
            uy: vec![0.0; grid.n_uy()],
        }
    }

    pub fn uniform(grid: Grid, vx: f64, vy: f64) -> Self {
        Self {
            grid,
            ux: vec![vx; grid.n_ux()],
            uy: vec![vy; grid.n_uy()],
        }
    }

    /// Samples `f(x, y) -> (u_x, u_y)` at the face centers.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        let mut v = Self::zeros(grid);
        for j in 0..grid.ny {
            for i in 0..=grid.nx {
                let [x, y] = grid.ux_pos(i, j);
                v.ux[grid.ux(i, j)] = f(x, y)[0];
            }
        }
        for j in 0..=grid.ny {
            for i in 0..grid.nx {
                let [x, y] = grid.uy_pos(i, j);
                v.uy[grid.uy(i, j)] = f(x, y)[1];
            }
        }
        v
    }

    /// Packs `[u_x..., u_y...]` into one flat tensor.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.ux.len() + self.uy.len());
        data.extend_from_slice(&self.ux);
        data.extend_from_slice(&self.uy);
        Tensor::vector(data)
    }

    pub fn from_tensor(grid: Grid, t: &Tensor) -> Result<Self> {
        Self::from_slice(grid, t.data())
    }

    pub fn from_slice(grid: Grid, d: &[f64]) -> Result<Self> {
        if d.len() != grid.n_faces() {
            return Err(Error::shape(
                "staggered velocity",
                format!("{} values for {} faces", d.len(), grid.n_faces()),
            ));
        }
        let (ux, uy) = d.split_at(grid.n_ux());
        Ok(Self {
            grid,
            ux: ux.to_vec(),
            uy: uy.to_vec(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.ux.iter().chain(&self.uy).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.ux.iter().chain(&self.uy).all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_is_never_fluid() {
        let g = Grid::square(8, 8.0).unwrap();
        for b in [DomainBoundary::Closed, DomainBoundary::Channel] {
            let f = CellFlags::empty(g, b);
            for i in 0..8 {
                assert_ne!(f.get(i, 0), CellFlag::Fluid);
                assert_ne!(f.get(i, 7), CellFlag::Fluid);
                assert_ne!(f.get(0, i), CellFlag::Fluid);
                assert_ne!(f.get(7, i), CellFlag::Fluid);
            }
            assert_eq!(f.count(CellFlag::Fluid), 36);
        }
        let f = CellFlags::empty(g, DomainBoundary::Channel);
        assert_eq!(f.get(0, 3), CellFlag::Inflow);
        assert_eq!(f.get(7, 3), CellFlag::Outflow);
    }

    #[test]
    fn flags_survive_tensor_encoding() {
        let g = Grid::square(6, 6.0).unwrap();
        let f = CellFlags::empty(g, DomainBoundary::Channel);
        assert_eq!(CellFlags::from_tensor(g, &f.to_tensor()).unwrap(), f);
    }
}
