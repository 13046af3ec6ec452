use crate::grid::{Grid, StaggeredVelocity};

/// A regular lattice of sample points: cell centers or one family of faces.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lattice {
    pub nx: usize,
    pub ny: usize,
    ox: f64,
    oy: f64,
    dx: f64,
}

/// Bilinear weights of a point on a lattice, with their spatial derivatives.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    t: [f64; 2],
    pub dw: [[f64; 2]; 4],
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

impl Stencil {
    #[inline]
    pub fn value(&self, q: &[f64]) -> f64 {
        // nested lerps reproduce constant fields bit-exactly
        let [tx, ty] = self.t;
        let (q00, q10, q01, q11) = (q[self.idx[0]], q[self.idx[1]], q[self.idx[2]], q[self.idx[3]]);
        lerp(lerp(q00, q10, tx), lerp(q01, q11, tx), ty)
    }

    #[inline]
    pub fn grad(&self, q: &[f64]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for c in 0..4 {
            let v = q[self.idx[c]];
            g[0] += self.dw[c][0] * v;
            g[1] += self.dw[c][1] * v;
        }
        g
    }

    /// `(min, argmin, max, argmax)` over the four corner values.
    #[inline]
    pub fn bounds(&self, q: &[f64]) -> (f64, usize, f64, usize) {
        let (mut lo, mut lo_i) = (q[self.idx[0]], self.idx[0]);
        let (mut hi, mut hi_i) = (lo, lo_i);
        for &k in &self.idx[1..] {
            let v = q[k];
            if v < lo {
                lo = v;
                lo_i = k;
            }
            if v > hi {
                hi = v;
                hi_i = k;
            }
        }
        (lo, lo_i, hi, hi_i)
    }

    #[inline]
    pub fn scatter(&self, g: f64, out: &mut [f64]) {
        for c in 0..4 {
            out[self.idx[c]] += self.w[c] * g;
        }
    }
}

impl Lattice {
    pub fn cells(g: &Grid) -> Self {
        Self { nx: g.nx, ny: g.ny, ox: 0.5, oy: 0.5, dx: g.dx }
    }

    pub fn ux(g: &Grid) -> Self {
        Self { nx: g.nx + 1, ny: g.ny, ox: 0.0, oy: 0.5, dx: g.dx }
    }

    pub fn uy(g: &Grid) -> Self {
        Self { nx: g.nx, ny: g.ny + 1, ox: 0.5, oy: 0.0, dx: g.dx }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn point(&self, k: usize) -> [f64; 2] {
        let (i, j) = (k % self.nx, k / self.nx);
        [(i as f64 + self.ox) * self.dx, (j as f64 + self.oy) * self.dx]
    }

    #[inline]
    fn axis(&self, p: f64, origin: f64, n: usize) -> (usize, f64, f64) {
        let f = p / self.dx - origin;
        let max = (n - 1) as f64;
        let (f, df) = if f <= 0.0 {
            (0.0, 0.0)
        } else if f >= max {
            (max, 0.0)
        } else {
            (f, 1.0 / self.dx)
        };
        let i0 = (f.floor() as usize).min(n - 2);
        (i0, f - i0 as f64, df)
    }

    /// Bilinear stencil at `p`, clamped to the lattice hull.
    #[inline]
    pub fn stencil(&self, p: [f64; 2]) -> Stencil {
        let (i0, tx, dfx) = self.axis(p[0], self.ox, self.nx);
        let (j0, ty, dfy) = self.axis(p[1], self.oy, self.ny);
        let k00 = j0 * self.nx + i0;
        let k10 = k00 + 1;
        let k01 = k00 + self.nx;
        let k11 = k01 + 1;
        Stencil {
            idx: [k00, k10, k01, k11],
            t: [tx, ty],
            w: [
                (1.0 - tx) * (1.0 - ty),
                tx * (1.0 - ty),
                (1.0 - tx) * ty,
                tx * ty,
            ],
            dw: [
                [-(1.0 - ty) * dfx, -(1.0 - tx) * dfy],
                [(1.0 - ty) * dfx, -tx * dfy],
                [-ty * dfx, (1.0 - tx) * dfy],
                [ty * dfx, tx * dfy],
            ],
        }
    }
}

/// Velocity sampled at an arbitrary point, with the stencils used.
pub(crate) struct VelocitySample {
    pub v: [f64; 2],
    pub sx: Stencil,
    pub sy: Stencil,
}

pub(crate) fn sample_velocity(vel: &StaggeredVelocity, p: [f64; 2]) -> VelocitySample {
    let g = &vel.grid;
    let sx = Lattice::ux(g).stencil(p);
    let sy = Lattice::uy(g).stencil(p);
    VelocitySample {
        v: [sx.value(&vel.ux), sy.value(&vel.uy)],
        sx,
        sy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_linear_functions() {
        let g = Grid::square(8, 8.0).unwrap();
        let lat = Lattice::cells(&g);
        let q: Vec<f64> = (0..lat.len()).map(|k| {
            let [x, y] = lat.point(k);
            2.0 * x - 3.0 * y + 1.0
        }).collect();
        for p in [[1.3, 2.7], [4.0, 4.0], [6.9, 0.6]] {
            let s = lat.stencil(p);
            assert!((s.value(&q) - (2.0 * p[0] - 3.0 * p[1] + 1.0)).abs() < 1e-12);
            let gr = s.grad(&q);
            assert!((gr[0] - 2.0).abs() < 1e-12 && (gr[1] + 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_points_are_exact() {
        let g = Grid::square(5, 5.0).unwrap();
        let lat = Lattice::ux(&g);
        let q: Vec<f64> = (0..lat.len()).map(|k| (k as f64 * 0.37).sin()).collect();
        for k in 0..lat.len() {
            assert_eq!(lat.stencil(lat.point(k)).value(&q), q[k]);
        }
    }
}
