use std::f64::consts::PI;

use super::{rotate, sdf, BodyShape, BodyState};
use crate::error::{Error, Result};
use crate::grid::{CellFlag, CellFlags};

/// A quadrature point on the body contour. `position`, `normal` and `r`
/// (offset from the body center) are in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSample {
    pub position: [f64; 2],
    pub normal: [f64; 2],
    pub r: [f64; 2],
    pub ds: f64,
}

/// Contour samples in the body frame (`position == r`), spaced at most
/// `spacing` apart along the arc.
pub fn local_surface_samples(shape: &BodyShape, spacing: f64) -> Vec<SurfaceSample> {
    let mut out = Vec::new();
    match *shape {
        BodyShape::Cylinder { radius } => {
            let n = ((2.0 * PI * radius / spacing).ceil() as usize).max(8);
            let ds = 2.0 * PI * radius / n as f64;
            for k in 0..n {
                let th = (k as f64 + 0.5) * 2.0 * PI / n as f64;
                let (s, c) = th.sin_cos();
                let p = [radius * c, radius * s];
                out.push(SurfaceSample { position: p, normal: [c, s], r: p, ds });
            }
        }
        BodyShape::Box { width, height } => {
            let (hw, hh) = (0.5 * width, 0.5 * height);
            // counter-clockwise: bottom, right, top, left
            let sides = [
                ([-hw, -hh], [hw, -hh], [0.0, -1.0]),
                ([hw, -hh], [hw, hh], [1.0, 0.0]),
                ([hw, hh], [-hw, hh], [0.0, 1.0]),
                ([-hw, hh], [-hw, -hh], [-1.0, 0.0]),
            ];
            for (a, b, normal) in sides {
                let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                let n = ((len / spacing).ceil() as usize).max(1);
                let ds = len / n as f64;
                for k in 0..n {
                    let t = (k as f64 + 0.5) / n as f64;
                    let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                    out.push(SurfaceSample { position: p, normal, r: p, ds });
                }
            }
        }
    }
    out
}

impl SurfaceSample {
    /// Places a body-frame sample at the given pose.
    pub fn posed(&self, state: &BodyState) -> SurfaceSample {
        let r = rotate(self.r, state.alpha);
        SurfaceSample {
            position: [state.position[0] + r[0], state.position[1] + r[1]],
            normal: rotate(self.normal, state.alpha),
            r,
            ds: self.ds,
        }
    }
}

/// Marks cells whose centers lie inside the body as obstacles on top of
/// `base` and returns world-frame surface samples spaced at most `dx / 2`.
pub fn rasterize(shape: &BodyShape, state: &BodyState, base: &CellFlags) -> Result<(CellFlags, Vec<SurfaceSample>)> {
    let g = base.grid;
    let out_of_domain = || Error::OutOfDomain {
        step: 0,
        x: state.position[0],
        y: state.position[1],
        alpha: state.alpha,
    };
    if !state.is_finite() {
        return Err(out_of_domain());
    }
    let samples: Vec<SurfaceSample> = local_surface_samples(shape, 0.5 * g.dx).iter().map(|s| s.posed(state)).collect();
    let (lo_x, hi_x) = (g.dx, g.width() - g.dx);
    let (lo_y, hi_y) = (g.dx, g.height() - g.dx);
    if samples
        .iter()
        .any(|s| !(s.position[0] > lo_x && s.position[0] < hi_x && s.position[1] > lo_y && s.position[1] < hi_y))
    {
        return Err(out_of_domain());
    }
    // only cells inside the sample bounding box can be covered
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for s in &samples {
        x0 = x0.min(s.position[0]);
        x1 = x1.max(s.position[0]);
        y0 = y0.min(s.position[1]);
        y1 = y1.max(s.position[1]);
    }
    let i0 = ((x0 / g.dx).floor() as isize - 1).max(0) as usize;
    let i1 = (((x1 / g.dx).ceil() as usize) + 1).min(g.nx - 1);
    let j0 = ((y0 / g.dx).floor() as isize - 1).max(0) as usize;
    let j1 = (((y1 / g.dx).ceil() as usize) + 1).min(g.ny - 1);
    let mut flags = base.clone();
    for j in j0..=j1 {
        for i in i0..=i1 {
            if sdf(shape, state, g.cell_center(i, j)) <= 0.0 {
                if base.get(i, j) != CellFlag::Fluid {
                    return Err(out_of_domain());
                }
                flags.flags[g.cell(i, j)] = CellFlag::Obstacle;
            }
        }
    }
    Ok((flags, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DomainBoundary, Grid};

    fn base() -> CellFlags {
        CellFlags::empty(Grid::square(100, 100.0).unwrap(), DomainBoundary::Closed)
    }

    #[test]
    fn cylinder_cell_count_matches_area() {
        let shape = BodyShape::Cylinder { radius: 5.0 };
        let (f, _) = rasterize(&shape, &BodyState::at_rest([40.5, 40.5], 0.0), &base()).unwrap();
        let n = f.count(CellFlag::Obstacle) as f64;
        assert!((n - 78.54).abs() <= 8.0, "{n}");
    }

    #[test]
    fn cylinder_perimeter() {
        let shape = BodyShape::Cylinder { radius: 5.0 };
        let (_, s) = rasterize(&shape, &BodyState::at_rest([40.0, 40.0], 0.0), &base()).unwrap();
        let total: f64 = s.iter().map(|s| s.ds).sum();
        assert!((total - 2.0 * PI * 5.0).abs() < 0.01 * 31.416);
        assert!(s.iter().all(|s| (s.normal[0].hypot(s.normal[1]) - 1.0).abs() < 1e-12));
        let gap = s.windows(2).map(|w| (w[1].position[0] - w[0].position[0]).hypot(w[1].position[1] - w[0].position[1]));
        assert!(gap.fold(0.0, f64::max) <= 0.5);
    }

    #[test]
    fn box_perimeter_is_exact() {
        let shape = BodyShape::Box { width: 20.0, height: 6.0 };
        let (_, s) = rasterize(&shape, &BodyState::at_rest([40.0, 40.0], 0.7), &base()).unwrap();
        let total: f64 = s.iter().map(|s| s.ds).sum();
        assert!((total - 52.0).abs() < 1e-9);
    }

    #[test]
    fn body_at_corner_is_rejected() {
        let shape = BodyShape::Cylinder { radius: 5.0 };
        let err = rasterize(&shape, &BodyState::at_rest([0.0, 0.0], 0.0), &base()).unwrap_err();
        assert!(matches!(err, Error::OutOfDomain { .. }));
    }

    #[test]
    fn translation_shifts_mask() {
        let shape = BodyShape::Box { width: 20.0, height: 6.0 };
        let b = base();
        let (f0, _) = rasterize(&shape, &BodyState::at_rest([40.3, 41.2], 0.4), &b).unwrap();
        let (f1, _) = rasterize(&shape, &BodyState::at_rest([43.3, 39.2], 0.4), &b).unwrap();
        for j in 10..80 {
            for i in 10..80 {
                assert_eq!(f0.get(i, j), f1.get(i + 3, j - 2));
            }
        }
    }
}
