//! Rigid bodies: analytic geometry, rasterization onto the grid, pressure
//! forces and semi-implicit Euler motion.

mod force;
mod ops;
mod raster;

pub use force::{fluid_force_torque, pressure_at, PressureStencil};
pub use ops::BodyOps;
pub use raster::{local_surface_samples, rasterize, SurfaceSample};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rotates `v` by `angle` (counter-clockwise).
pub fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        PI
    } else {
        r
    }
}

/// 2D scalar cross product.
pub fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BodyShape {
    Cylinder { radius: f64 },
    Box { width: f64, height: f64 },
}

impl BodyShape {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BodyShape::Cylinder { radius } => radius > 0.0 && radius.is_finite(),
            BodyShape::Box { width, height } => width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("body dimensions must be positive: {self:?}")))
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            BodyShape::Cylinder { radius } => PI * radius * radius,
            BodyShape::Box { width, height } => width * height,
        }
    }

    pub fn perimeter(&self) -> f64 {
        match *self {
            BodyShape::Cylinder { radius } => 2.0 * PI * radius,
            BodyShape::Box { width, height } => 2.0 * (width + height),
        }
    }

    /// Signed distance in the body frame.
    pub fn local_sdf(&self, p: [f64; 2]) -> f64 {
        match *self {
            BodyShape::Cylinder { radius } => p[0].hypot(p[1]) - radius,
            BodyShape::Box { width, height } => {
                let qx = p[0].abs() - 0.5 * width;
                let qy = p[1].abs() - 0.5 * height;
                let outside = qx.max(0.0).hypot(qy.max(0.0));
                outside + qx.max(qy).min(0.0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyProperties {
    pub mass: f64,
    /// Moment of inertia; unused with two degrees of freedom.
    pub inertia: f64,
}

impl BodyProperties {
    pub fn validate(&self) -> Result<()> {
        if self.mass > 0.0 && self.inertia > 0.0 {
            Ok(())
        } else {
            Err(Error::config(format!("body mass and inertia must be positive: {self:?}")))
        }
    }
}

/// Degrees of freedom of the body: planar translation, optionally rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Dof {
    Two,
    Three,
}

impl Dof {
    pub fn rotates(self) -> bool {
        self == Dof::Three
    }

    /// Number of effort channels (`F_x, F_y` and, with rotation, `T`).
    pub fn channels(self) -> usize {
        match self {
            Dof::Two => 2,
            Dof::Three => 3,
        }
    }
}

impl TryFrom<u8> for Dof {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            2 => Ok(Dof::Two),
            3 => Ok(Dof::Three),
            _ => Err(format!("dof must be 2 or 3, got {v}")),
        }
    }
}

impl From<Dof> for u8 {
    fn from(d: Dof) -> u8 {
        match d {
            Dof::Two => 2,
            Dof::Three => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyState {
    pub position: [f64; 2],
    pub alpha: f64,
    pub velocity: [f64; 2],
    pub omega: f64,
}

impl BodyState {
    pub fn at_rest(position: [f64; 2], alpha: f64) -> Self {
        Self {
            position,
            alpha,
            velocity: [0.0; 2],
            omega: 0.0,
        }
    }

    /// `[x, y, alpha, vx, vy, omega]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.to_array())
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.position[0],
            self.position[1],
            self.alpha,
            self.velocity[0],
            self.velocity[1],
            self.omega,
        ]
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.data() {
            [x, y, alpha, vx, vy, omega] => Ok(Self {
                position: [x, y],
                alpha,
                velocity: [vx, vy],
                omega,
            }),
            _ => Err(Error::shape("body state", format!("expected 6 values, got {}", t.len()))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Signed distance from `point` to the posed body.
pub fn sdf(shape: &BodyShape, state: &BodyState, point: [f64; 2]) -> f64 {
    let d = [point[0] - state.position[0], point[1] - state.position[1]];
    shape.local_sdf(rotate(d, -state.alpha))
}

/// One semi-implicit Euler step; with two degrees of freedom the angle and
/// angular velocity are left untouched.
pub fn integrate_motion(
    state: &BodyState,
    props: &BodyProperties,
    force: [f64; 2],
    torque: f64,
    dt: f64,
    dof: Dof,
) -> BodyState {
    let vx = state.velocity[0] + dt * force[0] / props.mass;
    let vy = state.velocity[1] + dt * force[1] / props.mass;
    let mut out = BodyState {
        position: [state.position[0] + dt * vx, state.position[1] + dt * vy],
        alpha: state.alpha,
        velocity: [vx, vy],
        omega: state.omega,
    };
    if dof.rotates() {
        out.omega = state.omega + dt * torque / props.inertia;
        out.alpha = wrap_angle(state.alpha + dt * out.omega);
    }
    out
}
