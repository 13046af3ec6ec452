//! Incompressible flow on the MAC grid: transport, viscosity, buoyancy,
//! boundary conditions and Chorin projection.

mod advect;
mod boundary;
mod buoyancy;
mod diffuse;
mod dump;
mod interp;
mod ops;
mod pressure;
mod project;

pub use advect::{advect_scalar, advect_velocity, cfl_number};
pub use boundary::apply_boundary_conditions;
pub use buoyancy::apply_buoyancy;
pub use diffuse::diffuse;
pub use dump::{read_field, write_field};
pub use ops::{record_fluid_step, tensor_divergence, FluidOps, FluidStepVars};
pub use pressure::{masked_laplacian, pressure_solve, SolveStats};
pub use project::{divergence, max_fluid_divergence, pressure_gradient, project};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FluidParams {
    /// Fluid density (mass per area).
    pub rho: f64,
    pub reynolds: f64,
    pub u_ref: f64,
    pub l_ref: f64,
    pub dt: f64,
    pub buoyancy_coeff: f64,
    pub inflow_speed: f64,
    pub pressure_tol: f64,
    pub pressure_max_iter: usize,
}

impl Default for FluidParams {
    fn default() -> Self {
        Self {
            rho: 0.05,
            reynolds: 1000.0,
            u_ref: 1.0,
            l_ref: 10.0,
            dt: 0.1,
            buoyancy_coeff: 0.5,
            inflow_speed: 1.0,
            pressure_tol: 1e-6,
            pressure_max_iter: 2000,
        }
    }
}

impl FluidParams {
    /// Kinematic viscosity `u_ref l_ref / Re`.
    pub fn nu(&self) -> f64 {
        self.u_ref * self.l_ref / self.reynolds
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rho", self.rho),
            ("reynolds", self.reynolds),
            ("dt", self.dt),
            ("pressure_tol", self.pressure_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("fluid.{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.u_ref >= 0.0 && self.l_ref >= 0.0) {
            return Err(Error::config("fluid reference scales must be nonnegative"));
        }
        if !(self.buoyancy_coeff >= 0.0) {
            return Err(Error::config(format!(
                "fluid.buoyancy_coeff must be nonnegative, got {}",
                self.buoyancy_coeff
            )));
        }
        if !self.inflow_speed.is_finite() {
            return Err(Error::config("fluid.inflow_speed must be finite"));
        }
        if self.pressure_max_iter == 0 {
            return Err(Error::config("fluid.pressure_max_iter must be at least 1"));
        }
        Ok(())
    }
}
