//! The six experimental setups and the coupled fluid/body stepping loop.

mod schedule;
mod sim;

pub use schedule::{external_forcing, ForcingSchedule, ForcingWindow, Objective, ObjectiveSchedule};
pub use sim::{Effort, SimState, Simulator, StepInfo, TapedState};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fluid::FluidParams;
use crate::grid::{DomainBoundary, Grid};
use crate::rigid_body::{BodyProperties, BodyShape, Dof};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvironmentId {
    BaseNR,
    BuoyNR,
    Base,
    Inflow,
    InBuoy,
    Hold,
}

impl EnvironmentId {
    pub const ALL: [EnvironmentId; 6] = [
        EnvironmentId::BaseNR,
        EnvironmentId::BuoyNR,
        EnvironmentId::Base,
        EnvironmentId::Inflow,
        EnvironmentId::InBuoy,
        EnvironmentId::Hold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvironmentId::BaseNR => "BaseNR",
            EnvironmentId::BuoyNR => "BuoyNR",
            EnvironmentId::Base => "Base",
            EnvironmentId::Inflow => "Inflow",
            EnvironmentId::InBuoy => "InBuoy",
            EnvironmentId::Hold => "Hold",
        }
    }
}

impl fmt::Display for EnvironmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvironmentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|id| id.name() == s).ok_or_else(|| Error::UnknownEnvironment {
            name: s.to_string(),
            valid: Self::ALL.map(|id| id.name()).join(", "),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub id: EnvironmentId,
    pub inflow: bool,
    pub buoyancy: bool,
    pub forcing: bool,
    pub dof: Dof,
    pub shape: BodyShape,
    pub props: BodyProperties,
    pub fluid: FluidParams,
    /// Solver steps per controller update.
    pub controller_stride: usize,
    /// Cells per side of the square grid.
    pub grid_cells: usize,
    /// Side length of the square domain.
    pub domain_size: f64,
    /// Controller updates per training episode.
    pub episode_length: usize,
    pub start_position: [f64; 2],
    pub f_max: f64,
    pub t_max: f64,
    pub forcing_schedule: ForcingSchedule,
    /// Marker emitter strip at the bottom of the domain.
    pub source_center: f64,
    pub source_width: f64,
}

impl EnvironmentConfig {
    pub fn grid(&self) -> Result<Grid> {
        Grid::square(self.grid_cells, self.domain_size)
    }

    pub fn boundary(&self) -> DomainBoundary {
        if self.inflow {
            DomainBoundary::Channel
        } else {
            DomainBoundary::Closed
        }
    }

    /// Time between controller updates.
    pub fn control_dt(&self) -> f64 {
        self.fluid.dt * self.controller_stride as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.fluid.validate()?;
        self.shape.validate()?;
        self.props.validate()?;
        self.forcing_schedule.validate()?;
        self.grid()?;
        if self.controller_stride == 0 {
            return Err(Error::config("controller_stride must be at least 1"));
        }
        if !(self.f_max > 0.0 && self.t_max > 0.0) {
            return Err(Error::config("effort bounds must be positive"));
        }
        if self.start_position.iter().any(|&c| !(c > 0.0 && c < self.domain_size)) {
            return Err(Error::config("start position lies outside the domain"));
        }
        Ok(())
    }
}

/// Materializes a setup, then applies `overrides` (a partial table with the
/// same layout as the serialized config).
pub fn make_environment(id: EnvironmentId, overrides: Option<&toml::Table>) -> Result<EnvironmentConfig> {
    use EnvironmentId::*;
    let (inflow, buoyancy, forcing) = match id {
        BaseNR | Base => (false, false, false),
        BuoyNR => (false, true, false),
        Inflow => (true, false, false),
        InBuoy => (true, true, false),
        Hold => (true, true, true),
    };
    let two_dof = matches!(id, BaseNR | BuoyNR);
    let fast = matches!(id, Inflow | InBuoy | Hold);
    let fluid = FluidParams {
        reynolds: if fast { 3000.0 } else { 1000.0 },
        dt: if fast { 0.05 } else { 0.1 },
        ..FluidParams::default()
    };
    let (shape, props) = if two_dof {
        (
            BodyShape::Cylinder { radius: 5.0 },
            BodyProperties { mass: 11.78, inertia: 0.5 * 11.78 * 25.0 },
        )
    } else {
        (
            BodyShape::Box { width: 20.0, height: 6.0 },
            BodyProperties { mass: 36.0, inertia: 4000.0 },
        )
    };
    let cfg = EnvironmentConfig {
        id,
        inflow,
        buoyancy,
        forcing,
        dof: if two_dof { Dof::Two } else { Dof::Three },
        shape,
        props,
        fluid,
        controller_stride: if fast { 2 } else { 1 },
        grid_cells: 100,
        domain_size: 100.0,
        episode_length: 1000,
        start_position: [40.0, 40.0],
        f_max: 50.0,
        t_max: 2000.0,
        forcing_schedule: if forcing { ForcingSchedule::hold_default() } else { ForcingSchedule::default() },
        source_center: 50.0,
        source_width: 10.0,
    };
    let cfg = match overrides {
        Some(patch) if !patch.is_empty() => apply_overrides(&cfg, patch)?,
        _ => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut toml::Table, patch: &toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn apply_overrides(cfg: &EnvironmentConfig, patch: &toml::Table) -> Result<EnvironmentConfig> {
    let mut table = toml::Table::try_from(cfg).map_err(|e| Error::config(e.to_string()))?;
    merge(&mut table, patch);
    let out: EnvironmentConfig = table.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
    if out.id != cfg.id {
        return Err(Error::config("environment id cannot be overridden"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        let base = make_environment(EnvironmentId::Base, None).unwrap();
        assert_eq!((base.inflow, base.buoyancy, base.forcing, base.dof), (false, false, false, Dof::Three));
        assert_eq!(base.fluid.reynolds, 1000.0);
        let hold = make_environment(EnvironmentId::Hold, None).unwrap();
        assert_eq!((hold.inflow, hold.buoyancy, hold.forcing, hold.dof), (true, true, true, Dof::Three));
        assert_eq!(hold.fluid.reynolds, 3000.0);
        assert_eq!(hold.controller_stride, 2);
        let nr = make_environment(EnvironmentId::BuoyNR, None).unwrap();
        assert_eq!((nr.inflow, nr.buoyancy, nr.dof), (false, true, Dof::Two));
        assert_eq!(nr.props.mass, 11.78);
    }

    #[test]
    fn unknown_id_lists_valid_ones() {
        let err = "Foo".parse::<EnvironmentId>().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Foo") && msg.contains("InBuoy"), "{msg}");
    }

    #[test]
    fn overrides_patch_nested_fields() {
        let patch: toml::Table = toml::from_str("grid_cells = 64\n[fluid]\nrho = 0.08\n").unwrap();
        let cfg = make_environment(EnvironmentId::Inflow, Some(&patch)).unwrap();
        assert_eq!(cfg.grid_cells, 64);
        assert_eq!(cfg.fluid.rho, 0.08);
        assert_eq!(cfg.fluid.reynolds, 3000.0);
        let bad: toml::Table = toml::from_str("grid_size = 64\n").unwrap();
        assert!(make_environment(EnvironmentId::Inflow, Some(&bad)).is_err());
    }
}
