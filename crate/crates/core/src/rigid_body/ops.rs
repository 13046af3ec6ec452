//! Body operators as tape nodes. The body travels as `[x, y, alpha, vx, vy,
//! omega]`, forces and torques as `[F_x, F_y, T]`.

use super::force::pressure_at;
use super::{cross, integrate_motion, BodyProperties, BodyShape, BodyState, Dof, SurfaceSample};
use crate::autodiff::{AdjointHandle, AdjointRegistry, BackwardCtx, CustomAdjoint, Saved};
use crate::error::Result;
use crate::grid::{CellFlags, Grid};
use crate::tensor::Tensor;

struct FluidForce {
    grid: Grid,
    local: Vec<SurfaceSample>,
}

impl CustomAdjoint for FluidForce {
    fn name(&self) -> &str {
        "body.fluid_force"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let p = inputs[0].data();
        let body = BodyState::from_tensor(inputs[1])?;
        let flags = CellFlags::from_tensor(self.grid, inputs[2])?;
        let mut out = [0.0; 3];
        for s in self.local.iter().map(|s| s.posed(&body)) {
            let v = pressure_at(&flags, s.position).value(p);
            out[0] -= v * s.normal[0] * s.ds;
            out[1] -= v * s.normal[1] * s.ds;
            out[2] -= cross(s.r, s.normal) * v * s.ds;
        }
        Ok((Tensor::from_slice(&out), Box::new(())))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let p = ctx.inputs[0].data();
        let body = BodyState::from_tensor(ctx.inputs[1])?;
        let flags = CellFlags::from_tensor(self.grid, ctx.inputs[2])?;
        let go = ctx.grad_output.data();
        let mut gp = vec![0.0; p.len()];
        let mut gb = [0.0; 6];
        for s in self.local.iter().map(|s| s.posed(&body)) {
            let st = pressure_at(&flags, s.position);
            let v = st.value(p);
            let grad = st.grad(p);
            let a = -(go[0] * s.normal[0] + go[1] * s.normal[1] + go[2] * cross(s.r, s.normal)) * s.ds;
            for (&k, w) in st.cells.iter().zip(&st.w) {
                gp[k] += a * w;
            }
            gb[0] += a * grad[0];
            gb[1] += a * grad[1];
            let perp_r = [-s.r[1], s.r[0]];
            let perp_n = [-s.normal[1], s.normal[0]];
            gb[2] += a * (grad[0] * perp_r[0] + grad[1] * perp_r[1]) - v * s.ds * (go[0] * perp_n[0] + go[1] * perp_n[1]);
        }
        Ok(vec![
            Some(Tensor::new(ctx.inputs[0].shape().to_vec(), gp)?),
            Some(Tensor::from_slice(&gb)),
            None,
        ])
    }
}

struct Integrate {
    props: BodyProperties,
    dt: f64,
    dof: Dof,
}

impl CustomAdjoint for Integrate {
    fn name(&self) -> &str {
        "body.integrate_motion"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let body = BodyState::from_tensor(inputs[0])?;
        let f = inputs[1].data();
        let out = integrate_motion(&body, &self.props, [f[0], f[1]], f[2], self.dt, self.dof);
        Ok((out.to_tensor(), Box::new(())))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = ctx.grad_output.data();
        let dt = self.dt;
        let m = self.props.mass;
        let gvx = g[3] + dt * g[0];
        let gvy = g[4] + dt * g[1];
        let (gw, gt) = if self.dof.rotates() {
            let gw = g[5] + dt * g[2];
            (gw, dt / self.props.inertia * gw)
        } else {
            (g[5], 0.0)
        };
        Ok(vec![
            Some(Tensor::from_slice(&[g[0], g[1], g[2], gvx, gvy, gw])),
            Some(Tensor::from_slice(&[dt / m * gvx, dt / m * gvy, gt])),
        ])
    }
}

#[derive(Clone, Debug)]
pub struct BodyOps {
    pub fluid_force: AdjointHandle,
    pub integrate: AdjointHandle,
    pub local_samples: Vec<SurfaceSample>,
}

impl BodyOps {
    pub fn register(
        registry: &mut AdjointRegistry,
        grid: Grid,
        shape: &BodyShape,
        props: BodyProperties,
        dt: f64,
        dof: Dof,
    ) -> Result<Self> {
        shape.validate()?;
        props.validate()?;
        let local = super::local_surface_samples(shape, 0.5 * grid.dx);
        Ok(Self {
            fluid_force: registry.register(FluidForce { grid, local: local.clone() })?,
            integrate: registry.register(Integrate { props, dt, dof })?,
            local_samples: local,
        })
    }
}
