//! Reverse-mode differentiation over a tape of dense-tensor primitives and
//! registered custom forward/adjoint pairs.

mod adjoint;
mod gradcheck;
mod tape;

pub use adjoint::{AdjointHandle, AdjointRegistry, BackwardCtx, CustomAdjoint, FnAdjoint, Saved};
pub use gradcheck::{grad_check, grad_check_coords, relative_error, CoordCheck, GradCheckReport, FD_STEP};
pub use tape::{Gradients, Primitive, Tape, Var};
