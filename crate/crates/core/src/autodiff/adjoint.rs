use std::any::Any;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Intermediates produced by a custom forward pass and handed back to its
/// backward pass.
pub type Saved = Box<dyn Any + Send + Sync>;

/// Everything a custom backward pass gets to see.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    pub saved: &'a (dyn Any + Send + Sync),
    pub grad_output: &'a Tensor,
    /// `needs[i]` is false when no gradient is required for input `i`.
    pub needs: &'a [bool],
}

impl BackwardCtx<'_> {
    pub fn saved<T: 'static>(&self) -> &T {
        self.saved
            .downcast_ref::<T>()
            .expect("custom adjoint received intermediates of the wrong type")
    }
}

/// A forward/adjoint pair that the tape treats as a single node.
pub trait CustomAdjoint: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)>;

    /// Returns one cotangent per input; `None` means zero.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>>;
}

type ForwardFn = dyn Fn(&[&Tensor]) -> Result<(Tensor, Saved)> + Send + Sync;
type BackwardFn = dyn Fn(&BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> + Send + Sync;

/// Closure-backed [`CustomAdjoint`].
pub struct FnAdjoint {
    name: String,
    forward: Box<ForwardFn>,
    backward: Box<BackwardFn>,
}

impl FnAdjoint {
    pub fn new<F, B>(name: impl Into<String>, forward: F, backward: B) -> Self
    where
        F: Fn(&[&Tensor]) -> Result<(Tensor, Saved)> + Send + Sync + 'static,
        B: Fn(&BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            forward: Box::new(forward),
            backward: Box::new(backward),
        }
    }
}

impl CustomAdjoint for FnAdjoint {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        (self.forward)(inputs)
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        (self.backward)(ctx)
    }
}

/// Handle to a registered adjoint, usable with [`Tape::custom`](super::Tape::custom).
#[derive(Clone)]
pub struct AdjointHandle {
    pub(crate) op: Arc<dyn CustomAdjoint>,
}

impl AdjointHandle {
    pub fn name(&self) -> &str {
        self.op.name()
    }
}

impl fmt::Debug for AdjointHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AdjointHandle({})", self.op.name())
    }
}

#[derive(Default, Clone)]
pub struct AdjointRegistry {
    ops: HashMap<String, AdjointHandle>,
}

impl AdjointRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, op: impl CustomAdjoint + 'static) -> Result<AdjointHandle> {
        self.register_arc(Arc::new(op))
    }

    pub fn register_arc(&mut self, op: Arc<dyn CustomAdjoint>) -> Result<AdjointHandle> {
        let name = op.name().to_string();
        if self.ops.contains_key(&name) {
            return Err(Error::DuplicateAdjoint(name));
        }
        let handle = AdjointHandle { op };
        self.ops.insert(name, handle.clone());
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Result<AdjointHandle> {
        self.ops
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownAdjoint(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ops.keys().map(String::as_str)
    }
}
