use std::any::Any;
use std::sync::Arc;

use super::adjoint::{AdjointHandle, AdjointRegistry, BackwardCtx, CustomAdjoint, Saved};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Node index on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitives understood by the tape.
///
/// Binary elementwise primitives accept an identical right-hand shape, a
/// one-element right-hand side, or one matching the trailing dimensions of
/// the left-hand side (bias-style broadcasting).
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    /// `[m, k] x [k] -> [m]`
    MatVec,
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    Relu,
    Tanh,
    /// Sum of all entries, giving a scalar.
    Sum,
    Square,
    /// Flattening concatenation into a vector.
    Concat,
    /// Contiguous range of the flattened input.
    Slice { start: usize, len: usize },
    /// Rotates consecutive `(x, y)` pairs of the first input by the angle in
    /// the second (one-element) input.
    Rotate2d,
    /// Multiplication by a fixed constant.
    Scale(f64),
    /// Addition of a fixed constant to every entry.
    Offset(f64),
    Reshape(Vec<usize>),
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::MatVec => "matvec",
            Primitive::MatMul => "matmul",
            Primitive::Relu => "relu",
            Primitive::Tanh => "tanh",
            Primitive::Sum => "sum",
            Primitive::Square => "square",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Rotate2d => "rotate2d",
            Primitive::Scale(_) => "scale",
            Primitive::Offset(_) => "offset",
            Primitive::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::MatVec
            | Primitive::MatMul
            | Primitive::Rotate2d => Some(2),
            Primitive::Concat => None,
            _ => Some(1),
        }
    }
}

enum Op {
    Leaf,
    Prim(Primitive),
    Custom {
        op: Arc<dyn CustomAdjoint>,
        saved: Option<Saved>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes only reference earlier nodes, so the tape is topologically ordered
/// by construction. A tape created with [`Tape::inference`] evaluates the same
/// forward code but drops saved intermediates and cannot run backward.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
            consumed: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), self.recording)
    }

    /// An input whose gradient is never needed.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_vars(&self, inputs: &[Var]) -> Result<()> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::shape("tape", format!("unknown node {}", v.0)));
            }
        }
        Ok(())
    }

    pub fn record(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        self.check_vars(inputs)?;
        if let Some(n) = prim.arity() {
            if inputs.len() != n {
                return Err(Error::shape(
                    prim.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = eval_primitive(&prim, &values)?;
        let rg = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(out, Op::Prim(prim), inputs.to_vec(), rg))
    }

    /// Records a registered custom forward/adjoint pair.
    pub fn custom(&mut self, handle: &AdjointHandle, inputs: &[Var]) -> Result<Var> {
        self.check_vars(inputs)?;
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (out, saved) = handle.op.forward(&values)?;
        let rg = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let saved = if rg { Some(saved) } else { None };
        Ok(self.push(
            out,
            Op::Custom {
                op: handle.op.clone(),
                saved,
            },
            inputs.to_vec(),
            rg,
        ))
    }

    pub fn custom_named(
        &mut self,
        registry: &AdjointRegistry,
        name: &str,
        inputs: &[Var],
    ) -> Result<Var> {
        let handle = registry.get(name)?;
        self.custom(&handle, inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Div, &[a, b])
    }
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        self.record(Primitive::MatVec, &[m, v])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::MatMul, &[a, b])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Relu, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Tanh, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Sum, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Square, &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Primitive::Concat, parts)
    }
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Primitive::Slice { start, len }, &[a])
    }
    pub fn rotate2d(&mut self, v: Var, angle: Var) -> Result<Var> {
        self.record(Primitive::Rotate2d, &[v, angle])
    }
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.record(Primitive::Scale(k), &[a])
    }
    pub fn offset(&mut self, a: Var, k: f64) -> Result<Var> {
        self.record(Primitive::Offset(k), &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.record(Primitive::Reshape(shape), &[a])
    }

    /// `sum(a^2)`.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.square(a)?;
        self.sum(sq)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check_vars(&[loss])?;
        if !self.recording || self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = match &node.op {
                Op::Leaf => unreachable!(),
                Op::Prim(p) => primitive_vjp(p, &inputs, &node.value, &g, &needs)?,
                Op::Custom { op, saved } => {
                    let empty: Saved = Box::new(());
                    let saved_ref: &(dyn Any + Send + Sync) = match saved {
                        Some(s) => s.as_ref(),
                        None => empty.as_ref(),
                    };
                    let ctx = BackwardCtx {
                        inputs: &inputs,
                        output: &node.value,
                        saved: saved_ref,
                        grad_output: &g,
                        needs: &needs,
                    };
                    let out = op.backward(&ctx)?;
                    if out.len() != inputs.len() {
                        return Err(Error::shape(
                            op.name().to_string(),
                            format!("adjoint returned {} cotangents for {} inputs", out.len(), inputs.len()),
                        ));
                    }
                    out
                }
            };
            for ((v, gi), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(gi), true) = (gi, *need) else { continue };
                if gi.len() != self.nodes[v.0].value.len() {
                    return Err(Error::shape(
                        "backward",
                        format!(
                            "cotangent of length {} for node of length {}",
                            gi.len(),
                            self.nodes[v.0].value.len()
                        ),
                    ));
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }

        // keep gradients of leaves only
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `d loss / d v`; exact zeros for leaves that did not participate.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.reshaped(self.shapes[v.0].clone()).unwrap_or_else(|_| g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    if a.shape() == b.shape() || b.len() == 1 {
        return true;
    }
    let (sa, sb) = (a.shape(), b.shape());
    sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb
}

fn binary(name: &str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if !broadcast_ok(a, b) {
        return Err(Error::shape(
            name,
            format!("cannot combine {:?} with {:?}", a.shape(), b.shape()),
        ));
    }
    let bd = b.data();
    let m = bd.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[i % m]))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Sums a full-size cotangent down to the broadcast operand's size.
fn reduce_to(g: Vec<f64>, len: usize) -> Vec<f64> {
    if g.len() == len {
        return g;
    }
    let mut out = vec![0.0; len];
    for (i, v) in g.into_iter().enumerate() {
        out[i % len] += v;
    }
    out
}

fn eval_primitive(prim: &Primitive, x: &[&Tensor]) -> Result<Tensor> {
    let name = prim.name();
    match prim {
        Primitive::Add => binary(name, x[0], x[1], |a, b| a + b),
        Primitive::Sub => binary(name, x[0], x[1], |a, b| a - b),
        Primitive::Mul => binary(name, x[0], x[1], |a, b| a * b),
        Primitive::Div => binary(name, x[0], x[1], |a, b| a / b),
        Primitive::MatVec => {
            let (m, v) = (x[0], x[1]);
            if m.shape().len() != 2 || v.len() != m.shape()[1] {
                return Err(Error::shape(
                    name,
                    format!("matrix {:?} with vector {:?}", m.shape(), v.shape()),
                ));
            }
            let (rows, cols) = (m.shape()[0], m.shape()[1]);
            let md = m.data();
            let vd = v.data();
            let out = (0..rows)
                .map(|r| md[r * cols..(r + 1) * cols].iter().zip(vd).map(|(a, b)| a * b).sum())
                .collect();
            Ok(Tensor::vector(out))
        }
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape(
                    name,
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::new(vec![m, n], matmul(a.data(), b.data(), m, k, n))
        }
        Primitive::Relu => Ok(x[0].map(|v| v.max(0.0))),
        Primitive::Tanh => Ok(x[0].map(f64::tanh)),
        Primitive::Sum => Ok(Tensor::scalar(x[0].data().iter().sum())),
        Primitive::Square => Ok(x[0].map(|v| v * v)),
        Primitive::Concat => {
            if x.is_empty() {
                return Err(Error::shape(name, "no inputs"));
            }
            let data = x.iter().flat_map(|t| t.data().iter().copied()).collect();
            Ok(Tensor::vector(data))
        }
        Primitive::Slice { start, len } => {
            let t = x[0];
            if start + len > t.len() {
                return Err(Error::shape(
                    name,
                    format!("range {start}..{} of {} values", start + len, t.len()),
                ));
            }
            Ok(Tensor::from_slice(&t.data()[*start..start + len]))
        }
        Primitive::Rotate2d => {
            let (v, a) = (x[0], x[1]);
            if v.len() % 2 != 0 || a.len() != 1 {
                return Err(Error::shape(
                    name,
                    format!("vector {:?} with angle {:?}", v.shape(), a.shape()),
                ));
            }
            let (s, c) = a.item().sin_cos();
            let mut out = v.data().to_vec();
            for p in out.chunks_mut(2) {
                let (px, py) = (p[0], p[1]);
                p[0] = c * px - s * py;
                p[1] = s * px + c * py;
            }
            Tensor::new(v.shape().to_vec(), out)
        }
        Primitive::Scale(k) => Ok(x[0].scaled(*k)),
        Primitive::Offset(k) => Ok(x[0].map(|v| v + k)),
        Primitive::Reshape(shape) => x[0]
            .reshaped(shape.clone())
            .map_err(|_| Error::shape(name, format!("{:?} -> {shape:?}", x[0].shape()))),
    }
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn primitive_vjp(
    prim: &Primitive,
    x: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let gd = g.data();
    let vec_like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data);
    let res = match prim {
        Primitive::Add | Primitive::Sub => {
            let sign = if *prim == Primitive::Add { 1.0 } else { -1.0 };
            let ga = needs[0].then(|| g.clone());
            let gb = if needs[1] {
                let d = reduce_to(gd.iter().map(|v| sign * v).collect(), x[1].len());
                Some(vec_like(x[1], d)?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Primitive::Mul => {
            let (a, b) = (x[0].data(), x[1].data());
            let m = b.len();
            let ga = if needs[0] {
                Some(vec_like(x[0], gd.iter().enumerate().map(|(i, g)| g * b[i % m]).collect())?)
            } else {
                None
            };
            let gb = if needs[1] {
                let d = gd.iter().zip(a).map(|(g, a)| g * a).collect();
                Some(vec_like(x[1], reduce_to(d, m))?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Primitive::Div => {
            let (a, b) = (x[0].data(), x[1].data());
            let m = b.len();
            let ga = if needs[0] {
                Some(vec_like(x[0], gd.iter().enumerate().map(|(i, g)| g / b[i % m]).collect())?)
            } else {
                None
            };
            let gb = if needs[1] {
                let d = gd
                    .iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let bi = b[i % m];
                        -g * a[i] / (bi * bi)
                    })
                    .collect();
                Some(vec_like(x[1], reduce_to(d, m))?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Primitive::MatVec => {
            let (m, v) = (x[0], x[1]);
            let (rows, cols) = (m.shape()[0], m.shape()[1]);
            let gm = if needs[0] {
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        d[r * cols + c] = gd[r] * v.data()[c];
                    }
                }
                Some(vec_like(m, d)?)
            } else {
                None
            };
            let gv = if needs[1] {
                let mut d = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        d[c] += gd[r] * m.data()[r * cols + c];
                    }
                }
                Some(vec_like(v, d)?)
            } else {
                None
            };
            vec![gm, gv]
        }
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = if needs[0] {
                let bt = transpose(b.data(), k, n);
                Some(vec_like(a, matmul(gd, &bt, m, n, k))?)
            } else {
                None
            };
            let gb = if needs[1] {
                let at = transpose(a.data(), m, k);
                Some(vec_like(b, matmul(&at, gd, k, m, n))?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Primitive::Relu => {
            let d = gd
                .iter()
                .zip(x[0].data())
                .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                .collect();
            vec![Some(vec_like(x[0], d)?)]
        }
        Primitive::Tanh => {
            let d = gd.iter().zip(out.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
            vec![Some(vec_like(x[0], d)?)]
        }
        Primitive::Sum => vec![Some(Tensor::full(x[0].shape(), gd[0]))],
        Primitive::Square => {
            let d = gd.iter().zip(x[0].data()).map(|(g, v)| 2.0 * g * v).collect();
            vec![Some(vec_like(x[0], d)?)]
        }
        Primitive::Concat => {
            let mut off = 0;
            let mut res = Vec::with_capacity(x.len());
            for (t, need) in x.iter().zip(needs) {
                let n = t.len();
                res.push(if *need {
                    Some(vec_like(t, gd[off..off + n].to_vec())?)
                } else {
                    None
                });
                off += n;
            }
            res
        }
        Primitive::Slice { start, len } => {
            let mut d = vec![0.0; x[0].len()];
            d[*start..start + len].copy_from_slice(gd);
            vec![Some(vec_like(x[0], d)?)]
        }
        Primitive::Rotate2d => {
            let (v, a) = (x[0], x[1]);
            let (s, c) = a.item().sin_cos();
            let gv = if needs[0] {
                let mut d = gd.to_vec();
                for p in d.chunks_mut(2) {
                    let (gx, gy) = (p[0], p[1]);
                    p[0] = c * gx + s * gy;
                    p[1] = -s * gx + c * gy;
                }
                Some(vec_like(v, d)?)
            } else {
                None
            };
            let ga = if needs[1] {
                let mut acc = 0.0;
                for (p, gp) in v.data().chunks(2).zip(gd.chunks(2)) {
                    // d/dθ of R(θ)p = (-s px - c py, c px - s py)
                    acc += gp[0] * (-s * p[0] - c * p[1]) + gp[1] * (c * p[0] - s * p[1]);
                }
                Some(vec_like(a, vec![acc])?)
            } else {
                None
            };
            vec![gv, ga]
        }
        Primitive::Scale(k) => vec![Some(g.scaled(*k).reshaped(x[0].shape().to_vec())?)],
        Primitive::Offset(_) | Primitive::Reshape(_) => {
            vec![Some(vec_like(x[0], gd.to_vec())?)]
        }
    };
    Ok(res)
}
