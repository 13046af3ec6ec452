//! The MLP controller: body-frame observation windows, a three-layer
//! network with bounded output, checkpoints, and a [`Controller`] adapter.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::baselines::Controller;
use crate::environment::{Effort, EnvironmentConfig, Objective, SimState};
use crate::error::{Error, Result};
use crate::rigid_body::{wrap_angle, Dof};
use crate::tensor::Tensor;

/// Size of a single observation frame.
pub fn frame_dim(dof: Dof) -> usize {
    match dof {
        Dof::Two => 6,
        Dof::Three => 9,
    }
}

/// Composition of the network input: `n_p + 1` frames, newest first,
/// followed by `pad` zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationLayout {
    pub dof: Dof,
    pub n_p: usize,
    pub pad: usize,
}

impl ObservationLayout {
    pub fn default_for(dof: Dof) -> Self {
        match dof {
            Dof::Two => Self { dof, n_p: 1, pad: 4 },
            Dof::Three => Self { dof, n_p: 2, pad: 5 },
        }
    }

    /// The layout with as many whole frames as fit into `input_dim`.
    pub fn from_input_dim(dof: Dof, input_dim: usize) -> Result<Self> {
        let d = frame_dim(dof);
        if input_dim < d {
            return Err(Error::config(format!("policy input of {input_dim} cannot hold one {d}-value frame")));
        }
        Ok(Self {
            dof,
            n_p: input_dim / d - 1,
            pad: input_dim % d,
        })
    }

    pub fn frames(&self) -> usize {
        self.n_p + 1
    }

    pub fn frame_dim(&self) -> usize {
        frame_dim(self.dof)
    }

    pub fn input_dim(&self) -> usize {
        self.frames() * self.frame_dim() + self.pad
    }

    pub fn validate(&self) -> Result<()> {
        if self.pad >= self.frame_dim() {
            return Err(Error::config(format!(
                "padding of {} would hold a whole {}-value frame; raise n_p instead",
                self.pad,
                self.frame_dim()
            )));
        }
        Ok(())
    }
}

/// Records the observation frame `[e_xy, v, F_c(, e_alpha, omega, T_c)]` of a
/// body `[x, y, alpha, vx, vy, omega]` under a world-frame effort `[Fx, Fy, T]`.
/// Vectors are expressed in the body frame.
pub fn record_frame(tape: &mut Tape, body: Var, effort_world: Var, objective: &Objective, dof: Dof) -> Result<Var> {
    let pos = tape.slice(body, 0, 2)?;
    let target = tape.constant(Tensor::from_slice(&objective.position));
    let e_world = tape.sub(target, pos)?;
    let vel = tape.slice(body, 3, 2)?;
    let force = tape.slice(effort_world, 0, 2)?;
    let pairs = tape.concat(&[e_world, vel, force])?;
    let alpha = tape.slice(body, 2, 1)?;
    let neg = tape.scale(alpha, -1.0)?;
    let local = tape.rotate2d(pairs, neg)?;
    if !dof.rotates() {
        return Ok(local);
    }
    let raw = objective.alpha - tape.value(alpha).item();
    let e_alpha = tape.offset(neg, objective.alpha + (wrap_angle(raw) - raw))?;
    let omega = tape.slice(body, 5, 1)?;
    let torque = tape.slice(effort_world, 2, 1)?;
    tape.concat(&[local, e_alpha, omega, torque])
}

/// Plain evaluation of [`record_frame`] for a simulator state.
pub fn observation_frame(state: &SimState, objective: &Objective, dof: Dof) -> Result<Vec<f64>> {
    let mut tape = Tape::inference();
    let body = tape.constant(state.body.to_tensor());
    let effort = tape.constant(Tensor::from_slice(&state.last_efforts.to_array()));
    let f = record_frame(&mut tape, body, effort, objective, dof)?;
    Ok(tape.value(f).data().to_vec())
}

/// Newest-first concatenation of `frames` (missing ones zero) plus padding.
pub fn assemble_input(layout: &ObservationLayout, frames: &[Vec<f64>]) -> Vec<f64> {
    let d = layout.frame_dim();
    let mut z = vec![0.0; layout.input_dim()];
    for (k, f) in frames.iter().take(layout.frames()).enumerate() {
        z[k * d..(k + 1) * d].copy_from_slice(&f[..d]);
    }
    z
}

/// Rolling window of past frames.
#[derive(Clone, Debug)]
pub struct ObservationHistory {
    layout: ObservationLayout,
    frames: VecDeque<Vec<f64>>,
}

impl ObservationHistory {
    pub fn new(layout: ObservationLayout) -> Self {
        Self {
            layout,
            frames: VecDeque::with_capacity(layout.frames()),
        }
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, frame: Vec<f64>) {
        if self.frames.len() == self.layout.frames() {
            self.frames.pop_back();
        }
        self.frames.push_front(frame);
    }

    /// Frames newest first.
    pub fn frames(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.frames.iter()
    }

    /// The raw (unnormalized) network input.
    pub fn input(&self) -> Vec<f64> {
        let v: Vec<Vec<f64>> = self.frames.iter().cloned().collect();
        assemble_input(&self.layout, &v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    /// `tanh`, scaled by the effort bounds.
    Bounded,
    /// Identity, as used for regression on effort targets.
    Linear,
}

/// Weights `[in, out]` and bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseLayer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[n_in, n_out]),
            b: Tensor::zeros(&[n_out]),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (n_in + n_out) as f64).sqrt();
        let data = (0..n_in * n_out).map(|_| rng.gen_range(-a..a)).collect();
        Self {
            w: Tensor::new(vec![n_in, n_out], data).expect("shape matches"),
            b: Tensor::zeros(&[n_out]),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn n_out(&self) -> usize {
        self.w.shape()[1]
    }
}

/// Layer sizes of the 2-DOF and 3-DOF networks.
pub fn default_dims(dof: Dof) -> [usize; 4] {
    match dof {
        Dof::Two => [16, 38, 38, 2],
        Dof::Three => [32, 32, 32, 3],
    }
}

/// Weight and bias count of a chain of dense layers.
pub fn count_parameters_for(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub layers: Vec<DenseLayer>,
    pub output: OutputKind,
    pub layout: ObservationLayout,
    pub f_max: f64,
    pub t_max: f64,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

/// Trainable tensors of a [`PolicyParams`] placed on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
}

impl ParamVars {
    /// Weights and biases, layer by layer.
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl PolicyParams {
    /// A freshly initialized network with identity normalization.
    pub fn init(
        dims: &[usize],
        layout: ObservationLayout,
        output: OutputKind,
        f_max: f64,
        t_max: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = dims.windows(2).map(|w| DenseLayer::glorot(w[0], w[1], rng)).collect();
        let p = Self::with_layers(layers, layout, output, f_max, t_max);
        p.validate()?;
        Ok(p)
    }

    /// The default architecture for an environment.
    pub fn for_environment(cfg: &EnvironmentConfig, output: OutputKind, rng: &mut impl Rng) -> Result<Self> {
        let layout = ObservationLayout::default_for(cfg.dof);
        Self::init(&default_dims(cfg.dof), layout, output, cfg.f_max, cfg.t_max, rng)
    }

    pub fn with_layers(
        layers: Vec<DenseLayer>,
        layout: ObservationLayout,
        output: OutputKind,
        f_max: f64,
        t_max: f64,
    ) -> Self {
        let n = layout.input_dim();
        Self {
            layers,
            output,
            layout,
            f_max,
            t_max,
            norm_mean: vec![0.0; n],
            norm_std: vec![1.0; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        let Some(first) = self.layers.first() else {
            return Err(Error::config("policy has no layers"));
        };
        if first.n_in() != self.layout.input_dim() {
            return Err(Error::config(format!(
                "first layer takes {} inputs but the observation layout yields {}",
                first.n_in(),
                self.layout.input_dim()
            )));
        }
        for pair in self.layers.windows(2) {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::config(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].n_out(),
                    pair[1].n_in()
                )));
            }
        }
        for l in &self.layers {
            if l.b.len() != l.n_out() {
                return Err(Error::config("bias length differs from layer width"));
            }
        }
        let out = self.output_dim();
        if out != self.layout.dof.channels() {
            return Err(Error::config(format!(
                "network emits {out} values but a {}-DOF body takes {}",
                self.layout.dof.channels(),
                self.layout.dof.channels()
            )));
        }
        if self.norm_mean.len() != first.n_in() || self.norm_std.len() != first.n_in() {
            return Err(Error::config("normalization statistics do not match the input size"));
        }
        if self.norm_std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::config("normalization scales must be positive"));
        }
        if !(self.f_max > 0.0 && self.t_max > 0.0) {
            return Err(Error::config("effort bounds must be positive"));
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].n_in()];
        d.extend(self.layers.iter().map(DenseLayer::n_out));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::n_out)
    }

    pub fn count_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn output_scale(&self) -> Vec<f64> {
        let mut s = vec![self.f_max, self.f_max, self.t_max];
        s.truncate(self.output_dim());
        s
    }

    /// Places the weights on a tape, as leaves when `trainable`.
    pub fn place(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ParamVars {
            layers: self.layers.iter().map(|l| (put(&l.w), put(&l.b))).collect(),
        }
    }

    /// Replaces the weights, in [`ParamVars::all`] order.
    pub fn set_flat(&mut self, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() != 2 * self.layers.len() {
            return Err(Error::shape("policy", "wrong number of parameter tensors"));
        }
        for (l, pair) in self.layers.iter_mut().zip(tensors.chunks(2)) {
            if pair[0].shape() != l.w.shape() || pair[1].shape() != l.b.shape() {
                return Err(Error::shape("policy", "parameter tensor shape changed"));
            }
            l.w = pair[0].clone();
            l.b = pair[1].clone();
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.w.clone(), l.b.clone()]).collect()
    }

    /// `(z - mean) / std`, for a single input `[in]` or a batch `[B, in]`.
    pub fn record_normalize(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let mean = tape.constant(Tensor::from_slice(&self.norm_mean));
        let inv = tape.constant(Tensor::vector(self.norm_std.iter().map(|s| 1.0 / s).collect()));
        let c = tape.sub(z, mean)?;
        tape.mul(c, inv)
    }

    /// Network output for a normalized input `[in]` (giving `[out]`) or a
    /// batch `[B, in]` (giving `[B, out]`).
    pub fn record_forward(&self, tape: &mut Tape, vars: &ParamVars, z: Var) -> Result<Var> {
        let shape = tape.value(z).shape().to_vec();
        let single = shape.len() == 1;
        let n_in = self.input_dim();
        if shape.last() != Some(&n_in) || shape.len() > 2 {
            return Err(Error::shape(
                "policy",
                format!("input of shape {shape:?} for a network taking {n_in} values"),
            ));
        }
        let mut h = if single { tape.reshape(z, vec![1, n_in])? } else { z };
        let last = vars.layers.len() - 1;
        for (k, &(w, b)) in vars.layers.iter().enumerate() {
            let a = tape.matmul(h, w)?;
            h = tape.add(a, b)?;
            if k < last {
                h = tape.relu(h)?;
            }
        }
        if self.output == OutputKind::Bounded {
            let t = tape.tanh(h)?;
            let s = tape.constant(Tensor::from_slice(&self.output_scale()));
            h = tape.mul(t, s)?;
        }
        if single {
            h = tape.reshape(h, vec![self.output_dim()])?;
        }
        Ok(h)
    }

    /// Normalizes a raw input and evaluates the network.
    pub fn act_raw(&self, z_raw: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let vars = self.place(&mut tape, false);
        let z = tape.constant(Tensor::from_slice(z_raw));
        let zn = self.record_normalize(&mut tape, z)?;
        let out = self.record_forward(&mut tape, &vars, zn)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Evaluates the network on an already normalized input.
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let vars = self.place(&mut tape, false);
        let z = tape.constant(Tensor::from_slice(z));
        let out = self.record_forward(&mut tape, &vars, z)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Sets per-input statistics from raw inputs. Padding and constant inputs
    /// keep unit scale.
    pub fn fit_normalization(&mut self, samples: &[Vec<f64>]) {
        let n = self.input_dim();
        let live = self.layout.frames() * self.layout.frame_dim();
        let mut mean = vec![0.0; n];
        let mut std = vec![1.0; n];
        if !samples.is_empty() {
            let k = samples.len() as f64;
            for i in 0..live {
                let m = samples.iter().map(|s| s[i]).sum::<f64>() / k;
                let v = samples.iter().map(|s| (s[i] - m).powi(2)).sum::<f64>() / k;
                mean[i] = m;
                std[i] = if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 };
            }
        }
        self.norm_mean = mean;
        self.norm_std = std;
    }

    /// Raises each frame channel's std to at least the matching entry of
    /// `frame_scales`.
    pub fn floor_normalization(&mut self, frame_scales: &[f64]) -> Result<()> {
        let fd = self.layout.frame_dim();
        if frame_scales.len() != fd {
            return Err(Error::shape("floor_normalization", format!("{} frame scales for {fd}-value frames", frame_scales.len())));
        }
        for (i, s) in self.norm_std.iter_mut().take(self.layout.frames() * fd).enumerate() {
            *s = s.max(frame_scales[i % fd]);
        }
        Ok(())
    }
}

const POLICY_MAGIC: &[u8; 4] = b"POL1";

fn write_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Writes a policy checkpoint (little endian).
pub fn write_checkpoint(w: &mut impl Write, p: &PolicyParams) -> Result<()> {
    w.write_all(POLICY_MAGIC)?;
    w.write_all(&(p.layers.len() as u32).to_le_bytes())?;
    for l in &p.layers {
        w.write_all(&(l.n_in() as u32).to_le_bytes())?;
        w.write_all(&(l.n_out() as u32).to_le_bytes())?;
    }
    for l in &p.layers {
        write_f64s(w, l.w.data())?;
        write_f64s(w, l.b.data())?;
    }
    write_f64s(w, &p.norm_mean)?;
    write_f64s(w, &p.norm_std)?;
    write_f64s(w, &[p.f_max, p.t_max])?;
    Ok(())
}

/// Reads a checkpoint. The body's DOF follows from the output width and the
/// observation layout from the input width.
pub fn read_checkpoint(r: &mut impl Read, output: OutputKind) -> Result<PolicyParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != POLICY_MAGIC {
        return Err(Error::format("policy checkpoint", "bad magic"));
    }
    let n = read_u32(r)? as usize;
    if n == 0 || n > 64 {
        return Err(Error::format("policy checkpoint", format!("{n} layers")));
    }
    let mut dims = Vec::with_capacity(n);
    for _ in 0..n {
        let a = read_u32(r)? as usize;
        let b = read_u32(r)? as usize;
        if a == 0 || b == 0 || a > 1 << 16 || b > 1 << 16 {
            return Err(Error::format("policy checkpoint", format!("layer size {a}x{b}")));
        }
        dims.push((a, b));
    }
    let mut layers = Vec::with_capacity(n);
    for &(a, b) in &dims {
        let w = Tensor::new(vec![a, b], read_f64s(r, a * b)?)?;
        let bias = Tensor::vector(read_f64s(r, b)?);
        layers.push(DenseLayer { w, b: bias });
    }
    let n_in = dims[0].0;
    let dof = match dims[n - 1].1 {
        2 => Dof::Two,
        3 => Dof::Three,
        k => return Err(Error::format("policy checkpoint", format!("{k} outputs"))),
    };
    let layout = ObservationLayout::from_input_dim(dof, n_in)
        .map_err(|e| Error::format("policy checkpoint", e.to_string()))?;
    let norm_mean = read_f64s(r, n_in)?;
    let norm_std = read_f64s(r, n_in)?;
    let bounds = read_f64s(r, 2)?;
    let p = PolicyParams {
        layers,
        output,
        layout,
        f_max: bounds[0],
        t_max: bounds[1],
        norm_mean,
        norm_std,
    };
    p.validate().map_err(|e| Error::format("policy checkpoint", e.to_string()))?;
    Ok(p)
}

pub fn save_checkpoint(path: &std::path::Path, p: &PolicyParams) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, p)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path, output: OutputKind) -> Result<PolicyParams> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f, output)
}

/// A trained network acting as a controller.
#[derive(Clone, Debug)]
pub struct PolicyController {
    params: PolicyParams,
    history: ObservationHistory,
    name: String,
}

impl PolicyController {
    pub fn new(params: PolicyParams) -> Self {
        let name = match params.output {
            OutputKind::Bounded => "Diff",
            OutputKind::Linear => "Sup",
        };
        Self::named(params, name)
    }

    pub fn named(params: PolicyParams, name: impl Into<String>) -> Self {
        Self {
            history: ObservationHistory::new(params.layout),
            params,
            name: name.into(),
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }
}

impl Controller for PolicyController {
    fn name(&self) -> &str {
        &self.name
    }

    fn reset(&mut self) {
        self.history.clear();
    }

    fn bounded(&self) -> bool {
        self.params.output == OutputKind::Bounded
    }

    fn act(&mut self, state: &SimState, objective: &Objective) -> Result<Effort> {
        self.history.push(observation_frame(state, objective, self.params.layout.dof)?);
        let out = self.params.act_raw(&self.history.input())?;
        Ok(Effort::from_slice(&out))
    }
}
