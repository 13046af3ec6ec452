//! Window loss: objective term O, proximity-gated velocity term V and the
//! effort term E.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rigid_body::Dof;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub beta_xy: f64,
    pub beta_alpha: f64,
    pub beta_xdot: f64,
    pub beta_alphadot: f64,
    pub beta_prox: f64,
    pub beta_f: f64,
    pub beta_t: f64,
    pub beta_df: f64,
    pub beta_dt: f64,
    /// Window length in control steps.
    pub l: usize,
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        beta_xy: 0.0,
        beta_alpha: 0.0,
        beta_xdot: 0.0,
        beta_alphadot: 0.0,
        beta_prox: 0.0,
        beta_f: 0.0,
        beta_t: 0.0,
        beta_df: 0.0,
        beta_dt: 0.0,
        l: 1,
    };

    pub fn default_for(dof: Dof) -> Self {
        match dof {
            Dof::Two => Self {
                beta_xy: 15.0,
                beta_xdot: 5.0,
                beta_f: 0.1,
                beta_df: 2.0,
                beta_prox: 0.1,
                l: 16,
                ..Self::ZERO
            },
            Dof::Three => Self {
                beta_xy: 5.0,
                beta_xdot: 5.0,
                beta_f: 0.1,
                beta_df: 1.0,
                beta_prox: 0.1,
                beta_alpha: 30.0,
                beta_alphadot: 0.05,
                beta_dt: 1.0,
                l: 16,
                ..Self::ZERO
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return Err(Error::config("loss horizon l must be at least 1"));
        }
        let betas = [
            self.beta_xy,
            self.beta_alpha,
            self.beta_xdot,
            self.beta_alphadot,
            self.beta_prox,
            self.beta_f,
            self.beta_t,
            self.beta_df,
            self.beta_dt,
        ];
        if betas.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::config("loss weights must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Zeroes the weight groups excluded by an ablation.
    pub fn ablated(mut self, a: Ablation) -> Self {
        if !a.velocity() {
            self.beta_xdot = 0.0;
            self.beta_alphadot = 0.0;
        }
        if !a.effort() {
            self.beta_f = 0.0;
            self.beta_t = 0.0;
            self.beta_df = 0.0;
            self.beta_dt = 0.0;
        }
        self
    }
}

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "OVE")]
    Ove,
    #[serde(rename = "OV")]
    Ov,
    #[serde(rename = "OE")]
    Oe,
    #[serde(rename = "O")]
    O,
}

impl Ablation {
    pub fn velocity(self) -> bool {
        matches!(self, Ablation::Ove | Ablation::Ov)
    }

    pub fn effort(self) -> bool {
        matches!(self, Ablation::Ove | Ablation::Oe)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Ove => "OVE",
            Ablation::Ov => "OV",
            Ablation::Oe => "OE",
            Ablation::O => "O",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "OVE" => Ok(Ablation::Ove),
            "OV" => Ok(Ablation::Ov),
            "OE" => Ok(Ablation::Oe),
            "O" => Ok(Ablation::O),
            _ => Err(Error::config(format!("unknown ablation `{s}` (valid: OVE, OV, OE, O)"))),
        }
    }
}

/// One step of a loss window.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepTrace {
    pub e_xy: [f64; 2],
    /// Wrapped to `(-pi, pi]`.
    pub e_alpha: f64,
    pub xdot: [f64; 2],
    pub alphadot: f64,
    pub force: [f64; 2],
    pub torque: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowTrace {
    pub steps: Vec<StepTrace>,
    /// Effort applied just before the window.
    pub prev_force: [f64; 2],
    pub prev_torque: f64,
}

/// One window step on a tape. `effort` is `[F_x, F_y, T]`.
#[derive(Clone, Copy, Debug)]
pub struct TapedStep {
    pub e_xy: Var,
    pub e_alpha: Var,
    pub xdot: Var,
    pub alphadot: Var,
    pub effort: Var,
}

#[derive(Clone, Debug)]
pub struct TapedWindow {
    pub steps: Vec<TapedStep>,
    pub prev_effort: Var,
}

/// Loss terms of one window.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub o: Var,
    pub v: Var,
    pub e: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub o: f64,
    pub v: f64,
    pub e: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossTerms {
        LossTerms {
            o: tape.scalar_value(self.o),
            v: tape.scalar_value(self.v),
            e: tape.scalar_value(self.e),
            total: tape.scalar_value(self.total),
        }
    }
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, x: Var) -> Result<Var> {
    match acc {
        Some(a) => tape.add(a, x),
        None => Ok(x),
    }
}

fn weighted_sum(tape: &mut Tape, parts: Vec<Var>, beta: f64, l: usize) -> Result<Var> {
    let mut acc = None;
    for p in parts {
        acc = Some(accumulate(tape, acc, p)?);
    }
    let s = acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    tape.scale(s, beta / l as f64)
}

/// `sum ||x||^2 / (beta_prox ||e||^2 + 1)` terms of V for one channel.
fn gated(tape: &mut Tape, x: Var, e: Var, beta_prox: f64) -> Result<Var> {
    let num = tape.sum_squares(x)?;
    let e2 = tape.sum_squares(e)?;
    let den = tape.scale(e2, beta_prox)?;
    let den = tape.offset(den, 1.0)?;
    tape.div(num, den)
}

pub fn record_objective_term(tape: &mut Tape, w: &TapedWindow, b: &LossWeights) -> Result<Var> {
    let l = w.steps.len();
    let xy = w.steps.iter().map(|s| tape.sum_squares(s.e_xy)).collect::<Result<Vec<_>>>()?;
    let a = w.steps.iter().map(|s| tape.sum_squares(s.e_alpha)).collect::<Result<Vec<_>>>()?;
    let o1 = weighted_sum(tape, xy, b.beta_xy, l)?;
    let o2 = weighted_sum(tape, a, b.beta_alpha, l)?;
    tape.add(o1, o2)
}

pub fn record_velocity_term(tape: &mut Tape, w: &TapedWindow, b: &LossWeights) -> Result<Var> {
    let l = w.steps.len();
    let lin = w
        .steps
        .iter()
        .map(|s| gated(tape, s.xdot, s.e_xy, b.beta_prox))
        .collect::<Result<Vec<_>>>()?;
    let ang = w
        .steps
        .iter()
        .map(|s| gated(tape, s.alphadot, s.e_alpha, b.beta_prox))
        .collect::<Result<Vec<_>>>()?;
    let v1 = weighted_sum(tape, lin, b.beta_xdot, l)?;
    let v2 = weighted_sum(tape, ang, b.beta_alphadot, l)?;
    tape.add(v1, v2)
}

pub fn record_effort_term(tape: &mut Tape, w: &TapedWindow, b: &LossWeights) -> Result<Var> {
    let l = w.steps.len();
    let (mut f, mut t, mut df, mut dt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut prev = w.prev_effort;
    for s in &w.steps {
        let force = tape.slice(s.effort, 0, 2)?;
        let torque = tape.slice(s.effort, 2, 1)?;
        let pf = tape.slice(prev, 0, 2)?;
        let pt = tape.slice(prev, 2, 1)?;
        f.push(tape.sum_squares(force)?);
        t.push(tape.sum_squares(torque)?);
        let d = tape.sub(force, pf)?;
        df.push(tape.sum_squares(d)?);
        let d = tape.sub(torque, pt)?;
        dt.push(tape.sum_squares(d)?);
        prev = s.effort;
    }
    let mut e = weighted_sum(tape, f, b.beta_f, l)?;
    for (parts, beta) in [(t, b.beta_t), (df, b.beta_df), (dt, b.beta_dt)] {
        let x = weighted_sum(tape, parts, beta, l)?;
        e = tape.add(e, x)?;
    }
    Ok(e)
}

/// `L = O + V + E` over a recorded window.
pub fn record_total_loss(tape: &mut Tape, w: &TapedWindow, b: &LossWeights) -> Result<LossVars> {
    if w.steps.is_empty() {
        return Err(Error::config("loss window is empty"));
    }
    let o = record_objective_term(tape, w, b)?;
    let v = record_velocity_term(tape, w, b)?;
    let e = record_effort_term(tape, w, b)?;
    let ov = tape.add(o, v)?;
    let total = tape.add(ov, e)?;
    Ok(LossVars { o, v, e, total })
}

/// Places a plain trace on a tape as leaves (or constants when the tape is
/// not recording).
pub fn place_trace(tape: &mut Tape, trace: &WindowTrace) -> TapedWindow {
    let steps = trace
        .steps
        .iter()
        .map(|s| TapedStep {
            e_xy: tape.leaf(Tensor::from_slice(&s.e_xy)),
            e_alpha: tape.leaf(Tensor::vector(vec![s.e_alpha])),
            xdot: tape.leaf(Tensor::from_slice(&s.xdot)),
            alphadot: tape.leaf(Tensor::vector(vec![s.alphadot])),
            effort: tape.leaf(Tensor::from_slice(&[s.force[0], s.force[1], s.torque])),
        })
        .collect();
    let prev_effort = tape.leaf(Tensor::from_slice(&[trace.prev_force[0], trace.prev_force[1], trace.prev_torque]));
    TapedWindow { steps, prev_effort }
}

fn evaluate(trace: &WindowTrace, b: &LossWeights) -> Result<LossTerms> {
    let mut tape = Tape::inference();
    let w = place_trace(&mut tape, trace);
    Ok(record_total_loss(&mut tape, &w, b)?.values(&tape))
}

pub fn objective_term(trace: &WindowTrace, b: &LossWeights) -> Result<f64> {
    Ok(evaluate(trace, b)?.o)
}

pub fn velocity_term(trace: &WindowTrace, b: &LossWeights) -> Result<f64> {
    Ok(evaluate(trace, b)?.v)
}

pub fn effort_term(trace: &WindowTrace, b: &LossWeights) -> Result<f64> {
    Ok(evaluate(trace, b)?.e)
}

pub fn total_loss(trace: &WindowTrace, b: &LossWeights) -> Result<f64> {
    Ok(evaluate(trace, b)?.total)
}

/// Negated total loss.
pub fn reward(trace: &WindowTrace, b: &LossWeights) -> Result<f64> {
    Ok(-total_loss(trace, b)?)
}

/// Per-term values of a plain trace.
pub fn loss_terms(trace: &WindowTrace, b: &LossWeights) -> Result<LossTerms> {
    evaluate(trace, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn step(e_xy: [f64; 2], xdot: [f64; 2], force: [f64; 2]) -> StepTrace {
        StepTrace {
            e_xy,
            xdot,
            force,
            ..Default::default()
        }
    }

    fn trace(steps: Vec<StepTrace>) -> WindowTrace {
        WindowTrace {
            steps,
            ..Default::default()
        }
    }

    // direct evaluation of the three sums, written independently of the tape
    fn oracle(t: &WindowTrace, b: &LossWeights) -> (f64, f64, f64) {
        let l = t.steps.len() as f64;
        let n2 = |v: [f64; 2]| v[0] * v[0] + v[1] * v[1];
        let (mut o, mut v, mut e) = (0.0, 0.0, 0.0);
        let (mut pf, mut pt) = (t.prev_force, t.prev_torque);
        for s in &t.steps {
            o += b.beta_xy * n2(s.e_xy) + b.beta_alpha * s.e_alpha * s.e_alpha;
            v += b.beta_xdot * n2(s.xdot) / (b.beta_prox * n2(s.e_xy) + 1.0)
                + b.beta_alphadot * s.alphadot * s.alphadot / (b.beta_prox * s.e_alpha * s.e_alpha + 1.0);
            let df = [s.force[0] - pf[0], s.force[1] - pf[1]];
            e += b.beta_f * n2(s.force)
                + b.beta_t * s.torque * s.torque
                + b.beta_df * n2(df)
                + b.beta_dt * (s.torque - pt) * (s.torque - pt);
            pf = s.force;
            pt = s.torque;
        }
        (o / l, v / l, e / l)
    }

    #[test]
    fn objective_examples() {
        let b = LossWeights { beta_xy: 5.0, l: 2, ..LossWeights::ZERO };
        let t = trace(vec![step([1.0, 0.0], [0.0; 2], [0.0; 2]), step([0.0, 1.0], [0.0; 2], [0.0; 2])]);
        assert!((objective_term(&t, &b).unwrap() - 5.0).abs() < 1e-12);
        let b = LossWeights { beta_alpha: 30.0, ..LossWeights::ZERO };
        let t = trace(vec![StepTrace { e_alpha: 0.1, ..Default::default() }]);
        assert!((objective_term(&t, &b).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn velocity_examples() {
        let b = LossWeights { beta_xdot: 5.0, beta_prox: 0.1, ..LossWeights::ZERO };
        let far = trace(vec![step([3.0, 4.0], [2.0, 0.0], [0.0; 2])]);
        assert!((velocity_term(&far, &b).unwrap() - 5.0 * 4.0 / 3.5).abs() < 1e-12);
        let near = trace(vec![step([0.0, 0.0], [2.0, 0.0], [0.0; 2])]);
        assert!((velocity_term(&near, &b).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn effort_examples() {
        let b = LossWeights { beta_f: 0.1, beta_df: 1.0, ..LossWeights::ZERO };
        let t = trace(vec![step([0.0; 2], [0.0; 2], [3.0, 4.0])]);
        assert!((effort_term(&t, &b).unwrap() - 27.5).abs() < 1e-12);
        let b = LossWeights { beta_df: 1.0, beta_dt: 1.0, l: 3, ..LossWeights::ZERO };
        let mut c = trace(vec![StepTrace { force: [2.0, -1.0], torque: 5.0, ..Default::default() }; 3]);
        c.prev_force = [2.0, -1.0];
        c.prev_torque = 5.0;
        assert_eq!(effort_term(&c, &b).unwrap(), 0.0);
    }

    #[test]
    fn total_is_the_sum_of_the_examples() {
        let b = LossWeights {
            beta_xy: 5.0,
            beta_xdot: 5.0,
            beta_prox: 0.1,
            beta_f: 0.1,
            beta_df: 1.0,
            ..LossWeights::ZERO
        };
        // one step with e=(1,2) gives O = 25, so build the example sum explicitly
        let t = trace(vec![step([3.0, 4.0], [2.0, 0.0], [3.0, 4.0])]);
        let terms = loss_terms(&t, &b).unwrap();
        assert!((terms.o - 125.0).abs() < 1e-12);
        assert!((terms.v - 5.0 * 4.0 / 3.5).abs() < 1e-12);
        assert!((terms.e - 27.5).abs() < 1e-12);
        assert!((terms.total - (125.0 + 5.0 * 4.0 / 3.5 + 27.5)).abs() < 1e-12);
        assert_eq!(reward(&t, &b).unwrap(), -terms.total);
        assert_eq!(total_loss(&trace(vec![StepTrace::default(); 4]), &LossWeights::default_for(Dof::Three)).unwrap(), 0.0);
    }

    #[test]
    fn matches_direct_oracle_on_random_windows() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for dof in [Dof::Two, Dof::Three] {
            let b = LossWeights { beta_t: 0.3, ..LossWeights::default_for(dof) };
            let mut r = || rng.gen_range(-3.0..3.0);
            let steps = (0..7)
                .map(|_| StepTrace {
                    e_xy: [r(), r()],
                    e_alpha: r(),
                    xdot: [r(), r()],
                    alphadot: r(),
                    force: [r(), r()],
                    torque: r(),
                })
                .collect();
            let t = WindowTrace { steps, prev_force: [r(), r()], prev_torque: r() };
            let (o, v, e) = oracle(&t, &b);
            let got = loss_terms(&t, &b).unwrap();
            assert!((got.o - o).abs() < 1e-12 * o.max(1.0));
            assert!((got.v - v).abs() < 1e-12 * v.max(1.0));
            assert!((got.e - e).abs() < 1e-12 * e.max(1.0));
        }
    }

    #[test]
    fn doubling_a_weight_doubles_its_term() {
        let t = trace(vec![step([1.0, -2.0], [0.5, 0.1], [3.0, 1.0]), step([0.2, 0.4], [0.0, 1.0], [-1.0, 2.0])]);
        let b = LossWeights::default_for(Dof::Two);
        let base = loss_terms(&t, &b).unwrap();
        let twice = loss_terms(&t, &LossWeights { beta_xy: 2.0 * b.beta_xy, ..b }).unwrap();
        assert!((twice.o - 2.0 * base.o).abs() < 1e-12);
        assert_eq!(twice.v, base.v);
    }

    #[test]
    fn velocity_gating_is_monotone_in_distance() {
        let b = LossWeights::default_for(Dof::Two);
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let d = 0.5 * k as f64;
            let v = velocity_term(&trace(vec![step([d, 0.0], [1.0, 1.0], [0.0; 2])]), &b).unwrap();
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn ablations_zero_weight_groups() {
        let b = LossWeights::default_for(Dof::Three);
        let ov = b.ablated("OV".parse().unwrap());
        assert_eq!((ov.beta_f, ov.beta_t, ov.beta_df, ov.beta_dt), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(ov.beta_xdot, 5.0);
        let oe = b.ablated(Ablation::Oe);
        assert_eq!((oe.beta_xdot, oe.beta_alphadot), (0.0, 0.0));
        assert_eq!(oe.beta_df, 1.0);
        let o = b.ablated(Ablation::O);
        assert_eq!((o.beta_xdot, o.beta_f, o.beta_xy, o.beta_alpha), (0.0, 0.0, 5.0, 30.0));
        assert_eq!(b.ablated(Ablation::Ove), b);
        assert!("OVX".parse::<Ablation>().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let b = LossWeights { beta_t: 0.2, ..LossWeights::default_for(Dof::Three) };
        let point = Tensor::vector(vec![0.7, -1.2, 0.3, 0.4, -0.8, 0.8, 2.0, -3.0, 4.0, 1.5, 0.5, -2.0]);
        // a two-step window whose second step is parameterized by `x`
        let f = |tape: &mut Tape, x: Var| -> Result<Var> {
            let first = place_trace(
                tape,
                &trace(vec![StepTrace {
                    e_xy: [1.0, 0.5],
                    e_alpha: 0.2,
                    xdot: [0.1, 0.0],
                    alphadot: 0.01,
                    force: [3.0, -2.0],
                    torque: 10.0,
                }]),
            );
            let s = |tape: &mut Tape, a, n| tape.slice(x, a, n);
            let second = TapedStep {
                e_xy: s(tape, 0, 2)?,
                e_alpha: s(tape, 2, 1)?,
                xdot: s(tape, 3, 2)?,
                alphadot: s(tape, 5, 1)?,
                effort: s(tape, 6, 3)?,
            };
            let w = TapedWindow {
                steps: vec![first.steps[0], second],
                prev_effort: s(tape, 9, 3)?,
            };
            Ok(record_total_loss(tape, &w, &b)?.total)
        };
        let report = grad_check(f, &point, 1e-4).unwrap();
        assert!(report.passes(1e-8), "{report:?}");
    }
}
