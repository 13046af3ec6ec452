//! Rollouts, steady-state error metrics and controller comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::Controller;
use crate::environment::{Effort, EnvironmentConfig, EnvironmentId, Objective, ObjectiveSchedule, Simulator};
use crate::error::{Error, Result};
use crate::rigid_body::{wrap_angle, BodyState};

/// Hold time of each objective in the test schedules (time units).
pub const TEST_HOLD: f64 = 100.0;
/// Length of the Hold-environment test (time units).
pub const HOLD_TEST_DURATION: f64 = 500.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub step: usize,
    pub t: f64,
    pub segment: usize,
    /// State at `t`, before the control of this step is applied.
    pub body: BodyState,
    /// Control applied during the step, world frame.
    pub effort: Effort,
    pub objective: Objective,
    pub fluid_force: [f64; 2],
    pub fluid_torque: f64,
}

impl TrajectoryStep {
    pub fn spatial_error(&self) -> f64 {
        let dx = self.objective.position[0] - self.body.position[0];
        let dy = self.objective.position[1] - self.body.position[1];
        dx.hypot(dy)
    }

    pub fn angular_error(&self) -> f64 {
        wrap_angle(self.objective.alpha - self.body.alpha).abs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    /// Time between recorded steps.
    pub dt: f64,
    pub steps: Vec<TrajectoryStep>,
    /// Step at which the body left the domain.
    pub terminated_at: Option<usize>,
}

const CSV_HEADER: &str = "step,t,segment,x,y,alpha,vx,vy,omega,fx,fy,torque,obj_x,obj_y,obj_alpha,fluid_fx,fluid_fy,fluid_torque,e_xy,e_alpha";

impl TrajectoryRecord {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for s in &self.steps {
            let b = &s.body;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.step,
                s.t,
                s.segment,
                b.position[0],
                b.position[1],
                b.alpha,
                b.velocity[0],
                b.velocity[1],
                b.omega,
                s.effort.force[0],
                s.effort.force[1],
                s.effort.torque,
                s.objective.position[0],
                s.objective.position[1],
                s.objective.alpha,
                s.fluid_force[0],
                s.fluid_force[1],
                s.fluid_torque,
                s.spatial_error(),
                s.angular_error()
            )?;
        }
        Ok(())
    }

    /// Parses a trajectory CSV. Objective start times are not stored, so
    /// they are reconstructed from the first step of each segment.
    pub fn read_csv(r: impl BufRead, dt: f64) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != CSV_HEADER {
            return Err(Error::format("trajectory csv", "unexpected header"));
        }
        let mut steps = Vec::new();
        let mut starts: BTreeMap<usize, f64> = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format("trajectory csv", format!("line {}: {e}", n + 2)))?;
            if v.len() != 20 {
                return Err(Error::format("trajectory csv", format!("line {}: {} columns", n + 2, v.len())));
            }
            let segment = v[2] as usize;
            let start = *starts.entry(segment).or_insert(v[1]);
            steps.push(TrajectoryStep {
                step: v[0] as usize,
                t: v[1],
                segment,
                body: BodyState {
                    position: [v[3], v[4]],
                    alpha: v[5],
                    velocity: [v[6], v[7]],
                    omega: v[8],
                },
                effort: Effort::new(v[9], v[10], v[11]),
                objective: Objective {
                    start_time: start,
                    position: [v[12], v[13]],
                    alpha: v[14],
                },
                fluid_force: [v[15], v[16]],
                fluid_torque: v[17],
            });
        }
        Ok(Self { dt, steps, terminated_at: None })
    }
}

/// Runs `controller` for `n_steps` control steps from a fresh reset.
pub fn rollout(
    sim: &Simulator,
    controller: &mut dyn Controller,
    schedule: &ObjectiveSchedule,
    n_steps: usize,
) -> Result<TrajectoryRecord> {
    let dt = sim.cfg.control_dt();
    let mut state = sim.reset()?;
    controller.reset();
    let mut steps = Vec::with_capacity(n_steps);
    let mut segment = 0;
    let mut terminated_at = None;
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let idx = schedule.index_at(t);
        if idx != segment {
            controller.objective_changed();
            segment = idx;
        }
        let objective = schedule.objectives[idx];
        let effort = controller.act(&state, &objective)?;
        let (next, info) = match sim.control_step(&state, effort, controller.bounded()) {
            Ok(r) => r,
            Err(Error::OutOfDomain { step, x, y, .. }) => {
                log::warn!("{} left the domain at ({x:.2}, {y:.2}), solver step {step}", controller.name());
                terminated_at = Some(k);
                break;
            }
            Err(e) => return Err(e),
        };
        steps.push(TrajectoryStep {
            step: k,
            t,
            segment,
            body: state.body,
            effort: info.applied,
            objective,
            fluid_force: info.fluid_force,
            fluid_torque: info.fluid_torque,
        });
        if !next.body.is_finite() {
            terminated_at = Some(k + 1);
            break;
        }
        state = next;
    }
    Ok(TrajectoryRecord { dt, steps, terminated_at })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentStats {
    pub index: usize,
    pub first_step: usize,
    pub steps: usize,
    /// First step of the averaging window.
    pub window_start: usize,
    pub spatial: f64,
    pub angular: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteadyStateError {
    pub spatial: MeanStd,
    pub angular: MeanStd,
    pub segments: Vec<SegmentStats>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Average tracking error over the last three quarters of every objective
/// segment (or the whole episode in `hold_mode`).
pub fn steady_state_error(traj: &TrajectoryRecord, schedule: &ObjectiveSchedule, hold_mode: bool) -> SteadyStateError {
    let (mut seg_xy, mut seg_a) = (Vec::new(), Vec::new());
    let (mut all_xy, mut all_a) = (Vec::new(), Vec::new());
    let mut segments = Vec::new();
    let groups: Vec<(usize, Vec<&TrajectoryStep>)> = if hold_mode {
        vec![(0, traj.steps.iter().collect())]
    } else {
        (0..schedule.objectives.len())
            .map(|i| (i, traj.steps.iter().filter(|s| s.segment == i).collect()))
            .collect()
    };
    for (index, steps) in groups {
        if steps.is_empty() {
            log::warn!("objective segment {index} has no recorded steps; excluded");
            continue;
        }
        let n = steps.len();
        let from = if hold_mode { 0 } else { n.div_ceil(4) };
        let xy: Vec<f64> = steps[from..].iter().map(|s| s.spatial_error()).collect();
        let a: Vec<f64> = steps[from..].iter().map(|s| s.angular_error()).collect();
        if xy.is_empty() {
            log::warn!("objective segment {index} is too short for a steady-state window; excluded");
            continue;
        }
        segments.push(SegmentStats {
            index,
            first_step: steps[0].step,
            steps: n,
            window_start: steps[from].step,
            spatial: mean(&xy),
            angular: mean(&a),
        });
        seg_xy.push(mean(&xy));
        seg_a.push(mean(&a));
        all_xy.extend(xy);
        all_a.extend(a);
    }
    if segments.is_empty() {
        let nan = MeanStd { mean: f64::NAN, std: f64::NAN };
        return SteadyStateError { spatial: nan, angular: nan, segments };
    }
    SteadyStateError {
        spatial: MeanStd { mean: mean(&seg_xy), std: std_dev(&all_xy) },
        angular: MeanStd { mean: mean(&seg_a), std: std_dev(&all_a) },
        segments,
    }
}

/// A test case: a schedule and how to score it.
#[derive(Clone, Debug, PartialEq)]
pub struct TestCase {
    pub name: String,
    pub schedule: ObjectiveSchedule,
    pub hold_mode: bool,
}

impl TestCase {
    pub fn n_steps(&self, cfg: &EnvironmentConfig) -> usize {
        (self.schedule.duration() / cfg.control_dt()).round() as usize
    }
}

/// Targets tracing an "N": up the left side, diagonally down, up the right.
pub fn n_shaped_schedule(with_angle: bool) -> ObjectiveSchedule {
    let a = if with_angle { 0.5 } else { 0.0 };
    ObjectiveSchedule::sequence(
        &[([35.0, 35.0], 0.0), ([35.0, 65.0], a), ([65.0, 35.0], -a), ([65.0, 65.0], 0.0)],
        TEST_HOLD,
    )
}

/// Default test cases of an environment: `n_sims` random target sequences of
/// `targets` objectives each, or the single station-keeping run of Hold.
pub fn test_cases(cfg: &EnvironmentConfig, seed: u64, n_sims: usize, targets: usize) -> Vec<TestCase> {
    if cfg.id == EnvironmentId::Hold {
        let schedule = ObjectiveSchedule::single(cfg.start_position, 0.0, HOLD_TEST_DURATION);
        return vec![TestCase { name: "hold".into(), schedule, hold_mode: true }];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_sims)
        .map(|k| TestCase {
            name: format!("sim{k}"),
            schedule: ObjectiveSchedule::random(&mut rng, targets, TEST_HOLD, 25.0, 75.0, cfg.dof.rotates()),
            hold_mode: false,
        })
        .collect()
}

/// Resolves a schedule name: `random` (default test cases), `n-shape`, or
/// `hold`.
pub fn named_cases(cfg: &EnvironmentConfig, name: &str, seed: u64, n_sims: usize, targets: usize) -> Result<Vec<TestCase>> {
    match name {
        "random" => Ok(test_cases(cfg, seed, n_sims, targets)),
        "n-shape" => Ok(vec![TestCase {
            name: "n-shape".into(),
            schedule: n_shaped_schedule(cfg.dof.rotates()),
            hold_mode: false,
        }]),
        "hold" => Ok(vec![TestCase {
            name: "hold".into(),
            schedule: ObjectiveSchedule::single(cfg.start_position, 0.0, HOLD_TEST_DURATION),
            hold_mode: true,
        }]),
        _ => Err(Error::config(format!("unknown schedule `{name}` (valid: random, n-shape, hold)"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub controller: String,
    pub environment: EnvironmentId,
    pub test: String,
    pub seed: u64,
    pub steady: SteadyStateError,
    pub mean_spatial: f64,
    pub mean_angular: f64,
    pub max_force: f64,
    pub max_torque: f64,
    pub steps: usize,
    pub terminated_at: Option<usize>,
}

impl MetricsReport {
    pub fn complete(&self) -> bool {
        self.terminated_at.is_none()
    }

    pub fn status(&self) -> String {
        match self.terminated_at {
            None => "COMPLETE".into(),
            Some(k) => format!("INCOMPLETE@{k}"),
        }
    }
}

pub fn metrics(
    traj: &TrajectoryRecord,
    case: &TestCase,
    controller: &str,
    environment: EnvironmentId,
    seed: u64,
) -> MetricsReport {
    let xy: Vec<f64> = traj.steps.iter().map(TrajectoryStep::spatial_error).collect();
    let a: Vec<f64> = traj.steps.iter().map(TrajectoryStep::angular_error).collect();
    let max_force = traj.steps.iter().map(|s| s.effort.force[0].hypot(s.effort.force[1])).fold(0.0, f64::max);
    let max_torque = traj.steps.iter().map(|s| s.effort.torque.abs()).fold(0.0, f64::max);
    MetricsReport {
        controller: controller.to_string(),
        environment,
        test: case.name.clone(),
        seed,
        steady: steady_state_error(traj, &case.schedule, case.hold_mode),
        mean_spatial: if xy.is_empty() { f64::NAN } else { mean(&xy) },
        mean_angular: if a.is_empty() { f64::NAN } else { mean(&a) },
        max_force,
        max_torque,
        steps: traj.steps.len(),
        terminated_at: traj.terminated_at,
    }
}

/// Rolls out one test case and scores it.
pub fn run_test(
    sim: &Simulator,
    controller: &mut dyn Controller,
    case: &TestCase,
    seed: u64,
) -> Result<(TrajectoryRecord, MetricsReport)> {
    case.schedule.validate(sim.cfg.domain_size)?;
    let traj = rollout(sim, controller, &case.schedule, case.n_steps(&sim.cfg))?;
    let name = controller.name().to_string();
    let report = metrics(&traj, case, &name, sim.cfg.id, seed);
    Ok((traj, report))
}

pub const REPORT_HEADER: &str = "controller,environment,test,seed,status,ss_xy_mean,ss_xy_std,ss_alpha_mean,ss_alpha_std,mean_xy,mean_alpha,max_force,max_torque,steps";

pub fn write_reports_csv(w: &mut impl Write, reports: &[MetricsReport]) -> Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.controller,
            r.environment,
            r.test,
            r.seed,
            r.status(),
            r.steady.spatial.mean,
            r.steady.spatial.std,
            r.steady.angular.mean,
            r.steady.angular.std,
            r.mean_spatial,
            r.mean_angular,
            r.max_force,
            r.max_torque,
            r.steps
        )?;
    }
    Ok(())
}

/// Controller column order of the comparison table.
pub const COLUMN_ORDER: [&str; 5] = ["RL", "LS", "Sup", "PID", "Diff"];

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub test: String,
    pub cells: BTreeMap<String, MeanStd>,
    pub best: String,
    pub incomplete: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Combines equally weighted `(mean, std)` groups into one.
fn pool(parts: &[MeanStd]) -> MeanStd {
    let m = parts.iter().map(|p| p.mean).sum::<f64>() / parts.len() as f64;
    let v = parts.iter().map(|p| p.std * p.std + (p.mean - m).powi(2)).sum::<f64>() / parts.len() as f64;
    MeanStd { mean: m, std: v.sqrt() }
}

/// Steady-state spatial error per environment (rows) and controller
/// (columns); several reports of one pair are pooled.
pub fn compare(reports: &[MetricsReport]) -> ComparisonTable {
    let mut groups: BTreeMap<String, BTreeMap<String, Vec<MeanStd>>> = BTreeMap::new();
    let mut incomplete: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in reports {
        let test = r.environment.name().to_string();
        groups
            .entry(test.clone())
            .or_default()
            .entry(r.controller.clone())
            .or_default()
            .push(r.steady.spatial);
        if !r.complete() {
            let v = incomplete.entry(test).or_default();
            if !v.contains(&r.controller) {
                v.push(r.controller.clone());
            }
        }
    }
    let mut names: Vec<String> = groups.values().flat_map(|g| g.keys().cloned()).collect();
    names.sort();
    names.dedup();
    let mut columns: Vec<String> = COLUMN_ORDER
        .iter()
        .filter(|c| names.iter().any(|n| n == *c))
        .map(|c| c.to_string())
        .collect();
    columns.extend(names.into_iter().filter(|n| !COLUMN_ORDER.contains(&n.as_str())));
    let rows = groups
        .into_iter()
        .map(|(test, g)| {
            let cells: BTreeMap<String, MeanStd> = g.into_iter().map(|(c, parts)| (c, pool(&parts))).collect();
            let best = cells
                .iter()
                .filter(|(_, v)| v.mean.is_finite())
                .min_by(|a, b| {
                    a.1.mean
                        .total_cmp(&b.1.mean)
                        .then(a.1.std.total_cmp(&b.1.std))
                        .then(a.0.cmp(b.0))
                })
                .map(|(c, _)| c.clone())
                .unwrap_or_default();
            let incomplete = incomplete.remove(&test).unwrap_or_default();
            ComparisonRow { test, cells, best, incomplete }
        })
        .collect();
    ComparisonTable { columns, rows }
}

impl ComparisonTable {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let mut head = String::from("test");
        for c in &self.columns {
            write!(head, ",{c}_mean,{c}_std").unwrap();
        }
        writeln!(w, "{head},best")?;
        for r in &self.rows {
            let mut line = r.test.clone();
            for c in &self.columns {
                match r.cells.get(c) {
                    Some(v) => write!(line, ",{},{}", v.mean, v.std).unwrap(),
                    None => line.push_str(",,"),
                }
            }
            writeln!(w, "{line},{}", r.best)?;
        }
        Ok(())
    }

    /// Aligned text; the best entry of a row is starred and incomplete runs
    /// are marked with `!`.
    pub fn to_text(&self) -> String {
        let mut grid: Vec<Vec<String>> = vec![std::iter::once("test".to_string()).chain(self.columns.iter().cloned()).collect()];
        for r in &self.rows {
            let mut line = vec![r.test.clone()];
            for c in &self.columns {
                line.push(match r.cells.get(c) {
                    Some(v) => {
                        let star = if *c == r.best { "*" } else { "" };
                        let bang = if r.incomplete.contains(c) { "!" } else { "" };
                        format!("{:.4} ± {:.4}{star}{bang}", v.mean, v.std)
                    }
                    None => "-".into(),
                });
            }
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|k| grid.iter().map(|l| l[k].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in grid {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj_from_errors(errors: &[f64], segment_len: usize) -> (TrajectoryRecord, ObjectiveSchedule) {
        let n_seg = errors.len().div_ceil(segment_len);
        let schedule = ObjectiveSchedule::sequence(&vec![([50.0, 50.0], 0.0); n_seg], segment_len as f64 * 0.1);
        let steps = errors
            .iter()
            .enumerate()
            .map(|(k, &e)| TrajectoryStep {
                step: k,
                t: k as f64 * 0.1,
                segment: k / segment_len,
                body: BodyState::at_rest([50.0 - e, 50.0], 0.0),
                effort: Effort::default(),
                objective: schedule.objectives[k / segment_len],
                fluid_force: [0.0; 2],
                fluid_torque: 0.0,
            })
            .collect();
        (TrajectoryRecord { dt: 0.1, steps, terminated_at: None }, schedule)
    }

    #[test]
    fn constant_error() {
        let (t, s) = traj_from_errors(&[2.0; 200], 100);
        let ss = steady_state_error(&t, &s, false);
        assert!((ss.spatial.mean - 2.0).abs() < 1e-12);
        assert!(ss.spatial.std.abs() < 1e-12);
        assert_eq!(ss.segments.len(), 2);
    }

    #[test]
    fn last_three_quarters_window() {
        let errors: Vec<f64> = (0..100).map(|k| if k < 25 { 4.0 } else { 1.0 }).collect();
        let (t, s) = traj_from_errors(&errors, 100);
        let ss = steady_state_error(&t, &s, false);
        assert!((ss.spatial.mean - 1.0).abs() < 1e-12);
        assert_eq!(ss.segments[0].window_start, 25);
    }

    #[test]
    fn hold_mode_uses_whole_episode() {
        let errors: Vec<f64> = (0..100).map(|k| if k % 2 == 0 { 0.0 } else { 2.0 }).collect();
        let (t, s) = traj_from_errors(&errors, 100);
        let ss = steady_state_error(&t, &s, true);
        assert!((ss.spatial.mean - 1.0).abs() < 1e-12);
        assert!((ss.spatial.std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_prefix_is_excluded() {
        let mut errors = vec![0.5; 100];
        for e in errors.iter_mut().take(20) {
            *e = 1e3;
        }
        let (t, s) = traj_from_errors(&errors, 100);
        assert!((steady_state_error(&t, &s, false).spatial.mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn missing_segments_are_skipped() {
        let (mut t, s) = traj_from_errors(&[1.0; 200], 100);
        t.steps.truncate(100);
        t.terminated_at = Some(100);
        let ss = steady_state_error(&t, &s, false);
        assert_eq!(ss.segments.len(), 1);
        assert_eq!(ss.spatial.mean, 1.0);
    }

    #[test]
    fn csv_round_trip_preserves_metrics() {
        let errors: Vec<f64> = (0..60).map(|k| 0.1 * k as f64).collect();
        let (t, s) = traj_from_errors(&errors, 20);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = TrajectoryRecord::read_csv(buf.as_slice(), 0.1).unwrap();
        assert_eq!(back.steps, t.steps);
        assert_eq!(steady_state_error(&back, &s, false), steady_state_error(&t, &s, false));
    }

    fn report(controller: &str, env: EnvironmentId, mean: f64, std: f64) -> MetricsReport {
        MetricsReport {
            controller: controller.into(),
            environment: env,
            test: "sim0".into(),
            seed: 0,
            steady: SteadyStateError {
                spatial: MeanStd { mean, std },
                angular: MeanStd::default(),
                segments: Vec::new(),
            },
            mean_spatial: mean,
            mean_angular: 0.0,
            max_force: 0.0,
            max_torque: 0.0,
            steps: 1,
            terminated_at: None,
        }
    }

    #[test]
    fn single_report_gives_one_row() {
        let t = compare(&[report("PID", EnvironmentId::BaseNR, 1.0, 0.1)]);
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.columns, vec!["PID"]);
        assert_eq!(t.rows[0].best, "PID");
    }

    #[test]
    fn ties_break_on_std_then_name() {
        let t = compare(&[
            report("PID", EnvironmentId::Base, 1.0, 0.2),
            report("Diff", EnvironmentId::Base, 1.0, 0.1),
            report("LS", EnvironmentId::Base, 2.0, 0.0),
        ]);
        assert_eq!(t.rows[0].best, "Diff");
        assert_eq!(t.columns, vec!["LS", "PID", "Diff"]);
        let t = compare(&[report("PID", EnvironmentId::Base, 1.0, 0.1), report("Diff", EnvironmentId::Base, 1.0, 0.1)]);
        assert_eq!(t.rows[0].best, "Diff");
        let text = t.to_text();
        assert!(text.contains("1.0000 ± 0.1000*"));
    }

    #[test]
    fn pooling_combines_simulations() {
        let p = pool(&[MeanStd { mean: 1.0, std: 0.0 }, MeanStd { mean: 3.0, std: 0.0 }]);
        assert_eq!(p, MeanStd { mean: 2.0, std: 1.0 });
    }
}
