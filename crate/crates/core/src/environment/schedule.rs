use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub start_time: f64,
    pub position: [f64; 2],
    #[serde(default)]
    pub alpha: f64,
}

/// Targets that take over one after another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSchedule {
    pub objectives: Vec<Objective>,
    /// How long each objective is held (time units).
    pub hold: f64,
}

impl ObjectiveSchedule {
    /// Objectives held for `hold` time units each, starting at `t = 0`.
    pub fn sequence(targets: &[([f64; 2], f64)], hold: f64) -> Self {
        let objectives = targets
            .iter()
            .enumerate()
            .map(|(k, &(position, alpha))| Objective {
                start_time: k as f64 * hold,
                position,
                alpha,
            })
            .collect();
        Self { objectives, hold }
    }

    pub fn single(position: [f64; 2], alpha: f64, hold: f64) -> Self {
        Self::sequence(&[(position, alpha)], hold)
    }

    pub fn validate(&self, domain: f64) -> Result<()> {
        if self.objectives.is_empty() {
            return Err(Error::config("objective schedule is empty"));
        }
        if !(self.hold > 0.0) {
            return Err(Error::config("objective hold time must be positive"));
        }
        for w in self.objectives.windows(2) {
            if !(w[1].start_time > w[0].start_time) {
                return Err(Error::config("objective start times must be strictly increasing"));
            }
        }
        for o in &self.objectives {
            if o.position.iter().any(|&c| !(c > 0.0 && c < domain)) {
                return Err(Error::config(format!("objective {:?} lies outside the domain", o.position)));
            }
        }
        Ok(())
    }

    /// Index of the objective active at time `t`.
    pub fn index_at(&self, t: f64) -> usize {
        // small slack so `k * dt` lands in the segment it nominally starts
        let eps = 1e-9 * self.hold.max(1.0);
        self.objectives.iter().rposition(|o| o.start_time <= t + eps).unwrap_or(0)
    }

    pub fn at(&self, t: f64) -> &Objective {
        &self.objectives[self.index_at(t)]
    }

    /// End of the whole schedule.
    pub fn duration(&self) -> f64 {
        self.objectives.last().map_or(0.0, |o| o.start_time + self.hold)
    }

    /// `n` objectives with uniform positions in `[lo, hi]^2` and, when
    /// `with_angle`, angles in `[-pi/2, pi/2]`.
    pub fn random(rng: &mut impl Rng, n: usize, hold: f64, lo: f64, hi: f64, with_angle: bool) -> Self {
        let targets: Vec<_> = (0..n)
            .map(|_| {
                let p = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
                let a = if with_angle { rng.gen_range(-FRAC_PI_2..=FRAC_PI_2) } else { 0.0 };
                (p, a)
            })
            .collect();
        Self::sequence(&targets, hold)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingWindow {
    pub t_start: f64,
    /// Exclusive.
    pub t_end: f64,
    #[serde(default)]
    pub force: [f64; 2],
    #[serde(default)]
    pub torque: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingSchedule {
    pub windows: Vec<ForcingWindow>,
}

impl ForcingSchedule {
    /// Three disturbances: along x, along y, then a torque.
    pub fn hold_default() -> Self {
        Self {
            windows: vec![
                ForcingWindow { t_start: 100.0, t_end: 180.0, force: [25.0, 0.0], torque: 0.0 },
                ForcingWindow { t_start: 250.0, t_end: 330.0, force: [0.0, 25.0], torque: 0.0 },
                ForcingWindow { t_start: 380.0, t_end: 460.0, force: [0.0, 0.0], torque: 1000.0 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut w = self.windows.clone();
        w.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
        for win in &w {
            if !(win.t_end > win.t_start) {
                return Err(Error::config(format!("forcing window [{}, {}) is empty", win.t_start, win.t_end)));
            }
        }
        if w.windows(2).any(|p| p[1].t_start < p[0].t_end) {
            return Err(Error::config("forcing windows overlap"));
        }
        Ok(())
    }
}

/// External force and torque active at time `t`.
pub fn external_forcing(schedule: &ForcingSchedule, t: f64) -> ([f64; 2], f64) {
    schedule
        .windows
        .iter()
        .find(|w| t >= w.t_start && t < w.t_end)
        .map_or(([0.0, 0.0], 0.0), |w| (w.force, w.torque))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_window() -> ForcingSchedule {
        ForcingSchedule {
            windows: vec![ForcingWindow { t_start: 100.0, t_end: 200.0, force: [5.0, 0.0], torque: 0.0 }],
        }
    }

    #[test]
    fn forcing_lookup() {
        let s = one_window();
        assert_eq!(external_forcing(&s, 50.0), ([0.0, 0.0], 0.0));
        assert_eq!(external_forcing(&s, 150.0), ([5.0, 0.0], 0.0));
        assert_eq!(external_forcing(&s, 200.0), ([0.0, 0.0], 0.0));
        assert_eq!(external_forcing(&s, 100.0), ([5.0, 0.0], 0.0));
    }

    #[test]
    fn overlapping_windows_rejected() {
        let mut s = one_window();
        s.windows.push(ForcingWindow { t_start: 150.0, t_end: 250.0, force: [0.0, 1.0], torque: 0.0 });
        assert!(s.validate().is_err());
        assert!(ForcingSchedule::hold_default().validate().is_ok());
    }

    #[test]
    fn objective_lookup() {
        let s = ObjectiveSchedule::sequence(&[([30.0, 30.0], 0.0), ([60.0, 50.0], 0.5)], 100.0);
        assert_eq!(s.index_at(0.0), 0);
        assert_eq!(s.index_at(99.9), 0);
        assert_eq!(s.index_at(100.0), 1);
        assert_eq!(s.index_at(0.1 * 1000.0), 1);
        assert_eq!(s.duration(), 200.0);
        assert!(s.validate(100.0).is_ok());
        assert!(ObjectiveSchedule::single([130.0, 1.0], 0.0, 1.0).validate(100.0).is_err());
    }
}
