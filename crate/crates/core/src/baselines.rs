//! Unbiased MD and steered MD reference ensembles.

use serde::{Deserialize, Serialize};

use crate::dynamics::{rollout_batch, BiasField, NoBias, Path, RolloutSpec};
use crate::error::{CoreError, Result};
use crate::rng::EVAL;
use crate::systems::{wrap_angle, Cv, SystemSpec};

/// Where the restraint is centred over time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmdAnchor {
    /// Fixed at `cv(R_B)`.
    #[default]
    Fixed,
    /// Moves linearly from `cv(R_A)` to `cv(R_B)` over the horizon.
    Moving,
}

/// Restraint energy convention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Restraint {
    /// `k ‖cv − c‖²`.
    #[default]
    Full,
    /// `½ k ‖cv − c‖²`.
    Half,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmdSchedule {
    pub k: f64,
    #[serde(default)]
    pub anchor: SmdAnchor,
    #[serde(default)]
    pub restraint: Restraint,
}

impl SmdSchedule {
    pub fn new(k: f64) -> Result<Self> {
        let s = Self {
            k,
            anchor: SmdAnchor::Fixed,
            restraint: Restraint::Full,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(CoreError::Invalid(format!("force constant must be non-negative, got {}", self.k)));
        }
        Ok(())
    }
}

/// Harmonic restraint as a bias field.
#[derive(Clone, Debug)]
pub struct Smd {
    schedule: SmdSchedule,
    start: Vec<f64>,
    delta: Vec<f64>,
    horizon: usize,
}

impl Smd {
    pub fn new(sys: &SystemSpec, schedule: SmdSchedule, horizon: usize) -> Result<Self> {
        schedule.validate()?;
        let start = sys.cv_value(&sys.r_a);
        let end = sys.cv_value(&sys.r_b);
        let delta = start
            .iter()
            .zip(&end)
            .map(|(a, b)| match sys.cv {
                Cv::Identity => b - a,
                Cv::Dihedral => wrap_angle(b - a),
            })
            .collect();
        Ok(Self {
            schedule,
            start,
            delta,
            horizon: horizon.max(1),
        })
    }

    pub fn schedule(&self) -> &SmdSchedule {
        &self.schedule
    }

    /// Restraint centre at step `step`.
    pub fn target(&self, step: usize) -> Vec<f64> {
        let s = match self.schedule.anchor {
            SmdAnchor::Fixed => 1.0,
            SmdAnchor::Moving => (step as f64 / self.horizon as f64).min(1.0),
        };
        self.start.iter().zip(&self.delta).map(|(a, d)| a + s * d).collect()
    }
}

impl BiasField for Smd {
    fn bias(&self, sys: &SystemSpec, positions: &[f64], rows: usize, step: usize) -> Result<Vec<f64>> {
        let n = sys.dim();
        let mut out = vec![0.0; rows * n];
        if self.schedule.k == 0.0 {
            return Ok(out);
        }
        let target = self.target(step);
        let c = match self.schedule.restraint {
            Restraint::Full => -2.0 * self.schedule.k,
            Restraint::Half => -self.schedule.k,
        };
        for (r, o) in positions.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            sys.cv_pull_grad(r, &target, o);
            o.iter_mut().for_each(|v| *v *= c);
        }
        Ok(out)
    }
}

fn check_count(count: usize) -> Result<()> {
    if count == 0 {
        return Err(CoreError::Invalid("ensemble size must be at least 1".into()));
    }
    Ok(())
}

/// `count` unbiased paths at `temperature` over the system horizon.
pub fn run_umd(sys: &SystemSpec, temperature: f64, count: usize, seed: u64) -> Result<Vec<Path>> {
    check_count(count)?;
    let spec = RolloutSpec::new(sys.horizon, temperature, seed, 0).with_stream(EVAL);
    rollout_batch(sys, &NoBias, &spec, 0, count)
}

/// `count` steered paths at `temperature`; the same seed gives the same noise as [`run_umd`].
pub fn run_smd(sys: &SystemSpec, schedule: &SmdSchedule, temperature: f64, count: usize, seed: u64) -> Result<Vec<Path>> {
    check_count(count)?;
    let smd = Smd::new(sys, schedule.clone(), sys.horizon)?;
    let spec = RolloutSpec::new(sys.horizon, temperature, seed, 0).with_stream(EVAL);
    rollout_batch(sys, &smd, &spec, 0, count)
}
