use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::frame::{SeriesFrame, DAYS_PER_WEEK};
use crate::error::{MerlinError, Result};
use crate::rng::rng_from;

/// Parameters of the synthetic generator.
///
/// Each variable is a daily sinusoid plus a weekly step profile, a linear
/// drift and AR(1) noise with unit stationary variance scaled by `noise_std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_vars: usize,
    pub n_days: usize,
    pub steps_per_day: usize,
    pub seed: u64,
    pub start_dow: usize,
    pub noise_std: f64,
    pub ar_coef: f64,
    /// Drift coefficients are drawn from `U(-drift_scale, drift_scale)`.
    pub drift_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_vars: 8,
            n_days: 21,
            steps_per_day: 288,
            seed: 0,
            start_dow: 0,
            noise_std: 0.3,
            ar_coef: 0.9,
            drift_scale: 1.0,
        }
    }
}

pub fn synth_generate(n_vars: usize, n_days: usize, steps_per_day: usize, seed: u64) -> Result<SeriesFrame> {
    SynthConfig {
        n_vars,
        n_days,
        steps_per_day,
        seed,
        ..SynthConfig::default()
    }
    .generate()
}

impl SynthConfig {
    pub fn generate(&self) -> Result<SeriesFrame> {
        if self.n_vars == 0 || self.n_days == 0 || self.steps_per_day == 0 {
            return Err(MerlinError::Config(
                "n_vars, n_days and steps_per_day must be positive".into(),
            ));
        }
        if !(self.ar_coef.abs() < 1.0) {
            return Err(MerlinError::Config(format!(
                "ar_coef {} must lie in (-1, 1)",
                self.ar_coef
            )));
        }
        let len = self.n_days * self.steps_per_day;
        let spd = self.steps_per_day as f64;
        let innovation = (1.0 - self.ar_coef * self.ar_coef).sqrt();
        let mut values = Vec::with_capacity(self.n_vars);
        for v in 0..self.n_vars {
            let mut rng = rng_from(self.seed, &[v as u64]);
            let amp: f64 = rng.random_range(1.0..2.0);
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            let weekly_amp: f64 = rng.random_range(0.5..1.0);
            let weekly: Vec<f64> = (0..DAYS_PER_WEEK)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let drift = if self.drift_scale > 0.0 {
                rng.random_range(-self.drift_scale..self.drift_scale)
            } else {
                0.0
            };
            let mut ar: f64 = StandardNormal.sample(&mut rng);
            let mut series = Vec::with_capacity(len);
            for t in 0..len {
                let tod = t % self.steps_per_day;
                let dow = (self.start_dow + t / self.steps_per_day) % DAYS_PER_WEEK;
                let z: f64 = StandardNormal.sample(&mut rng);
                ar = self.ar_coef * ar + innovation * z;
                let mut x = amp * (2.0 * PI * tod as f64 / spd + phase).sin()
                    + weekly_amp * weekly[dow];
                if drift != 0.0 {
                    x += drift * t as f64 / len as f64;
                }
                if self.noise_std != 0.0 {
                    x += self.noise_std * ar;
                }
                series.push(x);
            }
            values.push(series);
        }
        let names = (0..self.n_vars).map(|v| format!("var{v}")).collect();
        SeriesFrame::new(values, names, self.steps_per_day, 0, self.start_dow)
    }
}
