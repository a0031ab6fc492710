use serde::{Deserialize, Serialize};

use super::mask::{premask_training, MaskPlan, MaskSpace};
use super::prep::{apply_norm, fit_norm, split, NormStats};
use super::synth::SynthConfig;
use super::window::{make_windows, WindowSample};
use super::SeriesFrame;
use crate::error::{MerlinError, Result};
use crate::rng::derive_seed;

/// Everything needed to turn a raw frame into model-ready windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub steps_per_day: usize,
    pub start_dow: usize,
    pub split: [f64; 3],
    /// Step between consecutive training window origins.
    pub train_stride: usize,
    /// Step between consecutive validation and test window origins.
    pub eval_stride: usize,
    pub fill_value: f64,
    pub mask_space: MaskSpace,
    /// Fraction of training cells zeroed before anything else; 0 disables.
    pub premask_rate: f64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            steps_per_day: 288,
            start_dow: 0,
            split: [0.6, 0.2, 0.2],
            train_stride: 1,
            eval_stride: 1,
            fill_value: 0.0,
            mask_space: MaskSpace::Normalized,
            premask_rate: 0.0,
            synth: SynthConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_day == 0 || self.train_stride == 0 || self.eval_stride == 0 {
            return Err(MerlinError::Config(
                "steps_per_day and strides must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.premask_rate) {
            return Err(MerlinError::Config(format!(
                "premask_rate {} outside [0, 1)",
                self.premask_rate
            )));
        }
        Ok(())
    }

    /// Mask plan for the given rates with this config's fill settings.
    pub fn mask_plan(&self, rates: &[f64], seed: u64) -> MaskPlan {
        MaskPlan {
            rates: rates.to_vec(),
            seed,
            fill_value: self.fill_value,
            space: self.mask_space,
        }
    }
}

/// Normalized, windowed splits of one series.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub stats: NormStats,
    /// Fill values in normalized space, one shared or one per variable.
    pub fills: Vec<f64>,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    /// Normalized test split, for segment-wise masking.
    pub test_frame: SeriesFrame,
    pub n_history: usize,
    pub n_future: usize,
    pub eval_stride: usize,
    pub premask_rate: f64,
}

impl Dataset {
    /// Splits chronologically, optionally premasks the training split, fits
    /// z-score statistics on observed training cells and windows each split.
    pub fn prepare(frame: &SeriesFrame, cfg: &DataConfig, n_history: usize, n_future: usize, seed: u64) -> Result<Self> {
        Self::prepare_with(frame, cfg, n_history, n_future, seed, None)
    }

    /// Like [`Self::prepare`] but normalizes with `stats` when given, e.g.
    /// the statistics stored alongside a trained model.
    pub fn prepare_with(
        frame: &SeriesFrame,
        cfg: &DataConfig,
        n_history: usize,
        n_future: usize,
        seed: u64,
        stats: Option<&NormStats>,
    ) -> Result<Self> {
        cfg.validate()?;
        if frame.steps_per_day() != cfg.steps_per_day {
            return Err(MerlinError::Config(format!(
                "frame has {} steps per day, config expects {}",
                frame.steps_per_day(),
                cfg.steps_per_day
            )));
        }
        let window = n_history + n_future;
        let (train, val, test) = split(frame, cfg.split, window)?;
        let train = if cfg.premask_rate > 0.0 {
            premask_training(&train, cfg.premask_rate, derive_seed(seed, &[0x9e]))?
        } else {
            train
        };
        let stats = match stats {
            Some(s) if s.n_vars() != frame.n_vars() => {
                return Err(MerlinError::Config(format!(
                    "normalization covers {} variables, data has {}",
                    s.n_vars(),
                    frame.n_vars()
                )))
            }
            Some(s) => s.clone(),
            None => fit_norm(&train),
        };
        let fills = cfg.mask_plan(&[], 0).resolve_fills(&stats);
        let mut train = apply_norm(&train, &stats)?;
        train.refill_missing(&fills);
        let val = apply_norm(&val, &stats)?;
        let test = apply_norm(&test, &stats)?;
        Ok(Self {
            train: make_windows(&train, n_history, n_future, cfg.train_stride)?,
            val: make_windows(&val, n_history, n_future, cfg.eval_stride)?,
            test: make_windows(&test, n_history, n_future, cfg.eval_stride)?,
            test_frame: test,
            stats,
            fills,
            n_history,
            n_future,
            eval_stride: cfg.eval_stride,
            premask_rate: cfg.premask_rate,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.stats.n_vars()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn cfg() -> DataConfig {
        DataConfig { steps_per_day: 24, ..DataConfig::default() }
    }

    #[test]
    fn window_counts_and_disjoint_histories() {
        let f = synth_generate(2, 10, 24, 0).unwrap();
        let d = Dataset::prepare(&f, &cfg(), 12, 12, 0).unwrap();
        assert_eq!(d.train.len(), 144 - 23);
        assert_eq!(d.val.len(), 48 - 23);
        let last_train = d.train.iter().map(|w| w.origin_t + 12).max().unwrap();
        let first_val = d.val.iter().map(|w| w.origin_t - 11).min().unwrap();
        assert!(last_train < first_val);
    }

    #[test]
    fn pipeline_is_reproducible() {
        let f = synth_generate(3, 8, 24, 4).unwrap();
        let c = DataConfig { premask_rate: 0.05, ..cfg() };
        let a = Dataset::prepare(&f, &c, 12, 12, 1).unwrap();
        let b = Dataset::prepare(&f, &c, 12, 12, 1).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn premasked_cells_hold_normalized_fill() {
        let f = synth_generate(2, 8, 24, 4).unwrap();
        let d = Dataset::prepare(&f, &DataConfig { premask_rate: 0.05, ..cfg() }, 12, 12, 1).unwrap();
        let w = &d.train[0];
        let flagged: Vec<f64> = w.x.data().iter().zip(&w.missing).filter(|(_, &m)| m).map(|(x, _)| *x).collect();
        assert!(flagged.iter().all(|&x| x == 0.0));
        let total: usize = d.train.iter().map(|w| w.missing.iter().filter(|&&m| m).count()).sum();
        assert!(total > 0);
    }

    #[test]
    fn raw_space_fills_are_per_variable() {
        let f = synth_generate(2, 8, 24, 4).unwrap();
        let c = DataConfig { mask_space: MaskSpace::Raw, ..cfg() };
        let d = Dataset::prepare(&f, &c, 12, 12, 1).unwrap();
        assert_eq!(d.fills.len(), 2);
        assert!((d.stats.denormalize(1, d.fills[1])).abs() < 1e-12);
    }

    #[test]
    fn supplied_stats_are_used() {
        let f = synth_generate(2, 8, 24, 4).unwrap();
        let stats = NormStats { mean: vec![1.0, 2.0], std: vec![2.0, 4.0] };
        let d = Dataset::prepare_with(&f, &cfg(), 12, 12, 0, Some(&stats)).unwrap();
        assert_eq!(d.stats, stats);
        assert_eq!(d.test[0].x.data()[0], (f.value(0, d.test[0].origin_t - 11) - 1.0) / 2.0);
        let wrong = NormStats { mean: vec![0.0], std: vec![1.0] };
        assert!(Dataset::prepare_with(&f, &cfg(), 12, 12, 0, Some(&wrong)).is_err());
    }

    #[test]
    fn calendar_mismatch_rejected() {
        let f = synth_generate(2, 8, 24, 4).unwrap();
        assert!(matches!(
            Dataset::prepare(&f, &DataConfig::default(), 12, 12, 0),
            Err(MerlinError::Config(_))
        ));
    }
}
