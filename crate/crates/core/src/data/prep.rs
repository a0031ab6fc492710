use serde::{Deserialize, Serialize};

use super::frame::SeriesFrame;
use crate::error::{MerlinError, Result};

/// Floor on per-variable standard deviation.
pub const STD_EPS: f64 = 1e-8;

/// Chronological split into (train, val, test); each part must hold at least
/// `min_len` steps.
pub fn split(frame: &SeriesFrame, ratios: [f64; 3], min_len: usize) -> Result<(SeriesFrame, SeriesFrame, SeriesFrame)> {
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(MerlinError::Config(format!("split ratios {ratios:?} must be positive")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(MerlinError::Config(format!(
            "split ratios {ratios:?} sum to {total}, not 1"
        )));
    }
    let len = frame.len();
    let n_train = (len as f64 * ratios[0]).round() as usize;
    let n_val = (len as f64 * ratios[1]).round() as usize;
    if n_train + n_val >= len {
        return Err(MerlinError::Config(format!("series of {len} steps too short to split")));
    }
    let n_test = len - n_train - n_val;
    for (name, n) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if n < min_len {
            return Err(MerlinError::Config(format!(
                "{name} split has {n} steps, fewer than one window ({min_len})"
            )));
        }
    }
    Ok((
        frame.slice(0, n_train)?,
        frame.slice(n_train, n_train + n_val)?,
        frame.slice(n_train + n_val, len)?,
    ))
}

/// Per-variable z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fits mean and population std per variable over observed cells only.
pub fn fit_norm(train: &SeriesFrame) -> NormStats {
    let mut mean = Vec::with_capacity(train.n_vars());
    let mut std = Vec::with_capacity(train.n_vars());
    for v in 0..train.n_vars() {
        let observed: Vec<f64> = (0..train.len())
            .filter(|&t| !train.is_missing(v, t))
            .map(|t| train.value(v, t))
            .collect();
        if observed.is_empty() {
            mean.push(0.0);
            std.push(1.0);
            continue;
        }
        let n = observed.len() as f64;
        let m = observed.iter().sum::<f64>() / n;
        let var = observed.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        mean.push(m);
        std.push(var.sqrt().max(STD_EPS));
    }
    NormStats { mean, std }
}

impl NormStats {
    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, var: usize, x: f64) -> f64 {
        (x - self.mean[var]) / self.std[var]
    }

    pub fn denormalize(&self, var: usize, z: f64) -> f64 {
        z * self.std[var] + self.mean[var]
    }
}

pub fn apply_norm(frame: &SeriesFrame, stats: &NormStats) -> Result<SeriesFrame> {
    map_values(frame, stats, NormStats::normalize)
}

pub fn invert_norm(frame: &SeriesFrame, stats: &NormStats) -> Result<SeriesFrame> {
    map_values(frame, stats, NormStats::denormalize)
}

fn map_values(
    frame: &SeriesFrame,
    stats: &NormStats,
    f: fn(&NormStats, usize, f64) -> f64,
) -> Result<SeriesFrame> {
    if stats.n_vars() != frame.n_vars() {
        return Err(MerlinError::Dimension(format!(
            "stats for {} variables applied to frame with {}",
            stats.n_vars(),
            frame.n_vars()
        )));
    }
    let mut out = frame.clone();
    for (v, series) in out.values_mut().iter_mut().enumerate() {
        for x in series.iter_mut() {
            *x = f(stats, v, *x);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn frame(len: usize) -> SeriesFrame {
        let values = vec![(0..len).map(|t| t as f64).collect(), vec![3.0; len]];
        SeriesFrame::new(values, vec!["a".into(), "b".into()], 24, 0, 0).unwrap()
    }

    #[test]
    fn split_lengths() {
        let (a, b, c) = split(&frame(100), [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        assert_eq!((a.start(), b.start(), c.start()), (0, 60, 80));
        assert_eq!(b.value(0, 0), 60.0);
    }

    #[test]
    fn split_rejects_bad_ratios_and_short_parts() {
        assert!(matches!(
            split(&frame(100), [0.6, 0.2, 0.1], 1),
            Err(MerlinError::Config(_))
        ));
        assert!(matches!(
            split(&frame(100), [0.6, 0.2, 0.2], 24),
            Err(MerlinError::Config(_))
        ));
    }

    #[test]
    fn constant_series_normalizes_to_zero() {
        let f = frame(50);
        let stats = fit_norm(&f);
        assert_eq!(stats.std[1], STD_EPS);
        let n = apply_norm(&f, &stats).unwrap();
        assert!(n.series(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn round_trip_within_tolerance() {
        let f = synth_generate(3, 2, 24, 5).unwrap();
        let stats = fit_norm(&f);
        let back = invert_norm(&apply_norm(&f, &stats).unwrap(), &stats).unwrap();
        for v in 0..3 {
            for t in 0..f.len() {
                assert!((back.value(v, t) - f.value(v, t)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn train_stats_reused_on_other_splits() {
        let f = synth_generate(2, 10, 24, 1).unwrap();
        let (train, val, _) = split(&f, [0.6, 0.2, 0.2], 24).unwrap();
        let stats = fit_norm(&train);
        let nv = apply_norm(&val, &stats).unwrap();
        for t in 0..val.len() {
            let expect = (val.value(0, t) - stats.mean[0]) / stats.std[0];
            assert_eq!(nv.value(0, t), expect);
        }
        assert_ne!(stats, fit_norm(&val));
    }

    #[test]
    fn missing_cells_excluded_from_stats() {
        let mut f = frame(10);
        f.fill_cell(0, 9, 1000.0);
        let stats = fit_norm(&f);
        assert_eq!(stats.mean[0], 4.0);
    }
}
