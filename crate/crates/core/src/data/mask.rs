use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::frame::{fill_for, SeriesFrame};
use super::prep::NormStats;
use super::window::WindowSample;
use crate::error::{MerlinError, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

pub const DEFAULT_RATES: [f64; 4] = [0.25, 0.50, 0.75, 0.90];

/// Whether the zero fill happens before or after z-scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSpace {
    #[default]
    Normalized,
    Raw,
}

/// Missing rates used to build the masked views of a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPlan {
    pub rates: Vec<f64>,
    pub seed: u64,
    pub fill_value: f64,
    pub space: MaskSpace,
}

impl Default for MaskPlan {
    fn default() -> Self {
        Self {
            rates: DEFAULT_RATES.to_vec(),
            seed: 0,
            fill_value: 0.0,
            space: MaskSpace::Normalized,
        }
    }
}

impl MaskPlan {
    pub fn validate(&self) -> Result<()> {
        validate_rates(&self.rates)
    }

    pub fn m(&self) -> usize {
        self.rates.len()
    }

    /// Fill values as they appear in the model's (normalized) input space.
    pub fn resolve_fills(&self, stats: &NormStats) -> Vec<f64> {
        match self.space {
            MaskSpace::Normalized => vec![self.fill_value],
            MaskSpace::Raw => (0..stats.n_vars())
                .map(|v| stats.normalize(v, self.fill_value))
                .collect(),
        }
    }
}

pub fn validate_rates(rates: &[f64]) -> Result<()> {
    if rates.is_empty() {
        return Err(MerlinError::Config("at least one missing rate is required".into()));
    }
    if rates.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
        return Err(MerlinError::Config(format!("rates {rates:?} must lie in (0, 1)")));
    }
    if rates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MerlinError::Config(format!("rates {rates:?} must be strictly increasing")));
    }
    Ok(())
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(MerlinError::Config(format!("missing rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Number of cells masked at `rate`.
pub fn masked_count(cells: usize, rate: f64) -> usize {
    (rate * cells as f64).round() as usize
}

/// Exactly `masked_count(cells, rate)` distinct indices, sorted.
pub fn select_cells(cells: usize, rate: f64, seed: u64) -> Vec<usize> {
    let k = masked_count(cells, rate);
    let mut rng = rng_from(seed, &[]);
    let mut picked = index::sample(&mut rng, cells, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Masks `x` (`[n_vars, ..]`) with a single fill value.
pub fn apply_mask(x: &Tensor, rate: f64, seed: u64, fill_value: f64) -> Result<(Tensor, Vec<bool>)> {
    apply_mask_with(x, rate, seed, &[fill_value], None)
}

/// Masks `x` with per-variable fills; cells flagged in `prior` are filled too.
pub fn apply_mask_with(
    x: &Tensor,
    rate: f64,
    seed: u64,
    fills: &[f64],
    prior: Option<&[bool]>,
) -> Result<(Tensor, Vec<bool>)> {
    check_rate(rate)?;
    let cells = x.numel();
    let n_vars = x.shape()[0];
    if fills.len() != 1 && fills.len() != n_vars {
        return Err(MerlinError::Dimension(format!(
            "{} fill values for {n_vars} variables",
            fills.len()
        )));
    }
    let mut mask = match prior {
        Some(p) if p.len() == cells => p.to_vec(),
        Some(p) => {
            return Err(MerlinError::Dimension(format!(
                "prior mask of {} cells for tensor of {cells}",
                p.len()
            )))
        }
        None => vec![false; cells],
    };
    for i in select_cells(cells, rate, seed) {
        mask[i] = true;
    }
    let per_var = cells / n_vars;
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask[i] {
            *v = fill_for(fills, i / per_var);
        }
    }
    Ok((out, mask))
}

/// Masks one window; the draw depends only on (`seed`, `origin_t`, `rate`).
pub fn mask_window(w: &WindowSample, rate: f64, seed: u64, fills: &[f64]) -> Result<(Tensor, Vec<bool>)> {
    let s = derive_seed(seed, &[w.origin_t as u64, rate.to_bits()]);
    apply_mask_with(&w.x, rate, s, fills, Some(&w.missing))
}

/// One independently drawn masked view per rate of `plan`.
pub fn make_views(w: &WindowSample, plan: &MaskPlan, fills: &[f64]) -> Result<Vec<(Tensor, Vec<bool>)>> {
    plan.rates
        .iter()
        .map(|&r| mask_window(w, r, plan.seed, fills))
        .collect()
}

/// One contiguous block of the test span and the rate applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub rate: f64,
    pub masked_cells: usize,
}

/// A test frame masked segment by segment at varying rates.
#[derive(Debug, Clone)]
pub struct UnfixedMask {
    pub frame: SeriesFrame,
    /// Rate in force at each step of `frame`.
    pub step_rates: Vec<f64>,
    pub segments: Vec<Segment>,
}

/// Cuts `frame` into `n_segments` equal blocks (the last absorbs the
/// remainder) and masks each at one rate. Rates are shuffled with `seed` and
/// assigned round-robin, so every rate is used `n_segments / m` or one more
/// times.
pub fn segment_unfixed_mask(
    frame: &SeriesFrame,
    rates: &[f64],
    n_segments: usize,
    seed: u64,
    fills: &[f64],
) -> Result<UnfixedMask> {
    if rates.is_empty() {
        return Err(MerlinError::Config("no rates given".into()));
    }
    for &r in rates {
        check_rate(r)?;
    }
    if n_segments < rates.len() {
        return Err(MerlinError::Config(format!(
            "{n_segments} segments cannot cover {} rates",
            rates.len()
        )));
    }
    let seg_len = frame.len() / n_segments;
    if seg_len < 1 {
        return Err(MerlinError::Config(format!(
            "{n_segments} segments over {} steps leaves empty segments",
            frame.len()
        )));
    }
    let mut order = rates.to_vec();
    order.shuffle(&mut rng_from(seed, &[0x5e6]));

    let mut out = frame.clone();
    let mut step_rates = vec![0.0; frame.len()];
    let mut segments = Vec::with_capacity(n_segments);
    let n_vars = frame.n_vars();
    for s in 0..n_segments {
        let start = s * seg_len;
        let end = if s + 1 == n_segments { frame.len() } else { start + seg_len };
        let rate = order[s % order.len()];
        let len = end - start;
        let picked = select_cells(n_vars * len, rate, derive_seed(seed, &[s as u64, rate.to_bits()]));
        for &i in &picked {
            let (v, t) = (i / len, start + i % len);
            out.fill_cell(v, t, fill_for(fills, v));
        }
        step_rates[start..end].fill(rate);
        segments.push(Segment {
            start,
            end,
            rate,
            masked_cells: picked.len(),
        });
    }
    Ok(UnfixedMask {
        frame: out,
        step_rates,
        segments,
    })
}

/// Point-masks a training frame with raw zeros before any other processing.
pub fn premask_training(frame: &SeriesFrame, rate: f64, seed: u64) -> Result<SeriesFrame> {
    check_rate(rate)?;
    let len = frame.len();
    let mut out = frame.clone();
    for i in select_cells(frame.n_vars() * len, rate, derive_seed(seed, &[0x9e5])) {
        out.fill_cell(i / len, i % len, 0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, synth_generate};
    use proptest::prelude::*;

    fn x(n: usize) -> Tensor {
        Tensor::new(vec![1, n, 1], (1..=n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn exact_counts() {
        let (_, m) = apply_mask(&x(100), 0.25, 3, 0.0).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 25);
        let (_, m) = apply_mask(&x(10), 0.90, 3, 0.0).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 9);
    }

    #[test]
    fn zero_rate_is_identity() {
        let (out, m) = apply_mask(&x(20), 0.0, 3, 0.0).unwrap();
        assert_eq!(out, x(20));
        assert!(m.iter().all(|&b| !b));
    }

    #[test]
    fn rate_one_rejected() {
        assert!(matches!(apply_mask(&x(4), 1.0, 0, 0.0), Err(MerlinError::Config(_))));
    }

    #[test]
    fn views_follow_plan() {
        let f = synth_generate(3, 2, 24, 1).unwrap();
        let w = &make_windows(&f, 12, 12, 1).unwrap()[5];
        let plan = MaskPlan::default();
        let views = make_views(w, &plan, &[0.0]).unwrap();
        assert_eq!(views.len(), 4);
        for ((_, m), r) in views.iter().zip(DEFAULT_RATES) {
            assert_eq!(m.iter().filter(|&&b| b).count(), masked_count(36, r));
        }
        let single = MaskPlan {
            rates: vec![0.5],
            ..MaskPlan::default()
        };
        let one = make_views(w, &single, &[0.0]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], mask_window(w, 0.5, single.seed, &[0.0]).unwrap());
    }

    #[test]
    fn plan_validation() {
        assert!(MaskPlan::default().validate().is_ok());
        let bad = MaskPlan {
            rates: vec![0.5, 0.25],
            ..MaskPlan::default()
        };
        assert!(bad.validate().is_err());
        assert!(validate_rates(&[]).is_err());
    }

    #[test]
    fn raw_space_fill_maps_through_stats() {
        let stats = NormStats {
            mean: vec![2.0, -1.0],
            std: vec![4.0, 0.5],
        };
        let plan = MaskPlan {
            space: MaskSpace::Raw,
            ..MaskPlan::default()
        };
        assert_eq!(plan.resolve_fills(&stats), vec![-0.5, 2.0]);
        assert_eq!(MaskPlan::default().resolve_fills(&stats), vec![0.0]);
    }

    #[test]
    fn segments_use_each_rate() {
        let f = synth_generate(2, 4, 24, 1).unwrap();
        let u = segment_unfixed_mask(&f, &DEFAULT_RATES, 4, 7, &[0.0]).unwrap();
        let mut used: Vec<f64> = u.segments.iter().map(|s| s.rate).collect();
        used.sort_by(f64::total_cmp);
        assert_eq!(used, DEFAULT_RATES.to_vec());
        for s in &u.segments {
            assert_eq!(s.masked_cells, masked_count(2 * (s.end - s.start), s.rate));
            let filled = (0..2)
                .flat_map(|v| (s.start..s.end).map(move |t| (v, t)))
                .filter(|&(v, t)| u.frame.is_missing(v, t))
                .count();
            assert_eq!(filled, s.masked_cells);
        }

        let u8 = segment_unfixed_mask(&f, &DEFAULT_RATES, 8, 7, &[0.0]).unwrap();
        for r in DEFAULT_RATES {
            assert_eq!(u8.segments.iter().filter(|s| s.rate == r).count(), 2);
        }
    }

    #[test]
    fn segment_errors() {
        let f = synth_generate(1, 1, 4, 1).unwrap();
        assert!(segment_unfixed_mask(&f, &DEFAULT_RATES, 3, 0, &[0.0]).is_err());
        assert!(segment_unfixed_mask(&f, &DEFAULT_RATES, 5, 0, &[0.0]).is_err());
    }

    #[test]
    fn premask_counts_and_composition() {
        let values = vec![vec![1.0; 1000]; 10];
        let names = (0..10).map(|v| v.to_string()).collect();
        let f = SeriesFrame::new(values, names, 100, 0, 0).unwrap();
        assert_eq!(premask_training(&f, 0.0, 1).unwrap(), f);
        let pre = premask_training(&f, 0.05, 1).unwrap();
        assert_eq!(pre.missing_count(), 500);

        // union of a 5% and a 25% draw over the same cells
        let flat = Tensor::new(vec![10, 1000, 1], pre.values().concat()).unwrap();
        let prior: Vec<bool> = (0..10).flat_map(|v| (0..1000).map(move |t| (v, t)))
            .map(|(v, t)| pre.is_missing(v, t)).collect();
        let (_, m) = apply_mask_with(&flat, 0.25, 9, &[0.0], Some(&prior)).unwrap();
        let frac = m.iter().filter(|&&b| b).count() as f64 / 10_000.0;
        assert!((0.25..=0.30).contains(&frac), "{frac}");
    }

    proptest! {
        #[test]
        fn masking_never_touches_unmasked_and_is_idempotent(
            data in prop::collection::vec(-5.0f64..5.0, 24),
            rate in 0.0f64..0.99,
            seed in any::<u64>(),
        ) {
            let t = Tensor::new(vec![2, 12, 1], data).unwrap();
            let (out, m) = apply_mask(&t, rate, seed, 0.0).unwrap();
            prop_assert_eq!(m.iter().filter(|&&b| b).count(), masked_count(24, rate));
            for i in 0..24 {
                if m[i] { prop_assert_eq!(out.data()[i], 0.0); }
                else { prop_assert_eq!(out.data()[i], t.data()[i]); }
            }
            let (again, m2) = apply_mask_with(&out, rate, seed, &[0.0], Some(&m)).unwrap();
            prop_assert_eq!(again, out);
            prop_assert_eq!(m2, m);
        }
    }
}
