//! Forecast metrics, the fixed-rate and segmented test protocols, and
//! aggregation of repeated runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{make_windows_from, mask_window, segment_unfixed_mask, Dataset, NormStats, WindowSample, DEFAULT_RATES};
use crate::error::{MerlinError, Result};
use crate::model::StidParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rates: Vec<f64>,
    pub seed: u64,
    pub eps_mape: f64,
    pub n_segments: usize,
    /// Windows per forward pass.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rates: DEFAULT_RATES.to_vec(),
            seed: 0,
            eps_mape: 1e-4,
            n_segments: 4,
            batch_size: 256,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MerlinError::Config("eval batch_size must be positive".into()));
        }
        if !(self.eps_mape >= 0.0) {
            return Err(MerlinError::Config("eps_mape must be >= 0".into()));
        }
        Ok(())
    }
}

/// Running sums from which every metric is derived.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Accum {
    abs: f64,
    sq: f64,
    pct: f64,
    n: usize,
    pct_n: usize,
    excluded: usize,
}

impl Accum {
    fn push(&mut self, pred: f64, truth: f64, eps_mape: f64) {
        let e = pred - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if truth.abs() >= eps_mape && truth != 0.0 {
            self.pct += e.abs() / truth.abs();
            self.pct_n += 1;
        } else {
            self.excluded += 1;
        }
    }

    fn merge(&mut self, o: &Accum) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.pct += o.pct;
        self.n += o.n;
        self.pct_n += o.pct_n;
        self.excluded += o.excluded;
    }

    fn finish(&self) -> Result<Metrics> {
        if self.n == 0 {
            return Err(MerlinError::Data("no points to score".into()));
        }
        let n = self.n as f64;
        Ok(Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: (self.pct_n > 0).then(|| 100.0 * self.pct / self.pct_n as f64),
            n_points: self.n,
            mape_excluded: self.excluded,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; absent when every target is below the MAPE threshold.
    pub mape: Option<f64>,
    pub n_points: usize,
    pub mape_excluded: usize,
}

/// MAE, RMSE and MAPE of `pred` against `truth`.
pub fn metrics(pred: &[f64], truth: &[f64], eps_mape: f64) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(MerlinError::Dimension(format!(
            "{} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let mut acc = Accum::default();
    for (&p, &t) in pred.iter().zip(truth) {
        acc.push(p, t, eps_mape);
    }
    acc.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMetrics {
    pub rate: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Protocol name, `fixed` or `unfixed`.
    pub protocol: String,
    pub overall: Metrics,
    pub per_rate: Vec<RateMetrics>,
    pub seeds_aggregated: usize,
}

/// Forecasts `inputs` in batches and returns predictions in raw units,
/// flattened per window as `[n_vars, n_future]`.
pub fn forecast_raw(params: &StidParams, inputs: &[(Tensor, usize, usize)], stats: &NormStats, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let xs: Vec<Tensor> = chunk.iter().map(|(x, _, _)| x.clone()).collect();
        let tod: Vec<usize> = chunk.iter().map(|c| c.1).collect();
        let dow: Vec<usize> = chunk.iter().map(|c| c.2).collect();
        let (y, _) = params.predict(&Tensor::stack(&xs)?, &tod, &dow)?;
        let per = y.numel() / chunk.len();
        for b in 0..chunk.len() {
            out.push(denormalize(&y.data()[b * per..(b + 1) * per], stats));
        }
    }
    Ok(out)
}

/// Inverts z-scoring on a `[n_vars, k]` block.
fn denormalize(block: &[f64], stats: &NormStats) -> Vec<f64> {
    let k = block.len() / stats.n_vars();
    block
        .iter()
        .enumerate()
        .map(|(i, &z)| stats.denormalize(i / k, z))
        .collect()
}

/// Scores masked forecasts of `windows`, grouping points by `label(i)`.
fn score_grouped(
    params: &StidParams,
    windows: &[WindowSample],
    inputs: Vec<(Tensor, usize, usize)>,
    labels: &[f64],
    stats: &NormStats,
    cfg: &EvalConfig,
) -> Result<(Accum, BTreeMap<u64, Accum>)> {
    let preds = forecast_raw(params, &inputs, stats, cfg.batch_size)?;
    let mut total = Accum::default();
    let mut groups: BTreeMap<u64, Accum> = BTreeMap::new();
    for ((w, p), &rate) in windows.iter().zip(&preds).zip(labels) {
        let truth = denormalize(w.y.data(), stats);
        let g = groups.entry(rate.to_bits()).or_default();
        for (&pv, &tv) in p.iter().zip(&truth) {
            g.push(pv, tv, cfg.eps_mape);
        }
    }
    for g in groups.values() {
        total.merge(g);
    }
    Ok((total, groups))
}

fn per_rate(groups: &BTreeMap<u64, Accum>) -> Result<Vec<RateMetrics>> {
    let mut out: Vec<RateMetrics> = groups
        .iter()
        .map(|(bits, acc)| {
            Ok(RateMetrics {
                rate: f64::from_bits(*bits),
                metrics: acc.finish()?,
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| a.rate.total_cmp(&b.rate));
    Ok(out)
}

/// Masks every window of `windows` at each rate (seeded per window) and
/// scores the forecasts; `overall` pools every rate.
pub fn evaluate_rates(
    params: &StidParams,
    windows: &[WindowSample],
    stats: &NormStats,
    fills: &[f64],
    rates: &[f64],
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if windows.is_empty() {
        return Err(MerlinError::Data("no windows to evaluate".into()));
    }
    let mut total = Accum::default();
    let mut groups = BTreeMap::new();
    for &rate in rates {
        let inputs = windows
            .iter()
            .map(|w| Ok((mask_window(w, rate, cfg.seed, fills)?.0, w.tod, w.dow)))
            .collect::<Result<Vec<_>>>()?;
        let labels = vec![rate; windows.len()];
        let (acc, g) = score_grouped(params, windows, inputs, &labels, stats, cfg)?;
        total.merge(&acc);
        groups.extend(g);
    }
    Ok(MetricReport {
        protocol: "fixed".into(),
        overall: total.finish()?,
        per_rate: per_rate(&groups)?,
        seeds_aggregated: 1,
    })
}

/// Fixed-rate protocol on the test split at a single rate.
pub fn evaluate_fixed(params: &StidParams, data: &Dataset, rate: f64, cfg: &EvalConfig) -> Result<MetricReport> {
    evaluate_rates(params, &data.test, &data.stats, &data.fills, &[rate], cfg)
}

/// Segmented protocol: the test span is cut into `cfg.n_segments` blocks,
/// each masked at one rate; a window is labelled with the rate in force at
/// its last history step.
pub fn evaluate_unfixed(params: &StidParams, data: &Dataset, cfg: &EvalConfig) -> Result<MetricReport> {
    let masked = segment_unfixed_mask(&data.test_frame, &cfg.rates, cfg.n_segments, cfg.seed, &data.fills)?;
    let windows = make_windows_from(&masked.frame, &data.test_frame, data.n_history, data.n_future, data.eval_stride)?;
    if windows.is_empty() {
        return Err(MerlinError::Data("test split holds no full window".into()));
    }
    let start = data.test_frame.start();
    let labels: Vec<f64> = windows.iter().map(|w| masked.step_rates[w.origin_t - start]).collect();
    let inputs = windows.iter().map(|w| (w.x.clone(), w.tod, w.dow)).collect();
    let (total, groups) = score_grouped(params, &windows, inputs, &labels, &data.stats, cfg)?;
    Ok(MetricReport {
        protocol: "unfixed".into(),
        overall: total.finish()?,
        per_rate: per_rate(&groups)?,
        seeds_aggregated: 1,
    })
}

fn same_schema(a: &MetricReport, b: &MetricReport) -> bool {
    a.protocol == b.protocol
        && a.overall.mape.is_some() == b.overall.mape.is_some()
        && a.per_rate.len() == b.per_rate.len()
        && a.per_rate.iter().zip(&b.per_rate).all(|(x, y)| {
            x.rate.to_bits() == y.rate.to_bits() && x.metrics.mape.is_some() == y.metrics.mape.is_some()
        })
}

fn mean_metrics(all: &[&Metrics]) -> Metrics {
    let k = all.len() as f64;
    let mean = |f: &dyn Fn(&Metrics) -> f64| all.iter().map(|m| f(m)).sum::<f64>() / k;
    Metrics {
        mae: mean(&|m| m.mae),
        rmse: mean(&|m| m.rmse),
        mape: all[0].mape.map(|_| mean(&|m| m.mape.unwrap_or(0.0))),
        n_points: all[0].n_points,
        mape_excluded: all[0].mape_excluded,
    }
}

/// Elementwise mean of reports sharing protocol, rates and MAPE presence.
pub fn aggregate_seeds(reports: &[MetricReport]) -> Result<MetricReport> {
    let Some(first) = reports.first() else {
        return Err(MerlinError::Usage("no reports to aggregate".into()));
    };
    if let Some(bad) = reports.iter().position(|r| !same_schema(first, r)) {
        return Err(MerlinError::Usage(format!("report {bad} does not match the schema of report 0")));
    }
    let overall: Vec<&Metrics> = reports.iter().map(|r| &r.overall).collect();
    let per_rate = (0..first.per_rate.len())
        .map(|i| RateMetrics {
            rate: first.per_rate[i].rate,
            metrics: mean_metrics(&reports.iter().map(|r| &r.per_rate[i].metrics).collect::<Vec<_>>()),
        })
        .collect();
    Ok(MetricReport {
        protocol: first.protocol.clone(),
        overall: mean_metrics(&overall),
        per_rate,
        seeds_aggregated: reports.iter().map(|r| r.seeds_aggregated).sum(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl MetricReport {
    /// Mean of the per-rate MAEs, the figure used for model selection.
    pub fn mean_rate_mae(&self) -> f64 {
        if self.per_rate.is_empty() {
            return self.overall.mae;
        }
        self.per_rate.iter().map(|r| r.metrics.mae).sum::<f64>() / self.per_rate.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("protocol,rate,mae,rmse,mape,n_points,mape_excluded,seeds\n");
        let mut row = |rate: &str, m: &Metrics| {
            let _ = writeln!(
                s,
                "{},{rate},{},{},{},{},{},{}",
                self.protocol,
                m.mae,
                m.rmse,
                fmt_opt(m.mape),
                m.n_points,
                m.mape_excluded,
                self.seeds_aggregated
            );
        };
        for r in &self.per_rate {
            row(&format!("{}", r.rate), &r.metrics);
        }
        row("overall", &self.overall);
        s
    }

    /// Metric rows by rate columns.
    pub fn to_table(&self) -> String {
        let mut cols: Vec<(String, &Metrics)> = self
            .per_rate
            .iter()
            .map(|r| (format!("{:.0}%", r.rate * 100.0), &r.metrics))
            .collect();
        if self.per_rate.len() != 1 {
            cols.push(("overall".into(), &self.overall));
        }
        let mut s = format!("{:<8}", self.protocol);
        for (h, _) in &cols {
            let _ = write!(s, "{h:>12}");
        }
        s.push('\n');
        let rows: [(&str, &dyn Fn(&Metrics) -> Option<f64>); 3] = [
            ("MAE", &|m| Some(m.mae)),
            ("RMSE", &|m| Some(m.rmse)),
            ("MAPE(%)", &|m| m.mape),
        ];
        for (name, f) in rows {
            let _ = write!(s, "{name:<8}");
            for (_, m) in &cols {
                match f(m) {
                    Some(v) => {
                        let _ = write!(s, "{v:>12.4}");
                    }
                    None => {
                        let _ = write!(s, "{:>12}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, DataConfig};
    use crate::model::StidConfig;
    use proptest::prelude::*;

    #[test]
    fn metric_examples() {
        let m = metrics(&[1.0, 2.0], &[1.0, 2.0], 1e-4).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape), (0.0, 0.0, Some(0.0)));
        let m = metrics(&[90.0], &[100.0], 1e-4).unwrap();
        assert_eq!((m.mae, m.rmse), (10.0, 10.0));
        assert!((m.mape.unwrap() - 10.0).abs() < 1e-12);
        let m = metrics(&[3.0; 7], &[1.0; 7], 1e-4).unwrap();
        assert_eq!(m.rmse, 2.0);
    }

    #[test]
    fn mape_exclusions() {
        let m = metrics(&[1.0, 5.0], &[0.0, 4.0], 1e-4).unwrap();
        assert_eq!(m.mape_excluded, 1);
        assert!((m.mape.unwrap() - 25.0).abs() < 1e-12);
        let m = metrics(&[1.0], &[0.0], 1e-4).unwrap();
        assert_eq!(m.mape, None);
        assert_eq!(m.mae, 1.0);
        assert!(metrics(&[], &[], 1e-4).is_err());
    }

    fn report(mae: f64, rates: &[f64]) -> MetricReport {
        let m = Metrics { mae, rmse: mae + 1.0, mape: Some(mae * 10.0), n_points: 4, mape_excluded: 0 };
        MetricReport {
            protocol: "fixed".into(),
            overall: m.clone(),
            per_rate: rates.iter().map(|&rate| RateMetrics { rate, metrics: m.clone() }).collect(),
            seeds_aggregated: 1,
        }
    }

    #[test]
    fn aggregation() {
        let one = report(1.0, &[0.5]);
        assert_eq!(aggregate_seeds(std::slice::from_ref(&one)).unwrap(), one);
        let agg = aggregate_seeds(&[report(1.0, &[0.5]), report(3.0, &[0.5])]).unwrap();
        assert_eq!(agg.overall.mae, 2.0);
        assert_eq!(agg.per_rate[0].metrics.mape, Some(20.0));
        assert_eq!(agg.seeds_aggregated, 2);
        let rev = aggregate_seeds(&[report(3.0, &[0.5]), report(1.0, &[0.5])]).unwrap();
        assert_eq!(rev, agg);
        assert!(matches!(
            aggregate_seeds(&[report(1.0, &[0.5]), report(1.0, &[0.25])]),
            Err(MerlinError::Usage(_))
        ));
        assert!(aggregate_seeds(&[]).is_err());
    }

    #[test]
    fn csv_and_table_layout() {
        let r = report(1.5, &[0.25, 0.5]);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("fixed,0.25,1.5,2.5,15,"));
        let table = r.to_table();
        assert!(table.lines().next().unwrap().contains("25%"));
        assert!(table.contains("overall"));
        assert_eq!(table.lines().count(), 4);
    }

    fn tiny(days: usize) -> (StidParams, Dataset) {
        let frame = synth_generate(3, days, 24, 2).unwrap();
        let data_cfg = DataConfig { steps_per_day: 24, ..DataConfig::default() };
        let data = Dataset::prepare(&frame, &data_cfg, 12, 12, 0).unwrap();
        let cfg = StidConfig { n_vars: 3, steps_per_day: 24, embed_dim: 8, layers: 1, ..StidConfig::default() };
        (StidParams::init(&cfg, 0).unwrap(), data)
    }

    #[test]
    fn fixed_protocol_properties() {
        let (p, d) = tiny(6);
        let cfg = EvalConfig::default();
        let a = evaluate_fixed(&p, &d, 0.5, &cfg).unwrap();
        assert_eq!(a, evaluate_fixed(&p, &d, 0.5, &cfg).unwrap());
        assert_eq!(a.per_rate.len(), 1);
        assert_eq!(a.per_rate[0].rate, 0.5);
        assert!(a.overall.rmse >= a.overall.mae);
        assert_eq!(a.overall.n_points, d.test.len() * 3 * 12);

        let clean = evaluate_fixed(&p, &d, 0.0, &cfg).unwrap();
        let inputs: Vec<_> = d.test.iter().map(|w| (w.x.clone(), w.tod, w.dow)).collect();
        let preds = forecast_raw(&p, &inputs, &d.stats, 7).unwrap();
        let truth: Vec<f64> = d.test.iter().flat_map(|w| denormalize(w.y.data(), &d.stats)).collect();
        let direct = metrics(&preds.concat(), &truth, 1e-4).unwrap();
        assert!((direct.mae - clean.overall.mae).abs() < 1e-12);
    }

    #[test]
    fn unfixed_protocol_properties() {
        let (p, d) = tiny(20);
        let cfg = EvalConfig::default();
        let r = evaluate_unfixed(&p, &d, &cfg).unwrap();
        assert_eq!(r.per_rate.len(), 4);
        let n: usize = r.per_rate.iter().map(|x| x.metrics.n_points).sum();
        let weighted: f64 = r.per_rate.iter().map(|x| x.metrics.mae * x.metrics.n_points as f64).sum::<f64>() / n as f64;
        assert!((weighted - r.overall.mae).abs() <= 1e-9);
        assert_eq!(r.to_csv(), evaluate_unfixed(&p, &d, &cfg).unwrap().to_csv());
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(
            pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..60),
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = metrics(&p, &t, 1e-4).unwrap();
            prop_assert!(m.rmse + 1e-12 >= m.mae);
            prop_assert!(m.mae >= 0.0);
        }

        #[test]
        fn raw_metrics_ignore_normalization(
            vals in prop::collection::vec(-5.0f64..5.0, 24), shift in -3.0f64..3.0, scale in 0.5f64..4.0,
        ) {
            // denormalize-then-score gives the same answer for any statistics
            let (zp, zt) = vals.split_at(12);
            let raw_p: Vec<f64> = zp.iter().map(|z| z * 2.0 + 1.0).collect();
            let raw_t: Vec<f64> = zt.iter().map(|z| z * 2.0 + 1.0).collect();
            let s2 = NormStats { mean: vec![shift], std: vec![scale] };
            let p2: Vec<f64> = raw_p.iter().map(|x| s2.denormalize(0, s2.normalize(0, *x))).collect();
            let t2: Vec<f64> = raw_t.iter().map(|x| s2.denormalize(0, s2.normalize(0, *x))).collect();
            let a = metrics(&raw_p, &raw_t, 1e-4).unwrap();
            let b = metrics(&p2, &t2, 1e-4).unwrap();
            prop_assert!((a.mae - b.mae).abs() < 1e-9);
        }
    }
}
