use std::path::Path;

use crate::error::{MerlinError, Result};
use crate::io::atomic_write;

/// Days in a week; the size of the day-of-week identity table.
pub const DAYS_PER_WEEK: usize = 7;

/// A multivariate series with per-step calendar indices.
///
/// `values[v][t]` is variable `v` at step `t`. `missing[v][t]` marks cells
/// that were replaced by a fill value at some masking stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    values: Vec<Vec<f64>>,
    missing: Vec<Vec<bool>>,
    tod_index: Vec<usize>,
    dow_index: Vec<usize>,
    steps_per_day: usize,
    variable_names: Vec<String>,
    start: usize,
}

impl SeriesFrame {
    /// Builds a frame whose calendar begins at (`start_tod`, `start_dow`).
    pub fn new(
        values: Vec<Vec<f64>>,
        variable_names: Vec<String>,
        steps_per_day: usize,
        start_tod: usize,
        start_dow: usize,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(MerlinError::Data("frame needs at least one variable".into()));
        }
        if steps_per_day == 0 {
            return Err(MerlinError::Config("steps_per_day must be positive".into()));
        }
        if start_tod >= steps_per_day || start_dow >= DAYS_PER_WEEK {
            return Err(MerlinError::Data(format!(
                "calendar start ({start_tod}, {start_dow}) out of range"
            )));
        }
        let len = values[0].len();
        if values.iter().any(|v| v.len() != len) {
            return Err(MerlinError::Data("variables have different lengths".into()));
        }
        if variable_names.len() != values.len() {
            return Err(MerlinError::Data(format!(
                "{} names for {} variables",
                variable_names.len(),
                values.len()
            )));
        }
        let tod_index = (0..len).map(|t| (start_tod + t) % steps_per_day).collect();
        let dow_index = (0..len)
            .map(|t| (start_dow + (start_tod + t) / steps_per_day) % DAYS_PER_WEEK)
            .collect();
        let missing = vec![vec![false; len]; values.len()];
        Ok(Self {
            values,
            missing,
            tod_index,
            dow_index,
            steps_per_day,
            variable_names,
            start: 0,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.tod_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tod_index.is_empty()
    }

    pub fn steps_per_day(&self) -> usize {
        self.steps_per_day
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn series(&self, var: usize) -> &[f64] {
        &self.values[var]
    }

    pub fn value(&self, var: usize, t: usize) -> f64 {
        self.values[var][t]
    }

    pub fn is_missing(&self, var: usize, t: usize) -> bool {
        self.missing[var][t]
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().flatten().filter(|&&m| m).count()
    }

    pub fn tod(&self, t: usize) -> usize {
        self.tod_index[t]
    }

    pub fn dow(&self, t: usize) -> usize {
        self.dow_index[t]
    }

    pub fn tod_index(&self) -> &[usize] {
        &self.tod_index
    }

    pub fn dow_index(&self) -> &[usize] {
        &self.dow_index
    }

    /// Absolute index of this frame's first step in the series it was cut from.
    pub fn start(&self) -> usize {
        self.start
    }

    /// Contiguous sub-range `[from, to)` with calendar and offsets preserved.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.len() {
            return Err(MerlinError::Data(format!(
                "slice [{from}, {to}) out of frame of length {}",
                self.len()
            )));
        }
        Ok(Self {
            values: self.values.iter().map(|v| v[from..to].to_vec()).collect(),
            missing: self.missing.iter().map(|m| m[from..to].to_vec()).collect(),
            tod_index: self.tod_index[from..to].to_vec(),
            dow_index: self.dow_index[from..to].to_vec(),
            steps_per_day: self.steps_per_day,
            variable_names: self.variable_names.clone(),
            start: self.start + from,
        })
    }

    /// Replaces a cell with `fill` and flags it missing.
    pub fn fill_cell(&mut self, var: usize, t: usize, fill: f64) {
        self.values[var][t] = fill;
        self.missing[var][t] = true;
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.values
    }

    /// Resets every flagged cell to its variable's fill value.
    pub fn refill_missing(&mut self, fills: &[f64]) {
        for v in 0..self.n_vars() {
            let fill = fill_for(fills, v);
            for t in 0..self.len() {
                if self.missing[v][t] {
                    self.values[v][t] = fill;
                }
            }
        }
    }

    /// Serializes values as CSV: a header of variable names, then one row per step.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        self.write_rows(|v, t| format!("{}", self.values[v][t]))
    }

    /// Parallel 0/1 CSV of the missing flags, same layout as [`Self::to_csv`].
    pub fn mask_to_csv(&self) -> Result<Vec<u8>> {
        self.write_rows(|v, t| if self.missing[v][t] { "1" } else { "0" }.to_string())
    }

    fn write_rows(&self, cell: impl Fn(usize, usize) -> String) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.variable_names)?;
        for t in 0..self.len() {
            w.write_record((0..self.n_vars()).map(|v| cell(v, t)))?;
        }
        w.into_inner()
            .map_err(|e| MerlinError::Io(std::io::Error::other(e.to_string())))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_csv()?)
    }

    pub fn write_mask_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.mask_to_csv()?)
    }
}

/// `fills` holds either one shared value or one value per variable.
pub(crate) fn fill_for(fills: &[f64], var: usize) -> f64 {
    if fills.len() == 1 {
        fills[0]
    } else {
        fills[var]
    }
}

/// Parses a CSV whose header row names the variables and whose remaining rows
/// are one time step each. Calendar indices start at time-of-day 0 on
/// `start_dow`. Frames shorter than `min_steps` are rejected.
pub fn load_csv(
    path: &Path,
    steps_per_day: usize,
    start_dow: usize,
    min_steps: usize,
) -> Result<SeriesFrame> {
    let bytes = std::fs::read(path)?;
    parse_csv(&bytes, steps_per_day, start_dow, min_steps)
}

pub fn parse_csv(
    bytes: &[u8],
    steps_per_day: usize,
    start_dow: usize,
    min_steps: usize,
) -> Result<SeriesFrame> {
    let text = std::str::from_utf8(bytes).map_err(|e| MerlinError::Load {
        row: 0,
        msg: format!("not UTF-8: {e}"),
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let names: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(MerlinError::Load {
            row: 1,
            msg: "missing header row".into(),
        });
    }
    let mut values = vec![Vec::new(); names.len()];
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != names.len() {
            return Err(MerlinError::Load {
                row,
                msg: format!("expected {} fields, found {}", names.len(), record.len()),
            });
        }
        for (v, field) in record.iter().enumerate() {
            let x: f64 = field.parse().map_err(|_| MerlinError::Load {
                row,
                msg: format!("non-numeric cell {field:?} in column {:?}", names[v]),
            })?;
            if !x.is_finite() {
                return Err(MerlinError::Load {
                    row,
                    msg: format!("non-finite cell {field:?}"),
                });
            }
            values[v].push(x);
        }
    }
    let len = values[0].len();
    if len == 0 || len < min_steps {
        return Err(MerlinError::Load {
            row: len + 1,
            msg: format!("{len} time steps, need at least {}", min_steps.max(1)),
        });
    }
    SeriesFrame::new(values, names, steps_per_day, 0, start_dow)
}
