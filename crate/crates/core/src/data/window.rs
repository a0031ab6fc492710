use super::frame::SeriesFrame;
use crate::error::{MerlinError, Result};
use crate::tensor::Tensor;

/// One (history, future) training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// History `[n_vars, n_history, 1]`.
    pub x: Tensor,
    /// Future truth `[n_vars, n_future]`, starting one step after the history.
    pub y: Tensor,
    /// Time-of-day index at the last history step.
    pub tod: usize,
    /// Day-of-week index at the last history step.
    pub dow: usize,
    /// Absolute index of the last history step.
    pub origin_t: usize,
    /// History cells already filled upstream, flattened like `x`.
    pub missing: Vec<bool>,
}

impl WindowSample {
    pub fn n_vars(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn cells(&self) -> usize {
        self.x.numel()
    }
}

pub fn make_windows(frame: &SeriesFrame, n_history: usize, n_future: usize, stride: usize) -> Result<Vec<WindowSample>> {
    make_windows_from(frame, frame, n_history, n_future, stride)
}

/// Windows whose history is read from `history` and whose targets come from
/// `target`. Both frames must cover the same steps.
pub fn make_windows_from(
    history: &SeriesFrame,
    target: &SeriesFrame,
    n_history: usize,
    n_future: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if n_history == 0 || n_future == 0 || stride == 0 {
        return Err(MerlinError::Config(
            "history, future and stride must be positive".into(),
        ));
    }
    if history.len() != target.len() || history.n_vars() != target.n_vars() || history.start() != target.start() {
        return Err(MerlinError::Dimension(
            "history and target frames cover different cells".into(),
        ));
    }
    let len = history.len();
    if len < n_history + n_future {
        return Ok(Vec::new());
    }
    let n_vars = history.n_vars();
    let mut out = Vec::with_capacity((len - n_history - n_future) / stride + 1);
    let mut start = 0;
    while start + n_history + n_future <= len {
        let last = start + n_history - 1;
        let mut xs = Vec::with_capacity(n_vars * n_history);
        let mut missing = Vec::with_capacity(n_vars * n_history);
        let mut ys = Vec::with_capacity(n_vars * n_future);
        for v in 0..n_vars {
            xs.extend_from_slice(&history.series(v)[start..=last]);
            missing.extend((start..=last).map(|t| history.is_missing(v, t)));
            ys.extend_from_slice(&target.series(v)[last + 1..last + 1 + n_future]);
        }
        out.push(WindowSample {
            x: Tensor::new(vec![n_vars, n_history, 1], xs)?,
            y: Tensor::new(vec![n_vars, n_future], ys)?,
            tod: history.tod(last),
            dow: history.dow(last),
            origin_t: history.start() + last,
            missing,
        });
        start += stride;
    }
    Ok(out)
}
