//! Series ingestion, synthesis, splitting, normalization, windowing and
//! missing-value masking.

mod dataset;
mod frame;
mod mask;
mod prep;
mod synth;
mod window;

pub use dataset::{DataConfig, Dataset};
pub use frame::{load_csv, parse_csv, SeriesFrame, DAYS_PER_WEEK};
pub use mask::{
    apply_mask, apply_mask_with, make_views, mask_window, masked_count, premask_training,
    segment_unfixed_mask, select_cells, validate_rates, MaskPlan, MaskSpace, Segment,
    UnfixedMask, DEFAULT_RATES,
};
pub use prep::{apply_norm, fit_norm, invert_norm, split, NormStats, STD_EPS};
pub use synth::{synth_generate, SynthConfig};
pub use window::{make_windows, make_windows_from, WindowSample};
