//! Training and evaluation of spatial-temporal identity MLP forecasters that
//! stay accurate when an unknown fraction of the input history is missing.
//!
//! A teacher model is fit on complete windows. A student of identical shape
//! then learns from several masked copies of each window at once, pulled
//! toward the teacher's hidden states and forecasts and toward agreement
//! across its own masked views through a contrastive objective.

pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{MerlinError, Result};
pub use tensor::{Tape, Tensor, Var};
