//! The STID backbone and its checkpoint format.

mod checkpoint;
mod stid;

pub use checkpoint::{Checkpoint, MAGIC};
pub(crate) use stid::fan_in_uniform;
pub use stid::{BoundBlock, BoundStid, EncoderBlock, Mode, StidConfig, StidOutput, StidParams};
