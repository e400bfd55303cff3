//! Adam, the step-halving learning-rate schedule, checkpoints and the
//! training loop.

mod adam;
pub mod checkpoint;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use train::{lr_schedule, train_loop, HistoryRow, TrainConfig, TrainOutcome, Validation};
