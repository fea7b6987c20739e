//! Synthetic tasks, a from-scratch trainer, and gradient verification.

mod backprop;
mod gradcheck;
mod task;
mod train;
pub mod vocab;

pub use backprop::{batch_loss, loss_and_grad, Example};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport, FD_STEP, MAX_CHECK_DIM, REL_ERROR_FLOOR};
pub use task::{generate_dataset, generate_split, Dataset, Sample, Split, TaskKind, TaskSpec};
pub use train::{train, TrainConfig, TrainOutcome};
