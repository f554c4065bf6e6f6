//! Deterministic desk-scale training on synthetic tasks.

mod model;
mod task;
mod train;

pub use model::{argmax_rows, cross_entropy, ModelShape, SequenceForward, ToyModel};
pub use task::{
    generate_dataset, shifted_targets, Dataset, Example, Task, ToyTaskSpec, RESERVED_TOKEN,
};
pub use train::{
    evaluate, train, train_with_progress, write_run_dir, EvalResult, PiMode, Progress, RunConfig,
    TrainConfig, TrainOutcome,
};
