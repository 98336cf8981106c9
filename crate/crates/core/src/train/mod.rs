//! Adversarial training loop, checkpoints and reconstruction.

mod checkpoint;
mod config;
mod engine;
mod log;
mod reconstruct;

pub use checkpoint::{checkpoint_of, load_checkpoint, resume, save_checkpoint, state_from, Checkpoint, MAGIC, VERSION};
pub use config::{parse_kv, TrainConfig};
pub use engine::{
    early_stop_check, epoch_order, evaluate, generate_for, make_batch, run, train_step, validation_split, Batch,
    CheckpointDir, EvalSummary, ImageScore, RunOutcome, StepOutcome, StopReason, TrainState,
};
pub use log::{EpochRow, SigmaRow, StepRow, TrainLog, EPOCH_HEADER, SIGMA_HEADER, STEP_HEADER};
pub use reconstruct::{reconstruct_dir, ReconstructOptions};
