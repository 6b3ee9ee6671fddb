//! Two-stage training: configuration, schedules, the optimizer,
//! checkpoints and the stage runner.

mod adam;
mod checkpoint;
mod config;
mod schedule;
mod stage;

pub use adam::{Optimizer, StepStats};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, inspect_checkpoint, load_checkpoint, save_checkpoint,
    Checkpoint, CheckpointMeta, CheckpointSummary, DType, RngStates, TensorInfo, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{AdamHyper, OptimizerKind, ScheduleKind, ScheduleSpec, TrainConfig};
pub use schedule::lr_at;
pub use stage::{
    init_model, run_stage, BatchStream, EpochPlan, EpochReport, StageOutput, StageStart,
    TrainReport,
};
