//! Training orchestration: configuration, the per-iteration step,
//! evaluation, checkpoints and the metrics log.

mod checkpoint;
mod config;
mod eval;
mod step;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use config::{DataSource, LrSchedule, Precision, TrainConfig};
pub use eval::{evaluate, export_embeddings, sidecar_path, EmbeddingSidecar, EvalReport};
pub use step::{
    build_loss_graph, prepare_batch, stream_rng, train_step, LossGraph, PreparedBatch, PseudoTargets, StepBatch, Stream,
    TrainState,
};
pub use trainer::{MetricRecord, TrainData, Trainer, CHECKPOINT_DIR, METRICS_FILE};
