//! Losses, the two training stages, evaluation and the gradient-check
//! suite.

mod adam;
mod config;
mod eval;
pub mod gradcheck;
mod loss;
mod train;

pub use adam::{Adam, AdamConfig};
pub use config::{LossWeights, TrainConfig};
pub use eval::{evaluate, render_frames, score_frames, view_sweep, EvalReport, FrameScore, SweepRow, SWEEP_VIEWS};
pub use gradcheck::{run_gradcheck, ModuleReport, MODULES};
pub use loss::{lower_reconstruction_loss, reconstruction_loss, total_loss, LossParts};
pub use train::{
    changed_params, checkpoint_metadata, checkpoint_poses, is_latent_param, is_pretrained, model_from_checkpoint, pretrain, run_pretrain,
    run_train, train, write_json, PoseSet, PretrainMetrics, PretrainOutcome, PretrainRecord, StepRecord, TrainMetrics, TrainOutcome, CHECKPOINT_FILE,
    LAST_GOOD_FILE, METRICS_FILE, PRETRAIN_CHECKPOINT_FILE, PRETRAIN_METRICS_FILE, PRETRAIN_PREFIXES,
};

#[cfg(test)]
mod tests;
