//! Optimisation, the training loop, checkpoints and evaluation sweeps.

mod ablate;
mod config;
mod eval;
mod optim;
mod state;
mod train;

pub use ablate::{ablation_csv, run_ablations, save_ablation_csv, AblationResult, ABLATION_HEADER};
pub use config::{RunConfig, TrainConfig};
pub use eval::{evaluate, EvalEntry, EvalTable, Method, Sweep, ACCEL_SWEEP, EVAL_HEADER, SNR_SWEEP};
pub use optim::{clip_global_norm, RmsProp};
pub use state::{checkpoint_config_path, load_checkpoint, load_checkpoint_with, save_checkpoint};
pub use train::{
    mask_protocol, mask_seed, train, validate, LogRow, LogSplit, StepInfo, TrainLog, TrainState, ValSummary,
    TRAIN_LOG_HEADER,
};

#[cfg(test)]
mod tests;
