//! The reconstruction pipeline: PSF-guided positional embedding,
//! multi-branch feature extractor, weight-shared data-consistent cascade and
//! magnitude tail, with their losses.

mod config;
mod dc;
mod forward;
mod params;

pub use config::{
    ablation_apply, beta_schedule, format_kv, parse_kv, Ablation, BetaSchedule, BranchMode, McstraConfig, Pipeline,
    PsfInput,
};
pub use dc::{dc_on_tape, raster_to_tensor, tensor_to_raster, zero_filled, DataConsistencyOp};
pub use forward::{
    branch_loss, branch_partition, branch_references, cascade_forward, cascade_loss, collect_report,
    mcstra_forward, mcstra_forward_on_tape, multi_branch_forward, pe_generate, reference_magnitude, tail_forward,
    tail_loss, total_loss, BranchOutput, ForwardVars, LossValues, LossVars, ReconReport, Sample,
};
pub use params::{McstraParams, PARAM_GROUPS};

#[cfg(test)]
mod tests;
