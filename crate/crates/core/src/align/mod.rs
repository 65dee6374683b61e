//! Value-gradient guidance for flow matching alignment: the value-gradient
//! field parametrization, the consistency/boundary/matching losses with
//! finite-difference kernels, transition subsampling, percentile gradient
//! clipping, and the round-based training loop.

mod gfield;
mod losses;
mod train;

pub use gfield::{
    one_step_prediction, percentile_clip, percentile_threshold, EtaSchedule, FnGradField,
    GradField, ValueGradientField,
};
pub use losses::{
    boundary_loss, boundary_loss_tape, consistency_backup_loss_tape, consistency_loss,
    consistency_loss_tape,
    consistency_residual, matching_loss, matching_loss_tape, subsample_indices,
    subsample_transitions, ConsistencyMode, Transition, TransitionBatch,
};
pub use train::{
    vgg_flow_train, FinetuneConfig, PhiObjective, RoundRecord, VggFlowResult, VggFlowTrainer,
};
