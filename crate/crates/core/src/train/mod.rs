//! Multi-task training.
//!
//! Every iteration draws one task uniformly and a batch of patches from that
//! task only, since stems and class counts differ between tasks. The loss is
//! soft Dice plus cross-entropy over the task's own classes, summed over the
//! supervised decoder scales with weights halving per scale. Parameters are
//! updated by Nesterov SGD with a polynomially decaying learning rate.

mod gradcheck;
mod loss;
mod optim;
mod sampler;
mod trainer;

pub use gradcheck::{
    grad_check_model, relative_error, GradCheckReport, GroupReport, GroupStatus, GRADCHECK_COORDS, GRADCHECK_FLOOR,
    GRADCHECK_STEP, GRADCHECK_TOLERANCE,
};
pub use loss::{deep_supervision_loss, dice_ce_loss, downsample_labels, ds_weights, label_pyramid, DiceCe, ScaleLosses, DICE_EPS};
pub use optim::{sgd_poly_step, OptimizerState, TrainConfig};
pub use sampler::{crop, crop_padding, sample_task_batch, TaskBatch};
pub use trainer::{
    finetune, iteration_rng, periodic_checkpoint_name, sample_loss, trace_csv, train_iteration, train_loop,
    FinetuneOutcome, LossReport, TrainOutputs, FINAL_CHECKPOINT, TRACE_HEADER,
};
pub(crate) use trainer::write_text;
