//! The prompt-driven segmentation network.
//!
//! Modality stems feed a shared encoder. The bottleneck features `F` are
//! concatenated with a learnable universal prompt and passed through the FUSE
//! blocks, whose output is split channel-wise into one prompt per task. The
//! prompt of the ongoing task is concatenated with `F` as the decoder input.
//! Every supervised decoder scale ends in a 1x1x1 head whose width is the
//! largest class count over all tasks.

mod config;
mod model;
mod registry;

pub use config::{ModelConfig, PromptChannels, Variant};
pub use model::{dynamic_param_count, EncoderOutput, Model, TaskPromptSet, DYNAMIC_WIDTH, HEAD_PREFIX};
pub use registry::{TaskDescriptor, TaskRegistry, SUPPORTED_IN_CHANNELS};
