//! Prompt-driven universal 3D segmentation at desk scale.
//!
//! One encoder-decoder network segments several volumetric tasks with
//! different modalities and label sets. A learnable universal prompt is fused
//! with the bottleneck features into one prompt per task, and the prompt of the
//! ongoing task is fed to the decoder together with the image features.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`] – dense tensors, the reverse-mode tape and the 3D operators.
//! * [`net`] – task registry, model configuration, the network and its variants.
//! * [`train`] – losses, SGD with polynomial decay, sampling, training loops,
//!   fine-tuning and the finite-difference gradient harness.
//! * [`data`] – synthetic volumetric tasks, the volume file format and manifests.
//! * [`eval`] – sliding-window inference and Dice evaluation.
//! * [`harness`] – run configuration files and checkpoints.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod net;
pub mod train;

pub use autodiff::{Graph, ParamStore, Precision, Real, Tensor, Var};
pub use error::{Error, Result};
