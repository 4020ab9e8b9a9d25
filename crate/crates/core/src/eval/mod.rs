//! Sliding-window inference and Dice evaluation.
//!
//! A volume is tiled with patch-sized windows. Softmax probabilities over the
//! task's own classes, taken from the highest-resolution head, are summed
//! with uniform weight, divided by the number of windows covering each voxel
//! and reduced by argmax.

mod report;
mod window;

pub use report::{dice_metric, evaluate, EvalReport, Segmenter, SlidingWindow, TaskDice, VolumeDice};
pub use window::{sliding_window_infer, sliding_window_probs, window_positions, WindowModel, DEFAULT_OVERLAP};
