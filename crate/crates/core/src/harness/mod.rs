//! Run configuration files and checkpoints.
//!
//! Configuration files hold `key = value` lines; `#` starts a comment.
//! Checkpoints are little-endian binary files:
//!
//! ```text
//! "USEGCKPT" | version u32 | payload width u8 (4 or 8)
//! config length u32 | config text (canonical dump plus a `tasks = ` line)
//! parameter count u32 | records
//! optimizer record count u32 | records
//! iteration u64 | crc32 of everything before u32
//! record = name length u32 | name | rank u32 | extents u32.. | values
//! ```

mod checkpoint;
mod config;

pub use checkpoint::{
    checkpoint_bytes, compatibility_mismatches, load_checkpoint, load_transfer, save_checkpoint, Checkpoint,
    TransferReport, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{parse_config, RunConfig, CONFIG_KEYS};
