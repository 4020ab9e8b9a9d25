//! Synthetic multi-task volumes, the `UVOL` volume format and manifests.

mod manifest;
mod synth;
mod volume;

pub use manifest::{load_manifest, Manifest, Record, Split, MANIFEST_MAGIC, MANIFEST_VERSION};
pub use synth::{generate_dataset, generate_volume, preset_task_specs, ShapeFamily, TaskSpec, MANIFEST_FILE};
pub use volume::{read_volume, read_volume_header, write_volume, VolumeHeader, VolumeSample, VOLUME_MAGIC, VOLUME_VERSION};
