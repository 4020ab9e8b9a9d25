use rand::Rng;

use crate::autodiff::{Real, Tensor, Triple};
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// A task-homogeneous batch of patches.
#[derive(Clone, Debug)]
pub struct TaskBatch<T> {
    pub task_id: usize,
    pub num_classes: usize,
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<Vec<u8>>,
    /// Index of the source volume of every patch.
    pub volumes: Vec<usize>,
    /// Patch origin in the symmetrically zero-padded volume.
    pub offsets: Vec<Triple>,
}

/// Padding added before each axis when `dims` is smaller than `patch`.
pub fn crop_padding(dims: Triple, patch: Triple) -> Triple {
    let mut pad = [0; 3];
    for a in 0..3 {
        pad[a] = patch[a].saturating_sub(dims[a]) / 2;
    }
    pad
}

/// Extracts the `patch`-sized window at `offset` of the volume padded by
/// [`crop_padding`]. Padded voxels are zero with label 0.
pub fn crop<T: Real>(sample: &VolumeSample, patch: Triple, offset: Triple) -> (Tensor<T>, Vec<u8>) {
    let dims = sample.dims();
    let pad = crop_padding(dims, patch);
    let c = sample.channels();
    let [pd, ph, pw] = patch;
    let mut image = vec![T::zero(); c * pd * ph * pw];
    let mut label = vec![0u8; pd * ph * pw];
    let src = |a: usize, i: usize| (i + offset[a]).checked_sub(pad[a]).filter(|&v| v < dims[a]);
    let vox = dims.iter().product::<usize>();
    for z in 0..pd {
        let Some(sz) = src(0, z) else { continue };
        for y in 0..ph {
            let Some(sy) = src(1, y) else { continue };
            for x in 0..pw {
                let Some(sx) = src(2, x) else { continue };
                let s = (sz * dims[1] + sy) * dims[2] + sx;
                let d = (z * ph + y) * pw + x;
                label[d] = sample.label[s];
                for ch in 0..c {
                    image[ch * pd * ph * pw + d] = T::lit(sample.image.data()[ch * vox + s] as f64);
                }
            }
        }
    }
    (Tensor::from_fn(&[c, pd, ph, pw], |i| image[i]), label)
}

fn draw_offset<R: Rng>(sample: &VolumeSample, patch: Triple, fg_prob: f64, rng: &mut R) -> Triple {
    let dims = sample.dims();
    let pad = crop_padding(dims, patch);
    let padded = [0, 1, 2].map(|a| dims[a].max(patch[a]));
    let max_off = [0, 1, 2].map(|a| padded[a] - patch[a]);
    let fg_centre = if rng.random_bool(fg_prob) {
        let fg: Vec<usize> = (0..sample.label.len()).filter(|&i| sample.label[i] > 0).collect();
        (!fg.is_empty()).then(|| {
            let i = fg[rng.random_range(0..fg.len())];
            [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
        })
    } else {
        None
    };
    match fg_centre {
        Some(c) => [0, 1, 2].map(|a| (c[a] + pad[a]).saturating_sub(patch[a] / 2).min(max_off[a])),
        None => [0, 1, 2].map(|a| rng.random_range(0..=max_off[a])),
    }
}

/// Draws a task uniformly, then `batch_size` random volumes of that task and
/// a patch from each. With probability `foreground_crop_prob` a patch is
/// centred on a random foreground voxel.
pub fn sample_task_batch<T: Real, R: Rng>(
    datasets: &[Vec<VolumeSample>],
    patch: Triple,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TaskBatch<T>> {
    if datasets.is_empty() {
        return Err(Error::Usage("no training tasks".into()));
    }
    if let Some(t) = datasets.iter().position(Vec::is_empty) {
        return Err(Error::Usage(format!("task {t} has no training volumes")));
    }
    let task_id = rng.random_range(0..datasets.len());
    let volumes = &datasets[task_id];
    let mut batch = TaskBatch {
        task_id,
        num_classes: volumes[0].num_classes,
        images: Vec::with_capacity(cfg.batch_size),
        labels: Vec::with_capacity(cfg.batch_size),
        volumes: Vec::with_capacity(cfg.batch_size),
        offsets: Vec::with_capacity(cfg.batch_size),
    };
    for _ in 0..cfg.batch_size {
        let v = rng.random_range(0..volumes.len());
        let offset = draw_offset(&volumes[v], patch, cfg.foreground_crop_prob, rng);
        let (image, label) = crop(&volumes[v], patch, offset);
        batch.images.push(image);
        batch.labels.push(label);
        batch.volumes.push(v);
        batch.offsets.push(offset);
    }
    Ok(batch)
}
