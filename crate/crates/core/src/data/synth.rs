use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tensor, Triple};
use crate::data::{write_volume, Manifest, Record, Split, VolumeSample};
use crate::error::{Error, Result};
use crate::net::SUPPORTED_IN_CHANNELS;

/// Gain applied to the class contrast in each input channel.
const CHANNEL_GAINS: [f32; 4] = [1.0, -0.7, 0.5, 1.3];
const MAX_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Spheres,
    Boxes,
    Tubes,
}

impl ShapeFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeFamily::Spheres => "spheres",
            ShapeFamily::Boxes => "boxes",
            ShapeFamily::Tubes => "tubes",
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spheres" => Ok(ShapeFamily::Spheres),
            "boxes" => Ok(ShapeFamily::Boxes),
            "tubes" => Ok(ShapeFamily::Tubes),
            other => Err(Error::Config(format!("unknown shape family `{other}`"))),
        }
    }
}

/// Recipe for one synthetic segmentation task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub in_channels: usize,
    pub num_classes: usize,
    pub dims: Triple,
    pub num_train: usize,
    pub num_test: usize,
    pub family: ShapeFamily,
    /// Base intensity of every class, background included.
    pub contrast: Vec<f32>,
    pub noise_sigma: f32,
    pub seed: u64,
    /// Accepted range of the foreground voxel fraction.
    pub foreground_band: (f64, f64),
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, in_channels: usize, num_classes: usize, family: ShapeFamily, seed: u64) -> Self {
        TaskSpec {
            name: name.into(),
            in_channels,
            num_classes,
            dims: [16, 32, 32],
            num_train: 30,
            num_test: 10,
            family,
            contrast: (0..num_classes).map(|c| c as f32).collect(),
            noise_sigma: 0.35,
            seed,
            foreground_band: (0.005, 0.30),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("task spec `{}`: {msg}", self.name)));
        if !SUPPORTED_IN_CHANNELS.contains(&self.in_channels) {
            return Err(Error::UnsupportedModality(self.in_channels));
        }
        if !(2..=255).contains(&self.num_classes) {
            return bad(format!("class count {} outside 2..=255", self.num_classes));
        }
        if self.dims.iter().any(|&d| d < 16) {
            return bad(format!("every extent must be at least 16, got {:?}", self.dims));
        }
        if self.num_train == 0 {
            return bad("needs at least one training volume".into());
        }
        if self.contrast.len() != self.num_classes {
            return bad(format!("{} contrasts for {} classes", self.contrast.len(), self.num_classes));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be finite and non-negative", self.noise_sigma));
        }
        let (lo, hi) = self.foreground_band;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad(format!("foreground band ({lo}, {hi}) is not an interval in [0, 1]"));
        }
        Ok(())
    }
}

const PRESETS: [(&str, usize, usize, ShapeFamily); 6] = [
    ("organ", 1, 2, ShapeFamily::Spheres),
    ("tumor", 2, 3, ShapeFamily::Boxes),
    ("brain", 4, 5, ShapeFamily::Tubes),
    ("vessel", 1, 3, ShapeFamily::Tubes),
    ("lesion", 2, 2, ShapeFamily::Spheres),
    ("cardiac", 4, 3, ShapeFamily::Boxes),
];

/// The first `n` of a fixed rotation of task recipes. The first three cover
/// one, two and four channels with 2, 3 and 5 classes.
pub fn preset_task_specs(n: usize, seed: u64) -> Vec<TaskSpec> {
    (0..n)
        .map(|i| {
            let (name, ch, k, family) = PRESETS[i % PRESETS.len()];
            let name = if i < PRESETS.len() {
                name.to_string()
            } else {
                format!("{name}{}", i / PRESETS.len())
            };
            TaskSpec::new(name, ch, k, family, seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
        })
        .collect()
}

fn paint(label: &mut [u8], dims: Triple, class: u8, inside: impl Fn(f64, f64, f64) -> bool) {
    let [d, h, w] = dims;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if inside(z as f64, y as f64, x as f64) {
                    label[(z * h + y) * w + x] = class;
                }
            }
        }
    }
}

fn place(rng: &mut ChaCha8Rng, family: ShapeFamily, dims: Triple, label: &mut [u8], class: u8) {
    let ext = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> [f64; 3] {
        let f = rng.random_range(lo..hi);
        [f * dims[0] as f64, f * dims[1] as f64, f * dims[2] as f64]
    };
    let centre = |rng: &mut ChaCha8Rng, r: [f64; 3]| -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            let hi = (dims[a] as f64 - 1.0 - r[a]).max(r[a] + 1e-3);
            c[a] = rng.random_range(r[a]..hi);
        }
        c
    };
    match family {
        ShapeFamily::Spheres => {
            let r = ext(rng, 0.12, 0.25);
            let c = centre(rng, r);
            paint(label, dims, class, |z, y, x| {
                let q = [(z - c[0]) / r[0], (y - c[1]) / r[1], (x - c[2]) / r[2]];
                q.iter().map(|v| v * v).sum::<f64>() <= 1.0
            });
        }
        ShapeFamily::Boxes => {
            let r = ext(rng, 0.10, 0.22);
            let c = centre(rng, r);
            paint(label, dims, class, |z, y, x| {
                (z - c[0]).abs() <= r[0] && (y - c[1]).abs() <= r[1] && (x - c[2]).abs() <= r[2]
            });
        }
        ShapeFamily::Tubes => {
            let axis = rng.random_range(0..3);
            let mut r = ext(rng, 0.08, 0.15);
            r[axis] = rng.random_range(0.25..0.45) * dims[axis] as f64;
            let c = centre(rng, r);
            paint(label, dims, class, |z, y, x| {
                let p = [z, y, x];
                let mut radial = 0.0;
                for a in (0..3).filter(|&a| a != axis) {
                    radial += ((p[a] - c[a]) / r[a]).powi(2);
                }
                radial <= 1.0 && (p[axis] - c[axis]).abs() <= r[axis]
            });
        }
    }
}

/// Generates volume `index` of `spec`. Classes are painted in increasing
/// order, so a higher class wins where structures overlap. Layouts that miss
/// a class or leave the foreground band are redrawn.
pub fn generate_volume(spec: &TaskSpec, index: u64, task_id: usize) -> Result<VolumeSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let dims = spec.dims;
    let vox: usize = dims.iter().product();
    let (lo, hi) = spec.foreground_band;
    let label = (0..MAX_ATTEMPTS)
        .find_map(|_| {
            let mut label = vec![0u8; vox];
            for c in 1..spec.num_classes {
                place(&mut rng, spec.family, dims, &mut label, c as u8);
            }
            let mut counts = vec![0usize; spec.num_classes];
            for &l in &label {
                counts[l as usize] += 1;
            }
            let fg = (vox - counts[0]) as f64 / vox as f64;
            let ok = counts[1..].iter().all(|&n| n > 0) && (lo..=hi).contains(&fg);
            ok.then_some(label)
        })
        .ok_or_else(|| {
            Error::Config(format!(
                "task spec `{}`: no layout within {MAX_ATTEMPTS} attempts satisfies the foreground band",
                spec.name
            ))
        })?;

    let noise = Normal::new(0.0f32, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(spec.in_channels * vox);
    for gain in &CHANNEL_GAINS[..spec.in_channels] {
        for &l in &label {
            data.push(gain * spec.contrast[l as usize] + noise.sample(&mut rng));
        }
    }
    let image = Tensor::new(vec![spec.in_channels, dims[0], dims[1], dims[2]], data)?;
    VolumeSample::new(image, label, spec.num_classes, task_id)
}

/// Writes every task's volumes under `out/<task name>/` and the manifest to
/// `out/manifest.txt`. Task ids follow the order of `specs`.
pub fn generate_dataset(specs: &[TaskSpec], seed: u64, out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    if specs.is_empty() {
        return Err(Error::Config("no task specs given".into()));
    }
    let mut names = HashSet::new();
    for s in specs {
        s.validate()?;
        if !names.insert(s.name.as_str()) {
            return Err(Error::Config(format!("duplicate task name `{}`", s.name)));
        }
    }
    let mut manifest = Manifest::new(seed, out);
    for (task_id, spec) in specs.iter().enumerate() {
        let dir = out.join(&spec.name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let volumes = (0..spec.num_train)
            .map(|i| (Split::Train, i))
            .chain((0..spec.num_test).map(|i| (Split::Test, i)));
        for (index, (split, i)) in volumes.enumerate() {
            let sample = generate_volume(spec, index as u64, task_id)?;
            let rel = PathBuf::from(&spec.name).join(format!("{split}_{i:03}.uvol"));
            write_volume(&sample, out.join(&rel))?;
            manifest.records.push(Record {
                path: rel,
                task_id,
                split,
            });
        }
    }
    manifest.write(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub const MANIFEST_FILE: &str = "manifest.txt";
