use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::autodiff::{Precision, Real, Tensor};
use crate::error::{Error, Result};
use crate::harness::RunConfig;
use crate::net::{Model, ModelConfig, TaskRegistry, HEAD_PREFIX};
use crate::train::{OptimizerState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"USEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const TASKS_KEY: &str = "tasks = ";

/// A loaded checkpoint: the run configuration it was written with, the
/// model and the optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub run: RunConfig,
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    /// Precision of the stored payload.
    pub precision: Precision,
}

/// Outcome of loading a pre-trained trunk into a model for a new task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferReport {
    /// Parameters copied from the checkpoint.
    pub loaded: Vec<String>,
    /// Head parameters left at their fresh random initialisation.
    pub reinitialized: Vec<String>,
}

struct Record {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn push_record<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    push_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    push_u32(out, t.rank());
    for &e in t.shape() {
        push_u32(out, e);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serialises `model`, `opt` and the run configuration. The payload uses the
/// precision of `T`.
pub fn checkpoint_bytes<T: Real>(model: &Model<T>, opt: &OptimizerState<T>, train: &TrainConfig) -> Vec<u8> {
    let run = RunConfig {
        model: model.config().clone(),
        train: train.clone(),
        ..RunConfig::default()
    };
    let text = format!("{}{TASKS_KEY}{}\n", run.dump(), model.registry().to_spec_string());

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::PRECISION.byte_width() as u8);
    push_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());

    let store = model.params();
    push_u32(&mut out, store.len());
    for (_, p) in store.iter() {
        push_record(&mut out, &p.name, &p.value);
    }
    let buffers: Vec<_> = store
        .iter()
        .zip(&opt.buffers)
        .filter_map(|((_, p), b)| b.as_ref().map(|b| (&p.name, b)))
        .collect();
    push_u32(&mut out, buffers.len());
    for (name, b) in buffers {
        push_record(&mut out, name, b);
    }
    out.extend_from_slice(&(opt.iteration as u64).to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    model: &Model<T>,
    opt: &OptimizerState<T>,
    train: &TrainConfig,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, checkpoint_bytes(model, opt, train)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.path,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn record(&mut self, width: usize) -> Result<Record> {
        let len = self.u32("name length")?;
        let name = String::from_utf8(self.take(len, "parameter name")?.to_vec())
            .map_err(|_| Error::format(self.path, "parameter name is not UTF-8"))?;
        let rank = self.u32("rank")?;
        if rank > 8 {
            return Err(Error::format(self.path, format!("`{name}` has implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32("extent")).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| {
            Error::format(self.path, format!("`{name}` extents {shape:?} overflow"))
        })?;
        let payload = self.take(n.saturating_mul(width), &format!("payload of `{name}`"))?;
        let data = if width == 4 {
            payload.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect()
        } else {
            payload.chunks_exact(8).map(f64::read_le).collect()
        };
        Ok(Record { name, shape, data })
    }
}

struct Raw {
    precision: Precision,
    run: RunConfig,
    registry: TaskRegistry,
    params: Vec<Record>,
    buffers: Vec<Record>,
    iteration: usize,
}

fn parse(path: &Path, bytes: &[u8]) -> Result<Raw> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "missing USEGCKPT magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::format(
            path,
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let mut r = Reader { bytes: body, pos: 12, path };
    let precision = match r.take(1, "precision tag")?[0] {
        4 => Precision::Single,
        8 => Precision::Double,
        other => return Err(Error::format(path, format!("unknown payload width {other}"))),
    };
    let width = precision.byte_width();
    let len = r.u32("config length")?;
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|_| Error::format(path, "config is not UTF-8"))?;
    let mut tasks = None;
    let mut config = String::new();
    for line in text.lines() {
        match line.strip_prefix(TASKS_KEY) {
            Some(spec) => tasks = Some(spec),
            None => {
                config.push_str(line);
                config.push('\n');
            }
        }
    }
    let registry = TaskRegistry::parse_spec_string(
        tasks.ok_or_else(|| Error::format(path, "config lacks the task list"))?,
    )?;
    let mut run = RunConfig::default();
    run.apply_text(&config)?;
    run.validate()?;

    let n = r.u32("parameter count")?;
    let params = (0..n).map(|_| r.record(width)).collect::<Result<Vec<_>>>()?;
    let n = r.u32("optimizer record count")?;
    let buffers = (0..n).map(|_| r.record(width)).collect::<Result<Vec<_>>>()?;
    let iteration = u64::from_le_bytes(r.take(8, "iteration counter")?.try_into().unwrap()) as usize;
    if r.pos != body.len() {
        return Err(Error::format(path, format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Raw {
        precision,
        run,
        registry,
        params,
        buffers,
        iteration,
    })
}

fn read_raw(path: &Path) -> Result<Raw> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(path, &bytes)
}

fn to_tensor<T: Real>(r: &Record) -> Result<Tensor<T>> {
    Tensor::new(r.shape.clone(), r.data.iter().map(|&v| T::lit(v)).collect())
}

fn name_set_diff(expected: &BTreeSet<&str>, found: &BTreeSet<&str>) -> Option<String> {
    let missing: Vec<_> = expected.difference(found).copied().collect();
    let extra: Vec<_> = found.difference(expected).copied().collect();
    (!missing.is_empty() || !extra.is_empty())
        .then(|| format!("parameter names differ; missing [{}], unexpected [{}]", missing.join(", "), extra.join(", ")))
}

/// Loads a checkpoint, rebuilding the model from the stored configuration.
/// The stored parameter names must equal the model's exactly.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    let mut model = Model::<T>::build(raw.run.model.clone(), raw.registry.clone(), raw.run.train.seed)?;
    let expected: BTreeSet<&str> = model.params().names().collect();
    let found: BTreeSet<&str> = raw.params.iter().map(|r| r.name.as_str()).collect();
    if let Some(msg) = name_set_diff(&expected, &found) {
        return Err(Error::Checkpoint(format!("{}: {msg}", path.display())));
    }
    for rec in &raw.params {
        let id = model.params().id(&rec.name).expect("name sets match");
        let p = model.params_mut().get_mut(id);
        if p.value.shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?} in the checkpoint, model expects {:?}",
                rec.name,
                rec.shape,
                p.value.shape()
            )));
        }
        p.value = to_tensor(rec)?;
    }

    let mut optimizer = OptimizerState::new(model.params());
    optimizer.iteration = raw.iteration;
    for rec in &raw.buffers {
        let id = model.params().id(&rec.name).ok_or_else(|| {
            Error::Checkpoint(format!("optimizer record for unknown parameter `{}`", rec.name))
        })?;
        let slot = optimizer.buffers[id.index()].as_mut().ok_or_else(|| {
            Error::Checkpoint(format!("optimizer record for non-trainable parameter `{}`", rec.name))
        })?;
        if slot.shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint(format!("optimizer record `{}` has shape {:?}", rec.name, rec.shape)));
        }
        *slot = to_tensor(rec)?;
    }
    Ok(Checkpoint {
        run: raw.run,
        model,
        optimizer,
        precision: raw.precision,
    })
}

/// Structural fields on which `a` and `b` disagree. Deep-supervision extent
/// and slot count are not compared: heads are rebuilt anyway and the slot
/// count follows the checkpoint.
pub fn compatibility_mismatches(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut cmp = |name: &str, same: bool| {
        if !same {
            out.push(name.to_string());
        }
    };
    cmp("num_stages", a.num_stages == b.num_stages);
    cmp("base_channels", a.base_channels == b.base_channels);
    cmp("channel_cap", a.channel_cap == b.channel_cap);
    cmp("strides", a.strides == b.strides);
    cmp("fuse_depth", a.fuse_depth == b.fuse_depth);
    cmp("prompt_channels", a.prompt_channels == b.prompt_channels);
    cmp("task_prompt_channels", a.task_prompt_channels == b.task_prompt_channels);
    cmp("variant", a.variant == b.variant);
    cmp("leaky_slope", a.leaky_slope == b.leaky_slope);
    cmp("norm_eps", a.norm_eps == b.norm_eps);
    cmp("patch", a.patch == b.patch);
    out
}

/// Builds a model for `registry` from `request` and copies every non-head
/// parameter from the checkpoint. Heads keep their fresh initialisation from
/// `seed` and are listed in the report. Prompt slots follow the checkpoint,
/// so a single downstream task uses slot 0.
pub fn load_transfer<T: Real>(
    path: impl AsRef<Path>,
    request: &ModelConfig,
    registry: TaskRegistry,
    seed: u64,
) -> Result<(Model<T>, TransferReport)> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    let upstream = &raw.run.model;
    let mismatched = compatibility_mismatches(upstream, request);
    if !mismatched.is_empty() {
        return Err(Error::Compatibility(mismatched));
    }
    let slots = upstream.slots(raw.registry.len());
    if registry.len() > slots {
        return Err(Error::Compatibility(vec![format!(
            "task_slots ({} tasks requested, checkpoint has {slots} prompt slots)",
            registry.len()
        )]));
    }
    let config = ModelConfig {
        task_slots: Some(slots),
        ds_min_extent: request.ds_min_extent,
        ..upstream.clone()
    };
    let mut model = Model::<T>::build(config, registry, seed)?;
    let stored: HashMap<&str, &Record> = raw
        .params
        .iter()
        .filter(|r| !r.name.starts_with(HEAD_PREFIX))
        .map(|r| (r.name.as_str(), r))
        .collect();
    let trunk: BTreeSet<&str> = model.params().names().filter(|n| !n.starts_with(HEAD_PREFIX)).collect();
    let found: BTreeSet<&str> = stored.keys().copied().collect();
    if let Some(msg) = name_set_diff(&trunk, &found) {
        return Err(Error::Checkpoint(format!("{}: {msg}", path.display())));
    }
    let trunk: Vec<String> = trunk.into_iter().map(str::to_string).collect();
    for name in &trunk {
        let rec = stored[name.as_str()];
        let id = model.params().id(name).expect("trunk name");
        let p = model.params_mut().get_mut(id);
        if p.value.shape() != rec.shape.as_slice() {
            return Err(Error::Compatibility(vec![format!(
                "{name} (checkpoint {:?}, model {:?})",
                rec.shape,
                p.value.shape()
            )]));
        }
        p.value = to_tensor(rec)?;
    }
    let reinitialized = model.head_param_names();
    let loaded = model
        .params()
        .names()
        .filter(|n| !n.starts_with(HEAD_PREFIX))
        .map(str::to_string)
        .collect();
    Ok((model, TransferReport { loaded, reinitialized }))
}
