use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::harness::{load_transfer, save_checkpoint, TransferReport};
use crate::net::{Model, ModelConfig, TaskDescriptor, TaskRegistry};
use crate::train::{
    deep_supervision_loss, ds_weights, label_pyramid, sample_task_batch, sgd_poly_step, OptimizerState, ScaleLosses,
    TaskBatch, TrainConfig,
};

/// Loss values of one training iteration, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub iteration: usize,
    pub task_id: usize,
    pub lr: f64,
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
    pub per_scale: Vec<f64>,
}

pub const TRACE_HEADER: &str = "iteration,task_id,lr,total,dice,ce";

impl LossReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration, self.task_id, self.lr, self.total, self.dice, self.ce
        )
    }
}

pub fn trace_csv(trace: &[LossReport]) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for r in trace {
        writeln!(s, "{}", r.csv_row()).unwrap();
    }
    s
}

/// Random stream of one iteration. Deriving it from the iteration index
/// makes a resumed run draw the same batches as an uninterrupted one.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Deep-supervision loss of `model` on one image.
pub fn sample_loss<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    image: &Tensor<T>,
    labels: &[u8],
    task_id: usize,
    weights: &[f64],
) -> Result<(Var, ScaleLosses)> {
    let k_t = model.registry().get(task_id)?.num_classes;
    let x = g.input(image.clone());
    let logits = model.forward(g, x, task_id)?;
    let pyramid = label_pyramid(g, &logits, labels, image.spatial())?;
    deep_supervision_loss(g, &logits, &pyramid, k_t, weights)
}

/// Forward and backward on every sample of `batch` with gradients averaged
/// over the batch, followed by one optimizer step.
pub fn train_iteration<T: Real>(
    model: &mut Model<T>,
    batch: &TaskBatch<T>,
    cfg: &TrainConfig,
    opt: &mut OptimizerState<T>,
) -> Result<LossReport> {
    if batch.images.is_empty() || batch.images.len() != batch.labels.len() {
        return Err(Error::Usage(format!(
            "batch holds {} images and {} label maps",
            batch.images.len(),
            batch.labels.len()
        )));
    }
    let weights = ds_weights(model.supervised_stages().len(), cfg.ds_decay);
    let scale = 1.0 / batch.images.len() as f64;
    let mut report = LossReport {
        iteration: opt.iteration,
        task_id: batch.task_id,
        lr: 0.0,
        total: 0.0,
        dice: 0.0,
        ce: 0.0,
        per_scale: vec![0.0; weights.len()],
    };
    model.params_mut().zero_grad();
    for (image, labels) in batch.images.iter().zip(&batch.labels) {
        let mut g = Graph::new();
        let (loss, parts) = sample_loss(model, &mut g, image, labels, batch.task_id, &weights)?;
        g.backward_into(loss, model.params_mut(), scale)?;
        report.total += scale * parts.total;
        report.dice += scale * parts.dice;
        report.ce += scale * parts.ce;
        for (acc, v) in report.per_scale.iter_mut().zip(&parts.per_scale) {
            *acc += scale * v;
        }
    }
    report.lr = sgd_poly_step(model.params_mut(), opt, cfg)?;
    Ok(report)
}

/// Where [`train_loop`] writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Checkpoints go to `iter_NNNNNN.ckpt` every `checkpoint_every`
    /// iterations and to `final.ckpt` at the end.
    pub checkpoint_dir: Option<PathBuf>,
    /// CSV loss trace of the iterations run by this call.
    pub trace_path: Option<PathBuf>,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn periodic_checkpoint_name(iteration: usize) -> String {
    format!("iter_{iteration:06}.ckpt")
}

/// Runs iterations `opt.iteration .. cfg.max_iterations`. `datasets[t]`
/// holds the training volumes of task `t`. `on_iteration` sees every report.
pub fn train_loop<T: Real>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    datasets: &[Vec<VolumeSample>],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    mut on_iteration: impl FnMut(&LossReport),
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if datasets.len() != model.registry().len() {
        return Err(Error::Task(format!(
            "{} training sets for {} registered tasks",
            datasets.len(),
            model.registry().len()
        )));
    }
    for (t, task) in model.registry().tasks().iter().enumerate() {
        if let Some(s) = datasets[t]
            .iter()
            .find(|s| s.channels() != task.in_channels || s.num_classes != task.num_classes)
        {
            return Err(Error::Task(format!(
                "task {t} (`{}`) expects {} channels and {} classes, a volume has {} and {}",
                task.name,
                task.in_channels,
                task.num_classes,
                s.channels(),
                s.num_classes
            )));
        }
    }
    let patch = model.config().patch;
    let mut trace = Vec::new();
    while opt.iteration < cfg.max_iterations {
        let it = opt.iteration;
        let mut rng = iteration_rng(cfg.seed, it);
        let batch = sample_task_batch::<T, _>(datasets, patch, cfg, &mut rng)?;
        let report = train_iteration(model, &batch, cfg, opt)?;
        on_iteration(&report);
        trace.push(report);
        if let Some(dir) = &outputs.checkpoint_dir {
            let done = it + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.max_iterations {
                save_checkpoint(dir.join(periodic_checkpoint_name(done)), model, opt, cfg)?;
            }
        }
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        save_checkpoint(dir.join(FINAL_CHECKPOINT), model, opt, cfg)?;
    }
    if let Some(path) = &outputs.trace_path {
        write_text(path, &trace_csv(&trace))?;
    }
    Ok(trace)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A fine-tuned single-task model.
#[derive(Clone, Debug)]
pub struct FinetuneOutcome<T> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub transfer: TransferReport,
    pub trace: Vec<LossReport>,
}

/// Loads the pre-trained trunk from `checkpoint` with freshly initialised
/// heads sized for `task`, then trains on `train` for `cfg.max_iterations`.
/// The downstream model has the single task 0, which selects prompt slot 0.
pub fn finetune<T: Real>(
    checkpoint: &Path,
    request: &ModelConfig,
    task: &TaskDescriptor,
    train: &[VolumeSample],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    on_iteration: impl FnMut(&LossReport),
) -> Result<FinetuneOutcome<T>> {
    let desc = TaskDescriptor::new(0, task.name.clone(), task.in_channels, task.num_classes)?;
    let registry = TaskRegistry::new(vec![desc])?;
    let (mut model, transfer) = load_transfer::<T>(checkpoint, request, registry, cfg.seed)?;
    let mut optimizer = OptimizerState::new(model.params());
    let data: Vec<VolumeSample> = train
        .iter()
        .cloned()
        .map(|mut s| {
            s.task_id = 0;
            s
        })
        .collect();
    let trace = train_loop(&mut model, &mut optimizer, &[data], cfg, outputs, on_iteration)?;
    Ok(FinetuneOutcome {
        model,
        optimizer,
        transfer,
        trace,
    })
}
