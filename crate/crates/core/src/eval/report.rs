use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Real, Tensor, Triple};
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::eval::{sliding_window_infer, WindowModel};
use crate::net::{Model, TaskRegistry};

/// `2 |P_c ∩ G_c| / (|P_c| + |G_c|)`, and 1 when class `c` is absent from
/// both.
pub fn dice_metric(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} voxels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (pa, gb) = (a == class, b == class);
        p += pa as usize;
        g += gb as usize;
        inter += (pa && gb) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Produces a label map for a whole volume.
pub trait Segmenter {
    fn segment(&self, sample: &VolumeSample) -> Result<Vec<u8>>;
}

/// Sliding-window segmentation with a [`WindowModel`].
pub struct SlidingWindow<'a, M> {
    pub model: &'a M,
    pub window: Triple,
    pub overlap: f64,
}

impl<'a, T: Real> SlidingWindow<'a, Model<T>> {
    /// Windows of the model's training patch size.
    pub fn for_model(model: &'a Model<T>, overlap: f64) -> Self {
        SlidingWindow {
            model,
            window: model.config().patch,
            overlap,
        }
    }
}

impl<T: Real> Segmenter for SlidingWindow<'_, Model<T>> {
    fn segment(&self, sample: &VolumeSample) -> Result<Vec<u8>> {
        let image: Tensor<T> = sample.image.cast();
        sliding_window_infer::<T, _>(self.model, &image, sample.task_id, self.window, self.overlap)
    }
}

impl<S: Segmenter + ?Sized> Segmenter for &S {
    fn segment(&self, sample: &VolumeSample) -> Result<Vec<u8>> {
        (**self).segment(sample)
    }
}

/// Any window model can be evaluated on whole volumes through a borrowed
/// sliding window.
impl<T: Real, M: WindowModel<T>> WindowModel<T> for &M {
    fn task_classes(&self, task_id: usize) -> Result<usize> {
        (**self).task_classes(task_id)
    }

    fn window_probs(&self, window: &Tensor<T>, task_id: usize) -> Result<Tensor<T>> {
        (**self).window_probs(window, task_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeDice {
    pub task_id: usize,
    /// Position of the volume within its task's test set.
    pub index: usize,
    /// Dice of classes `1..K_t`.
    pub per_class: Vec<f64>,
    /// Mean of `per_class`.
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDice {
    pub task_id: usize,
    pub name: String,
    /// Mean over the task's test volumes.
    pub dice: f64,
    pub volumes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tasks: Vec<TaskDice>,
    pub volumes: Vec<VolumeDice>,
    /// Arithmetic mean of the per-task values.
    pub mean: f64,
}

impl EvalReport {
    /// `task,name,dice` rows by task id and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,name,dice\n");
        for t in &self.tasks {
            writeln!(s, "{},{},{}", t.task_id, t.name, t.dice).unwrap();
        }
        writeln!(s, "mean,,{}", self.mean).unwrap();
        s
    }

    /// One row per test volume: `task,volume,dice,class_1,...`.
    pub fn volumes_csv(&self) -> String {
        let mut s = String::from("task,volume,dice,per_class\n");
        for v in &self.volumes {
            let classes: Vec<String> = v.per_class.iter().map(f64::to_string).collect();
            writeln!(s, "{},{},{},{}", v.task_id, v.index, v.dice, classes.join(";")).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::train::write_text(path.as_ref(), &self.to_csv())
    }

    pub fn task(&self, task_id: usize) -> Option<&TaskDice> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }
}

/// Segments every test volume. `test[t]` holds the test volumes of task `t`.
pub fn evaluate<S: Segmenter + ?Sized>(segmenter: &S, test: &[Vec<VolumeSample>], registry: &TaskRegistry) -> Result<EvalReport> {
    if test.len() != registry.len() {
        return Err(Error::Task(format!(
            "{} test sets for {} registered tasks",
            test.len(),
            registry.len()
        )));
    }
    let mut tasks = Vec::with_capacity(registry.len());
    let mut volumes = Vec::new();
    for task in registry.tasks() {
        let set = &test[task.task_id];
        if set.is_empty() {
            return Err(Error::Usage(format!("task {} (`{}`) has no test volumes", task.task_id, task.name)));
        }
        let mut sum = 0.0;
        for (index, sample) in set.iter().enumerate() {
            if sample.num_classes != task.num_classes {
                return Err(Error::Task(format!(
                    "test volume {index} of task `{}` has {} classes, expected {}",
                    task.name, sample.num_classes, task.num_classes
                )));
            }
            let pred = segmenter.segment(sample)?;
            let per_class = (1..task.num_classes)
                .map(|c| dice_metric(&pred, &sample.label, c as u8))
                .collect::<Result<Vec<_>>>()?;
            let dice = per_class.iter().sum::<f64>() / per_class.len() as f64;
            sum += dice;
            volumes.push(VolumeDice {
                task_id: task.task_id,
                index,
                per_class,
                dice,
            });
        }
        tasks.push(TaskDice {
            task_id: task.task_id,
            name: task.name.clone(),
            dice: sum / set.len() as f64,
            volumes: set.len(),
        });
    }
    let mean = tasks.iter().map(|t| t.dice).sum::<f64>() / tasks.len() as f64;
    Ok(EvalReport { tasks, volumes, mean })
}
