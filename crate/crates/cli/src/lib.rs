//! Command-line surface: data generation, training, evaluation,
//! fine-tuning, gradient checking and the prompt ablation.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use uniseg::data::{generate_dataset, load_manifest, preset_task_specs, Manifest, Split, VolumeSample, MANIFEST_FILE};
use uniseg::eval::{evaluate, EvalReport, SlidingWindow};
use uniseg::harness::{load_checkpoint, parse_config, RunConfig};
use uniseg::net::{Model, ModelConfig, TaskDescriptor, TaskRegistry, Variant};
use uniseg::train::{
    finetune, grad_check_model, train_loop, GradCheckReport, LossReport, OptimizerState, TrainOutputs,
    FINAL_CHECKPOINT,
};
use uniseg::{Error, Precision, Real};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const TRACE_FILE: &str = "trace.csv";
pub const CONFIG_DUMP_FILE: &str = "config.txt";
pub const REPORT_FILE: &str = "report.csv";
pub const COMPARE_FILE: &str = "compare.csv";

/// Probe volume of `gradcheck`.
pub const GRADCHECK_PROBE: [usize; 3] = [8, 16, 16];

#[derive(Parser, Debug)]
#[command(name = "uniseg", about = "Prompt-driven universal 3D segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-task dataset.
    GenData {
        #[arg(long, default_value_t = 3)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model jointly on the tasks of a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train on these manifest task ids only (comma separated).
        #[arg(long, value_delimiter = ',')]
        task_ids: Vec<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sliding-window evaluation of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write one row per test volume.
        #[arg(long)]
        per_volume: Option<PathBuf>,
        #[arg(long)]
        overlap: Option<f64>,
    },
    /// Transfer a trained trunk to one new task with fresh heads.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest task id of the downstream task.
        #[arg(long)]
        task_spec: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of fresh models.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        task: usize,
    },
    /// Train and evaluate the five prompt variants with one budget.
    CompareVariants {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    fuse_depth: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, Error> {
        let mut out = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("max_iterations", &self.iters),
            ("variant", &self.variant),
            ("seed", &self.seed),
            ("fuse_depth", &self.fuse_depth),
            ("batch_size", &self.batch_size),
            ("initial_lr", &self.lr),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        Ok(out)
    }

    fn load(&self) -> Result<RunConfig, Error> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let overrides = self.overrides()?;
        parse_config(&text, overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }
}

/// Runs one command line (`argv[0]` is the program name) and returns the
/// exit status. Results go to `out`, diagnostics to `err`.
pub fn run_command<S: AsRef<str>>(argv: &[S], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv.iter().map(|s| s.as_ref())) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Usage and configuration errors map to 2, everything else to 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::ConfigKey { .. } | Error::Compatibility(_) => EXIT_USAGE,
        _ => EXIT_FAILED,
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Error> {
    match cmd {
        Command::GenData { tasks, seed, out: dir } => gen_data(tasks, seed, &dir, out),
        Command::Gradcheck { cfg, task } => gradcheck(&cfg, task, out),
        other => match Precision::from_env_or(Precision::Single)? {
            Precision::Single => dispatch_real::<f32>(other, out, err),
            Precision::Double => dispatch_real::<f64>(other, out, err),
        },
    }
}

fn dispatch_real<T: Real>(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Error> {
    match cmd {
        Command::Train {
            cfg,
            data,
            out: dir,
            task_ids,
            resume,
        } => train::<T>(&cfg, &data, &dir, &task_ids, resume.as_deref(), err),
        Command::Eval {
            checkpoint,
            data,
            report,
            per_volume,
            overlap,
        } => eval::<T>(&checkpoint, &data, report.as_deref(), per_volume.as_deref(), overlap, out),
        Command::Finetune {
            cfg,
            checkpoint,
            task_spec,
            data,
            out: dir,
        } => finetune_cmd::<T>(&cfg, &checkpoint, task_spec, &data, &dir, out, err),
        Command::CompareVariants { cfg, data, out: dir } => compare_variants::<T>(&cfg, &data, &dir, out, err),
        Command::GenData { .. } | Command::Gradcheck { .. } => unreachable!("precision independent"),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

/// Accepts a dataset directory or the manifest file itself.
fn open_manifest(data: &Path) -> Result<Manifest, Error> {
    if data.is_dir() {
        load_manifest(data.join(MANIFEST_FILE))
    } else {
        load_manifest(data)
    }
}

/// Restricts `registry` and `sets` to `ids`, renumbering tasks from zero.
fn select_tasks(
    registry: &TaskRegistry,
    mut sets: Vec<Vec<VolumeSample>>,
    ids: &[usize],
) -> Result<(TaskRegistry, Vec<Vec<VolumeSample>>), Error> {
    if ids.is_empty() {
        return Ok((registry.clone(), sets));
    }
    let mut tasks = Vec::new();
    let mut out = Vec::new();
    for (new_id, &id) in ids.iter().enumerate() {
        if ids[..new_id].contains(&id) {
            return Err(Error::Usage(format!("task id {id} listed twice")));
        }
        let t = registry
            .get(id)
            .map_err(|_| Error::Usage(format!("task id {id} not in the manifest ({} tasks)", registry.len())))?;
        tasks.push(TaskDescriptor::new(new_id, t.name.clone(), t.in_channels, t.num_classes)?);
        let mut set = std::mem::take(&mut sets[id]);
        for s in &mut set {
            s.task_id = new_id;
        }
        out.push(set);
    }
    Ok((TaskRegistry::new(tasks)?, out))
}

/// The test volumes of every task of `model`, matched to manifest tasks by
/// name.
fn matching_test_sets(model: &TaskRegistry, manifest: &Manifest) -> Result<Vec<Vec<VolumeSample>>, Error> {
    let data_reg = manifest.registry()?;
    let mut test = manifest.load_split(Split::Test)?;
    model
        .tasks()
        .iter()
        .map(|t| {
            let d = data_reg.tasks().iter().find(|d| d.name == t.name).ok_or_else(|| {
                Error::Task(format!("model task `{}` does not occur in the dataset", t.name))
            })?;
            if (d.in_channels, d.num_classes) != (t.in_channels, t.num_classes) {
                return Err(Error::Task(format!(
                    "task `{}` has {} channels and {} classes in the model, {} and {} in the dataset",
                    t.name, t.in_channels, t.num_classes, d.in_channels, d.num_classes
                )));
            }
            let mut set = std::mem::take(&mut test[d.task_id]);
            for s in &mut set {
                s.task_id = t.task_id;
            }
            Ok(set)
        })
        .collect()
}

fn progress(err: &mut dyn Write, every: usize) -> impl FnMut(&LossReport) + '_ {
    move |r: &LossReport| {
        if every > 0 && (r.iteration + 1) % every == 0 {
            let _ = writeln!(
                err,
                "iter {} task {} lr {:.5} loss {:.4} (dice {:.4}, ce {:.4})",
                r.iteration + 1,
                r.task_id,
                r.lr,
                r.total,
                r.dice,
                r.ce
            );
        }
    }
}

fn progress_interval(max: usize) -> usize {
    (max / 20).max(1)
}

fn gen_data(tasks: usize, seed: u64, dir: &Path, out: &mut dyn Write) -> Result<i32, Error> {
    if tasks == 0 {
        return Err(Error::Usage("--tasks must be at least 1".into()));
    }
    let specs = preset_task_specs(tasks, seed);
    let manifest = generate_dataset(&specs, seed, dir)?;
    writeln!(
        out,
        "wrote {} volumes for {} tasks to {}",
        manifest.records.len(),
        tasks,
        dir.display()
    )
    .map_err(io_err)?;
    Ok(EXIT_OK)
}

fn train<T: Real>(
    args: &ConfigArgs,
    data: &Path,
    dir: &Path,
    task_ids: &[usize],
    resume: Option<&Path>,
    err: &mut dyn Write,
) -> Result<i32, Error> {
    let run = args.load()?;
    let manifest = open_manifest(data)?;
    let (registry, sets) = select_tasks(&manifest.registry()?, manifest.load_split(Split::Train)?, task_ids)?;
    let (mut model, mut opt) = match resume {
        Some(path) => {
            let ck = load_checkpoint::<T>(path)?;
            if ck.model.registry() != &registry {
                return Err(Error::Usage(format!(
                    "checkpoint tasks [{}] differ from the selected data tasks [{}]",
                    ck.model.registry().to_spec_string(),
                    registry.to_spec_string()
                )));
            }
            (ck.model, ck.optimizer)
        }
        None => {
            let model = Model::<T>::build(run.model.clone(), registry, run.train.seed)?;
            let opt = OptimizerState::new(model.params());
            (model, opt)
        }
    };
    write_file(&dir.join(CONFIG_DUMP_FILE), &run.dump())?;
    let outputs = TrainOutputs {
        checkpoint_dir: Some(dir.to_path_buf()),
        trace_path: Some(dir.join(TRACE_FILE)),
    };
    let every = progress_interval(run.train.max_iterations);
    train_loop(&mut model, &mut opt, &sets, &run.train, &outputs, progress(err, every))?;
    writeln!(err, "saved {}", dir.join(FINAL_CHECKPOINT).display()).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn eval<T: Real>(
    checkpoint: &Path,
    data: &Path,
    report: Option<&Path>,
    per_volume: Option<&Path>,
    overlap: Option<f64>,
    out: &mut dyn Write,
) -> Result<i32, Error> {
    let ck = load_checkpoint::<T>(checkpoint)?;
    let manifest = open_manifest(data)?;
    let test = matching_test_sets(ck.model.registry(), &manifest)?;
    let seg = SlidingWindow::for_model(&ck.model, overlap.unwrap_or(ck.run.overlap));
    let rep = evaluate(&seg, &test, ck.model.registry())?;
    emit_report(&rep, report, per_volume, out)?;
    Ok(EXIT_OK)
}

fn emit_report(rep: &EvalReport, report: Option<&Path>, per_volume: Option<&Path>, out: &mut dyn Write) -> Result<(), Error> {
    let csv = rep.to_csv();
    out.write_all(csv.as_bytes()).map_err(io_err)?;
    if let Some(p) = report {
        write_file(p, &csv)?;
    }
    if let Some(p) = per_volume {
        write_file(p, &rep.volumes_csv())?;
    }
    Ok(())
}

fn finetune_cmd<T: Real>(
    args: &ConfigArgs,
    checkpoint: &Path,
    task_id: usize,
    data: &Path,
    dir: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32, Error> {
    let run = args.load()?;
    let manifest = open_manifest(data)?;
    let registry = manifest.registry()?;
    let task = registry
        .get(task_id)
        .map_err(|_| Error::Usage(format!("--task-spec {task_id} is not a task of the manifest")))?
        .clone();
    let mut train = manifest.load_split(Split::Train)?;
    let mut test = manifest.load_split(Split::Test)?;
    write_file(&dir.join(CONFIG_DUMP_FILE), &run.dump())?;
    let outputs = TrainOutputs {
        checkpoint_dir: Some(dir.to_path_buf()),
        trace_path: Some(dir.join(TRACE_FILE)),
    };
    let every = progress_interval(run.train.max_iterations);
    let done = finetune::<T>(
        checkpoint,
        &run.model,
        &task,
        &std::mem::take(&mut train[task_id]),
        &run.train,
        &outputs,
        progress(err, every),
    )?;
    writeln!(
        err,
        "transferred {} parameters, re-initialised {} head parameters",
        done.transfer.loaded.len(),
        done.transfer.reinitialized.len()
    )
    .map_err(io_err)?;
    let mut set = std::mem::take(&mut test[task_id]);
    for s in &mut set {
        s.task_id = 0;
    }
    let rep = evaluate(&SlidingWindow::for_model(&done.model, run.overlap), &[set], done.model.registry())?;
    emit_report(&rep, Some(&dir.join(REPORT_FILE)), None, out)?;
    Ok(EXIT_OK)
}

/// Tasks 1, 2 and 4 channels with 2, 3 and 5 classes.
fn gradcheck_registry() -> TaskRegistry {
    TaskRegistry::from_specs([("organ", 1, 2), ("tumor", 2, 3), ("brain", 4, 5)]).expect("valid tasks")
}

fn gradcheck(args: &ConfigArgs, task: usize, out: &mut dyn Write) -> Result<i32, Error> {
    let run = args.load()?;
    let variants: Vec<Variant> = if args.variant.is_some() || args.set.iter().any(|s| s.trim_start().starts_with("variant")) {
        vec![run.model.variant]
    } else {
        Variant::ABLATION.to_vec()
    };
    let registry = gradcheck_registry();
    registry.get(task).map_err(|_| Error::Usage(format!("--task must be below {}", registry.len())))?;
    let mut failed = false;
    for v in variants {
        let config = ModelConfig {
            patch: GRADCHECK_PROBE,
            ..run.model.clone()
        }
        .with_variant(v);
        let mut model = Model::<f64>::build(config, registry.clone(), run.train.seed)?;
        let report: GradCheckReport = grad_check_model(&mut model, task, GRADCHECK_PROBE, run.train.seed)?;
        writeln!(out, "variant {v}: {}", if report.passed() { "pass" } else { "FAIL" }).map_err(io_err)?;
        out.write_all(report.to_text().as_bytes()).map_err(io_err)?;
        failed |= !report.passed();
    }
    Ok(if failed { EXIT_FAILED } else { EXIT_OK })
}

/// One table row per variant: per-task Dice then the mean.
pub fn compare_table(tasks: &TaskRegistry, rows: &[(Variant, EvalReport)]) -> String {
    let mut s = String::from("variant");
    for t in tasks.tasks() {
        write!(s, ",{}", t.name).unwrap();
    }
    s.push_str(",mean\n");
    for (v, rep) in rows {
        s.push_str(v.as_str());
        for t in &rep.tasks {
            write!(s, ",{:.4}", t.dice).unwrap();
        }
        writeln!(s, ",{:.4}", rep.mean).unwrap();
    }
    s
}

fn compare_variants<T: Real>(
    args: &ConfigArgs,
    data: &Path,
    dir: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32, Error> {
    let run = args.load()?;
    let manifest = open_manifest(data)?;
    let registry = manifest.registry()?;
    let train = manifest.load_split(Split::Train)?;
    let test = manifest.load_split(Split::Test)?;
    write_file(&dir.join(CONFIG_DUMP_FILE), &run.dump())?;
    let mut rows = Vec::new();
    for v in Variant::ABLATION {
        writeln!(err, "training {v}").map_err(io_err)?;
        let config = run.model.clone().with_variant(v);
        let mut model = Model::<T>::build(config, registry.clone(), run.train.seed)?;
        let mut opt = OptimizerState::new(model.params());
        let outputs = TrainOutputs {
            checkpoint_dir: Some(dir.join(v.as_str())),
            trace_path: Some(dir.join(v.as_str()).join(TRACE_FILE)),
        };
        let every = progress_interval(run.train.max_iterations);
        train_loop(&mut model, &mut opt, &train, &run.train, &outputs, progress(err, every))?;
        let rep = evaluate(&SlidingWindow::for_model(&model, run.overlap), &test, &registry)?;
        rows.push((v, rep));
    }
    let table = compare_table(&registry, &rows);
    write_file(&dir.join(COMPARE_FILE), &table)?;
    out.write_all(table.as_bytes()).map_err(io_err)?;
    Ok(EXIT_OK)
}
