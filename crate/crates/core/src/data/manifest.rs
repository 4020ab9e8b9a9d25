use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{read_volume, read_volume_header, VolumeSample};
use crate::error::{Error, Result};
use crate::net::{TaskDescriptor, TaskRegistry};

pub const MANIFEST_MAGIC: &str = "UMAN";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    /// Path relative to the manifest directory.
    pub path: PathBuf,
    pub task_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub seed: u64,
    pub records: Vec<Record>,
    /// Directory the record paths are relative to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(seed: u64, root: impl Into<PathBuf>) -> Self {
        Manifest {
            seed,
            records: Vec::new(),
            root: root.into(),
        }
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn num_tasks(&self) -> usize {
        self.records.iter().map(|r| r.task_id + 1).max().unwrap_or(0)
    }

    pub fn load_sample(&self, record: &Record) -> Result<VolumeSample> {
        read_volume(self.resolve(record), record.task_id)
    }

    /// Loads every volume of `split`, grouped by task id.
    pub fn load_split(&self, split: Split) -> Result<Vec<Vec<VolumeSample>>> {
        let mut out = vec![Vec::new(); self.num_tasks()];
        for r in self.split(split) {
            out[r.task_id].push(self.load_sample(r)?);
        }
        Ok(out)
    }

    /// Derives the task registry from the volume headers. Task names are the
    /// directory names holding each task's volumes.
    pub fn registry(&self) -> Result<TaskRegistry> {
        let mut tasks: Vec<Option<TaskDescriptor>> = vec![None; self.num_tasks()];
        for r in &self.records {
            let path = self.resolve(r);
            let h = read_volume_header(&path)?;
            let name = r
                .path
                .parent()
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("task{}", r.task_id));
            let desc = TaskDescriptor::new(r.task_id, name, h.channels, h.num_classes)?;
            match &tasks[r.task_id] {
                None => tasks[r.task_id] = Some(desc),
                Some(prev) if *prev == desc => {}
                Some(prev) => {
                    return Err(Error::Manifest(format!(
                        "{} disagrees with earlier volumes of task {}: {desc:?} vs {prev:?}",
                        path.display(),
                        r.task_id
                    )))
                }
            }
        }
        let tasks = tasks
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| Error::Manifest(format!("task id {i} has no volumes"))))
            .collect::<Result<Vec<_>>>()?;
        TaskRegistry::new(tasks)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_MAGIC} {MANIFEST_VERSION} {}\n", self.seed);
        for r in &self.records {
            s.push_str(&format!("{}\t{}\t{}\n", r.path.display(), r.task_id, r.split));
        }
        s
    }

    /// Parses manifest text without touching the referenced files.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Manifest("missing `UMAN` header line".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let seed = match fields.as_slice() {
            [MANIFEST_MAGIC, version, seed] => {
                if version.parse::<u32>().ok() != Some(MANIFEST_VERSION) {
                    return Err(Error::Manifest(format!("unsupported manifest version `{version}`")));
                }
                seed.parse::<u64>()
                    .map_err(|_| Error::Manifest(format!("bad seed `{seed}` in header")))?
            }
            _ => return Err(Error::Manifest(format!("bad header line `{header}`"))),
        };
        let mut m = Manifest::new(seed, root);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let [path, task, split] = parts.as_slice() else {
                return Err(Error::Manifest(format!("line {}: expected 3 tab-separated fields", i + 1)));
            };
            let task_id = task
                .parse()
                .map_err(|_| Error::Manifest(format!("line {}: bad task id `{task}`", i + 1)))?;
            m.records.push(Record {
                path: PathBuf::from(path),
                task_id,
                split: split.parse()?,
            });
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a manifest and checks that every referenced volume exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = Manifest::parse(&text, root)?;
    let missing: Vec<String> = m
        .records
        .iter()
        .map(|r| m.resolve(r))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Manifest(format!("missing volume files: {}", missing.join(", "))));
    }
    Ok(m)
}
