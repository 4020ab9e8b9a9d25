use crate::error::{Error, Result};

/// Input channel counts accepted by the modality stems.
pub const SUPPORTED_IN_CHANNELS: [usize; 3] = [1, 2, 4];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskDescriptor {
    pub task_id: usize,
    pub name: String,
    pub in_channels: usize,
    /// Class count including background class 0.
    pub num_classes: usize,
}

impl TaskDescriptor {
    pub fn new(task_id: usize, name: impl Into<String>, in_channels: usize, num_classes: usize) -> Result<Self> {
        let d = TaskDescriptor {
            task_id,
            name: name.into(),
            in_channels,
            num_classes,
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        if !SUPPORTED_IN_CHANNELS.contains(&self.in_channels) {
            return Err(Error::UnsupportedModality(self.in_channels));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Task(format!(
                "task `{}` needs between 2 and 255 classes, got {}",
                self.name, self.num_classes
            )));
        }
        if self.name.is_empty() || self.name.contains([':', ';', '\n', '\t', ',']) {
            return Err(Error::Task(format!("invalid task name `{}`", self.name)));
        }
        Ok(())
    }
}

/// The N tasks of a universal model, indexed `0..N`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskRegistry {
    tasks: Vec<TaskDescriptor>,
}

impl TaskRegistry {
    pub fn new(tasks: Vec<TaskDescriptor>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Task("a registry needs at least one task".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.task_id != i {
                return Err(Error::Task(format!(
                    "task `{}` has id {} at position {i}; ids must be 0..N in order",
                    t.name, t.task_id
                )));
            }
            t.validate()?;
        }
        Ok(TaskRegistry { tasks })
    }

    /// Builds a registry from `(name, in_channels, num_classes)` triples.
    pub fn from_specs<S: Into<String>>(specs: impl IntoIterator<Item = (S, usize, usize)>) -> Result<Self> {
        let tasks = specs
            .into_iter()
            .enumerate()
            .map(|(i, (n, c, k))| TaskDescriptor::new(i, n, c, k))
            .collect::<Result<Vec<_>>>()?;
        Self::new(tasks)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[TaskDescriptor] {
        &self.tasks
    }

    pub fn get(&self, task_id: usize) -> Result<&TaskDescriptor> {
        self.tasks.get(task_id).ok_or_else(|| {
            Error::Task(format!(
                "task id {task_id} out of range for {} tasks",
                self.tasks.len()
            ))
        })
    }

    /// Shared head width: the largest class count over all tasks.
    pub fn max_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.num_classes).max().unwrap_or(0)
    }

    /// `name:channels:classes` entries joined by `;`.
    pub fn to_spec_string(&self) -> String {
        self.tasks
            .iter()
            .map(|t| format!("{}:{}:{}", t.name, t.in_channels, t.num_classes))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn parse_spec_string(s: &str) -> Result<Self> {
        let mut specs = Vec::new();
        for entry in s.split(';').map(str::trim).filter(|e| !e.is_empty()) {
            let fields: Vec<&str> = entry.split(':').collect();
            let bad = || Error::Task(format!("task entry `{entry}` is not name:channels:classes"));
            if fields.len() != 3 {
                return Err(bad());
            }
            let c = fields[1].trim().parse().map_err(|_| bad())?;
            let k = fields[2].trim().parse().map_err(|_| bad())?;
            specs.push((fields[0].trim().to_string(), c, k));
        }
        Self::from_specs(specs)
    }
}
