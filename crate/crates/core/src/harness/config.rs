use std::fmt::Write as _;

use crate::autodiff::Triple;
use crate::error::{Error, Result};
use crate::net::{ModelConfig, PromptChannels, Variant};
use crate::train::TrainConfig;

/// Everything a command needs besides paths: model, training and
/// inference settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fractional overlap of sliding inference windows.
    pub overlap: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            overlap: 0.5,
        }
    }
}

/// Keys in canonical dump order.
pub const CONFIG_KEYS: [&str; 24] = [
    "num_stages",
    "base_channels",
    "channel_cap",
    "strides",
    "fuse_depth",
    "prompt_channels",
    "task_prompt_channels",
    "ds_min_extent",
    "variant",
    "leaky_slope",
    "norm_eps",
    "patch",
    "task_slots",
    "initial_lr",
    "momentum",
    "weight_decay",
    "batch_size",
    "max_iterations",
    "poly_power",
    "seed",
    "ds_decay",
    "foreground_crop_prob",
    "checkpoint_every",
    "overlap",
];

fn parse_triple(s: &str) -> std::result::Result<Triple, String> {
    let parts: Vec<&str> = s.trim().split('x').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected DxHxW, got `{s}`"));
    };
    let n = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("`{v}` is not a non-negative integer"));
    Ok([n(a)?, n(b)?, n(c)?])
}

fn fmt_triple(t: Triple) -> String {
    format!("{}x{}x{}", t[0], t[1], t[2])
}

fn parse_num<N: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<N, String> {
    s.trim().parse().map_err(|_| format!("expected {what}, got `{s}`"))
}

fn parse_auto(s: &str) -> std::result::Result<Option<usize>, String> {
    match s.trim() {
        "auto" => Ok(None),
        v => parse_num(v, "a positive integer or `auto`").map(Some),
    }
}

fn fmt_auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |n| n.to_string())
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

impl RunConfig {
    /// Sets one key from its textual value, checking constraints that do not
    /// involve other keys.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let v = value.trim();
        match key {
            "num_stages" => {
                m.num_stages = parse_num(v, "an integer")?;
                check(m.num_stages >= 2, || "must be at least 2".into())?;
            }
            "base_channels" => {
                m.base_channels = parse_num(v, "an integer")?;
                check(m.base_channels >= 1, || "must be at least 1".into())?;
            }
            "channel_cap" => {
                m.channel_cap = parse_num(v, "an integer")?;
                check(m.channel_cap >= 1, || "must be at least 1".into())?;
            }
            "strides" => {
                m.strides = v.split(',').map(parse_triple).collect::<std::result::Result<_, _>>()?;
                check(m.strides.iter().flatten().all(|s| (1..=2).contains(s)), || {
                    "every stride must be 1 or 2".into()
                })?;
            }
            "fuse_depth" => {
                m.fuse_depth = parse_num(v, "an integer")?;
                check((1..=4).contains(&m.fuse_depth), || {
                    format!("allowed range is 1..4, got {}", m.fuse_depth)
                })?;
            }
            "prompt_channels" => m.prompt_channels = v.parse::<PromptChannels>().map_err(|e| e.to_string())?,
            "task_prompt_channels" => {
                m.task_prompt_channels = parse_auto(v)?;
                check(m.task_prompt_channels != Some(0), || "must be positive".into())?;
            }
            "ds_min_extent" => {
                m.ds_min_extent = parse_num(v, "an integer")?;
                check(m.ds_min_extent >= 1, || "must be at least 1".into())?;
            }
            "variant" => m.variant = v.parse::<Variant>().map_err(|e| e.to_string())?,
            "leaky_slope" => {
                m.leaky_slope = parse_num(v, "a number")?;
                check(m.leaky_slope > 0.0 && m.leaky_slope <= 1.0, || "must lie in (0, 1]".into())?;
            }
            "norm_eps" => {
                m.norm_eps = parse_num(v, "a number")?;
                check(m.norm_eps > 0.0, || "must be positive".into())?;
            }
            "patch" => {
                m.patch = parse_triple(v)?;
                check(!m.patch.contains(&0), || "extents must be positive".into())?;
            }
            "task_slots" => {
                m.task_slots = parse_auto(v)?;
                check(m.task_slots != Some(0), || "must be positive".into())?;
            }
            "initial_lr" => {
                t.initial_lr = parse_num(v, "a number")?;
                check(t.initial_lr > 0.0 && t.initial_lr.is_finite(), || "must be positive".into())?;
            }
            "momentum" => {
                t.momentum = parse_num(v, "a number")?;
                check((0.0..1.0).contains(&t.momentum), || "must lie in [0, 1)".into())?;
            }
            "weight_decay" => {
                t.weight_decay = parse_num(v, "a number")?;
                check(t.weight_decay >= 0.0, || "must be non-negative".into())?;
            }
            "batch_size" => {
                t.batch_size = parse_num(v, "an integer")?;
                check(t.batch_size >= 1, || "must be at least 1".into())?;
            }
            "max_iterations" => t.max_iterations = parse_num(v, "an integer")?,
            "poly_power" => {
                t.poly_power = parse_num(v, "a number")?;
                check(t.poly_power >= 0.0, || "must be non-negative".into())?;
            }
            "seed" => t.seed = parse_num(v, "an unsigned integer")?,
            "ds_decay" => {
                t.ds_decay = parse_num(v, "a number")?;
                check(t.ds_decay > 0.0 && t.ds_decay <= 1.0, || "must lie in (0, 1]".into())?;
            }
            "foreground_crop_prob" => {
                t.foreground_crop_prob = parse_num(v, "a number")?;
                check((0.0..=1.0).contains(&t.foreground_crop_prob), || "must lie in [0, 1]".into())?;
            }
            "checkpoint_every" => t.checkpoint_every = parse_num(v, "an integer")?,
            "overlap" => {
                self.overlap = parse_num(v, "a number")?;
                check((0.0..=0.9).contains(&self.overlap), || "must lie in [0, 0.9]".into())?;
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Applies `key = value` lines. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let location = format!("line {}", i + 1);
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ConfigKey {
                    key: line.to_string(),
                    location,
                    msg: "expected `key = value`".into(),
                });
            };
            let key = key.trim();
            self.set(key, value).map_err(|msg| Error::ConfigKey {
                key: key.to_string(),
                location,
                msg,
            })?;
        }
        Ok(())
    }

    /// Applies command-line overrides.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (key, value) in overrides {
            self.set(key, value).map_err(|msg| Error::ConfigKey {
                key: key.to_string(),
                location: "command line".into(),
                msg,
            })?;
        }
        Ok(())
    }

    /// Checks constraints spanning several keys.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Canonical `key = value` dump; parsing it yields an equal config.
    pub fn dump(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let strides: Vec<String> = m.strides.iter().map(|&s| fmt_triple(s)).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("num_stages", m.num_stages.to_string());
        kv("base_channels", m.base_channels.to_string());
        kv("channel_cap", m.channel_cap.to_string());
        kv("strides", strides.join(","));
        kv("fuse_depth", m.fuse_depth.to_string());
        kv("prompt_channels", m.prompt_channels.as_str().to_string());
        kv("task_prompt_channels", fmt_auto(m.task_prompt_channels));
        kv("ds_min_extent", m.ds_min_extent.to_string());
        kv("variant", m.variant.as_str().to_string());
        kv("leaky_slope", format!("{:?}", m.leaky_slope));
        kv("norm_eps", format!("{:?}", m.norm_eps));
        kv("patch", fmt_triple(m.patch));
        kv("task_slots", fmt_auto(m.task_slots));
        kv("initial_lr", format!("{:?}", t.initial_lr));
        kv("momentum", format!("{:?}", t.momentum));
        kv("weight_decay", format!("{:?}", t.weight_decay));
        kv("batch_size", t.batch_size.to_string());
        kv("max_iterations", t.max_iterations.to_string());
        kv("poly_power", format!("{:?}", t.poly_power));
        kv("seed", t.seed.to_string());
        kv("ds_decay", format!("{:?}", t.ds_decay));
        kv("foreground_crop_prob", format!("{:?}", t.foreground_crop_prob));
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("overlap", format!("{:?}", self.overlap));
        out
    }
}

/// Defaults, then `text`, then `overrides`; the result is validated.
pub fn parse_config<'a>(text: &str, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    cfg.apply_text(text)?;
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}
