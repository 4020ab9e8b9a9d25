use std::fmt;
use std::str::FromStr;

use crate::autodiff::conv::check_stride;
use crate::autodiff::Triple;
use crate::error::{Error, Result};

/// Network variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Learnable universal prompt, FUSE, task prompt at the decoder input.
    UniSeg,
    /// Zero universal prompt that is never updated.
    FixedPrompt,
    /// One independent learnable prompt per task, no split.
    MultiplePrompts,
    /// Task prompt concatenated right before the final head.
    UniSegT,
    /// One-hot task code driving dynamic 1x1x1 convolutions after the decoder.
    OneHotDynamic,
    /// Plain encoder-decoder without task conditioning.
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::FixedPrompt,
        Variant::MultiplePrompts,
        Variant::UniSegT,
        Variant::UniSeg,
        Variant::OneHotDynamic,
    ];

    /// The five variants of the prompt ablation table, in table order.
    pub const ABLATION: [Variant; 5] = [
        Variant::Baseline,
        Variant::FixedPrompt,
        Variant::MultiplePrompts,
        Variant::UniSegT,
        Variant::UniSeg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::UniSeg => "uniseg",
            Variant::FixedPrompt => "fixed-prompt",
            Variant::MultiplePrompts => "multiple-prompts",
            Variant::UniSegT => "uniseg-t",
            Variant::OneHotDynamic => "onehot-dynamic",
            Variant::Baseline => "baseline",
        }
    }

    /// Whether the variant computes task prompts with the FUSE blocks.
    pub fn has_fuse(self) -> bool {
        !matches!(self, Variant::OneHotDynamic | Variant::Baseline)
    }

    /// Whether the selected task prompt is concatenated to the decoder input.
    pub fn prompt_at_decoder_input(self) -> bool {
        matches!(self, Variant::UniSeg | Variant::FixedPrompt | Variant::MultiplePrompts)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of {})",
                    Variant::ALL.map(|v| v.as_str()).join(", ")
                ))
            })
    }
}

/// Channel count of the universal prompt relative to the task count `N` or
/// the bottleneck width `C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptChannels {
    N,
    TwoN,
    FourN,
    C,
}

impl PromptChannels {
    pub fn resolve(self, tasks: usize, bottleneck_channels: usize) -> usize {
        match self {
            PromptChannels::N => tasks,
            PromptChannels::TwoN => 2 * tasks,
            PromptChannels::FourN => 4 * tasks,
            PromptChannels::C => bottleneck_channels,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptChannels::N => "N",
            PromptChannels::TwoN => "2N",
            PromptChannels::FourN => "4N",
            PromptChannels::C => "C",
        }
    }
}

impl FromStr for PromptChannels {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "N" => Ok(PromptChannels::N),
            "2N" => Ok(PromptChannels::TwoN),
            "4N" => Ok(PromptChannels::FourN),
            "C" => Ok(PromptChannels::C),
            _ => Err(Error::Config(format!(
                "prompt channels must be one of N, 2N, 4N, C; got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_stages: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    /// Stride of the first convolution of every encoder stage.
    pub strides: Vec<Triple>,
    pub fuse_depth: usize,
    pub prompt_channels: PromptChannels,
    /// Channels per task prompt; `None` means equal to the universal prompt.
    pub task_prompt_channels: Option<usize>,
    /// Decoder outputs are supervised when every spatial extent is at least this.
    pub ds_min_extent: usize,
    pub variant: Variant,
    pub leaky_slope: f64,
    pub norm_eps: f64,
    /// Training patch (and inference window) size `[D, H, W]`.
    pub patch: Triple,
    /// Number of prompt slots; `None` means one per registered task. Set when
    /// a trunk pre-trained on more tasks is fine-tuned on fewer.
    pub task_slots: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_stages: 6,
            base_channels: 8,
            channel_cap: 80,
            strides: vec![[1, 1, 1], [2, 2, 2], [2, 2, 2], [2, 2, 2], [2, 2, 2], [1, 2, 2]],
            fuse_depth: 3,
            prompt_channels: PromptChannels::N,
            task_prompt_channels: None,
            ds_min_extent: 4,
            variant: Variant::UniSeg,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
            patch: [64, 192, 192],
            task_slots: None,
        }
    }
}

impl ModelConfig {
    /// Four-stage desk-scale configuration for `16 x 32 x 32` patches.
    pub fn toy() -> Self {
        ModelConfig {
            num_stages: 4,
            base_channels: 4,
            channel_cap: 40,
            strides: vec![[1, 1, 1], [2, 2, 2], [2, 2, 2], [2, 2, 2]],
            patch: [16, 32, 32],
            ..ModelConfig::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages < 2 {
            return Err(Error::Config(format!("num_stages must be at least 2, got {}", self.num_stages)));
        }
        if self.strides.len() != self.num_stages {
            return Err(Error::Config(format!(
                "stride schedule has {} entries for {} stages",
                self.strides.len(),
                self.num_stages
            )));
        }
        for s in &self.strides {
            check_stride(*s)?;
        }
        if self.base_channels == 0 || self.channel_cap < self.base_channels {
            return Err(Error::Config(format!(
                "channel schedule needs 0 < base_channels <= channel_cap, got {} and {}",
                self.base_channels, self.channel_cap
            )));
        }
        if !(1..=4).contains(&self.fuse_depth) {
            return Err(Error::Config(format!(
                "fuse_depth must be within 1..4, got {}",
                self.fuse_depth
            )));
        }
        if self.task_prompt_channels == Some(0) || self.task_slots == Some(0) {
            return Err(Error::Config("prompt channel and slot counts must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope <= 1.0) {
            return Err(Error::Config(format!("leaky_slope must lie in (0, 1], got {}", self.leaky_slope)));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config(format!("norm_eps must be positive, got {}", self.norm_eps)));
        }
        if self.ds_min_extent == 0 {
            return Err(Error::Config("ds_min_extent must be positive".into()));
        }
        self.check_divisible(self.patch)?;
        Ok(())
    }

    /// Checks that `dims` is divisible by the cumulative stride on every axis.
    pub fn check_divisible(&self, dims: Triple) -> Result<()> {
        let total = self.total_stride();
        for (axis, name) in ["depth", "height", "width"].iter().enumerate() {
            if dims[axis] == 0 || dims[axis] % total[axis] != 0 {
                return Err(Error::Config(format!(
                    "patch {name} {} is not divisible by the cumulative stride {}",
                    dims[axis], total[axis]
                )));
            }
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        let scaled = self.base_channels.saturating_mul(1usize << stage.min(40));
        scaled.min(self.channel_cap)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels(self.num_stages - 1)
    }

    /// Cumulative stride through stage `stage` (inclusive).
    pub fn stride_through(&self, stage: usize) -> Triple {
        let mut acc = [1, 1, 1];
        for s in &self.strides[..=stage] {
            for a in 0..3 {
                acc[a] *= s[a];
            }
        }
        acc
    }

    pub fn total_stride(&self) -> Triple {
        self.stride_through(self.num_stages - 1)
    }

    /// Spatial extents of the output of encoder stage `stage` for input `dims`.
    pub fn stage_dims(&self, dims: Triple, stage: usize) -> Triple {
        let s = self.stride_through(stage);
        [dims[0] / s[0], dims[1] / s[1], dims[2] / s[2]]
    }

    pub fn bottleneck_dims(&self, dims: Triple) -> Triple {
        self.stage_dims(dims, self.num_stages - 1)
    }

    /// Encoder stages whose decoder outputs carry a segmentation head,
    /// highest resolution first. Stage 0 is always supervised.
    pub fn supervised_stages(&self, dims: Triple) -> Vec<usize> {
        (0..self.num_stages - 1)
            .filter(|&s| s == 0 || self.stage_dims(dims, s).iter().all(|&e| e >= self.ds_min_extent))
            .collect()
    }

    pub fn slots(&self, registry_len: usize) -> usize {
        self.task_slots.unwrap_or(registry_len)
    }

    pub fn universal_prompt_channels(&self, registry_len: usize) -> usize {
        self.prompt_channels
            .resolve(self.slots(registry_len), self.bottleneck_channels())
    }

    pub fn task_prompt_width(&self, registry_len: usize) -> usize {
        self.task_prompt_channels
            .unwrap_or_else(|| self.universal_prompt_channels(registry_len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_reduces_by_16_and_32() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.total_stride(), [16, 32, 32]);
        assert_eq!(c.bottleneck_dims([64, 192, 192]), [4, 6, 6]);
        assert_eq!(c.stage_channels(0), 8);
        assert_eq!(c.stage_channels(5), 80);
    }

    #[test]
    fn toy_supervises_three_scales() {
        let c = ModelConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.supervised_stages([16, 32, 32]), vec![0, 1, 2]);
        assert_eq!(c.supervised_stages([8, 16, 16]), vec![0, 1]);
    }

    #[test]
    fn divisibility_error_names_axis() {
        let c = ModelConfig {
            patch: [64, 190, 192],
            ..ModelConfig::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("height"), "{msg}");
    }

    #[test]
    fn fuse_depth_range() {
        for d in [0, 5] {
            let c = ModelConfig {
                fuse_depth: d,
                ..ModelConfig::toy()
            };
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("clip".parse::<Variant>().is_err());
        assert_eq!("2n".parse::<PromptChannels>().unwrap(), PromptChannels::TwoN);
    }
}
