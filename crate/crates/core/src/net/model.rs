use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{same_padding, Graph, ParamId, ParamKind, ParamStore, Real, Tensor, Triple, Var};
use crate::error::{Error, Result};
use crate::net::{ModelConfig, TaskRegistry, Variant};

/// Hidden width of the dynamic head of the one-hot baseline.
pub const DYNAMIC_WIDTH: usize = 8;

/// Prefix shared by every segmentation-head parameter.
pub const HEAD_PREFIX: &str = "heads.";

const PROMPT_INIT_STD: f64 = 0.02;

/// Conv -> instance norm -> leaky ReLU.
#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: Triple,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
enum Prompts {
    None,
    Universal(ParamId),
    PerTask(Vec<ParamId>),
}

#[derive(Clone, Debug)]
struct DecoderStage {
    stage: usize,
    up: Conv,
    up_stride: Triple,
    block: ConvBlock,
}

#[derive(Clone, Copy, Debug)]
struct DynamicHead {
    pre: Conv,
    controller: Conv,
}

/// Encoder result: every stage output (highest resolution first) and the
/// bottleneck features.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

/// Output of the FUSE blocks, split into one prompt per task slot.
#[derive(Clone, Debug)]
pub struct TaskPromptSet {
    /// FUSE output before the split.
    pub fused: Var,
    pub prompts: Vec<Var>,
}

/// The segmentation network and its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    registry: TaskRegistry,
    store: ParamStore<T>,
    stems: Vec<(usize, ConvBlock)>,
    encoder: Vec<[ConvBlock; 2]>,
    prompts: Prompts,
    fuse: Vec<ConvBlock>,
    decoder_input: ConvBlock,
    decoder: Vec<DecoderStage>,
    heads: Vec<(usize, Conv)>,
    dynamic: Option<DynamicHead>,
    seed: u64,
}

fn fan_in_normal(fan_in: usize, slope: f64) -> f64 {
    (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt()
}

/// Deterministic per-parameter stream so that initial values depend only on
/// the seed and the parameter name.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(crc32fast::hash(name.as_bytes()) as u64);
    rng
}

fn normal_tensor<T: Real>(shape: &[usize], std: f64, seed: u64, name: &str) -> Tensor<T> {
    let mut rng = param_rng(seed, name);
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut rng)))
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    slope: f64,
}

impl<T: Real> Builder<'_, T> {
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let t = normal_tensor(shape, fan_in_normal(fan_in, self.slope), self.seed, &name);
        self.store.add(name, t, ParamKind::Weight)
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, kernel: Triple) -> Result<Conv> {
        let kvol: usize = kernel.iter().product();
        let w = self.weight(format!("{prefix}.weight"), &[cout, cin, kernel[0], kernel[1], kernel[2]], cin * kvol)?;
        let b = self.store.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]), ParamKind::Bias)?;
        Ok(Conv { w, b })
    }

    fn transposed(&mut self, prefix: &str, cin: usize, cout: usize, kernel: Triple) -> Result<Conv> {
        let w = self.weight(format!("{prefix}.weight"), &[cin, cout, kernel[0], kernel[1], kernel[2]], cin)?;
        let b = self.store.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]), ParamKind::Bias)?;
        Ok(Conv { w, b })
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize, stride: Triple) -> Result<ConvBlock> {
        let conv = self.conv(&format!("{prefix}.conv"), cin, cout, [3, 3, 3])?;
        let gamma = self.store.add(format!("{prefix}.norm.weight"), Tensor::full(&[cout], T::one()), ParamKind::NormScale)?;
        let beta = self.store.add(format!("{prefix}.norm.bias"), Tensor::zeros(&[cout]), ParamKind::NormShift)?;
        Ok(ConvBlock {
            w: conv.w,
            b: conv.b,
            gamma,
            beta,
            stride,
        })
    }

    fn prompt(&mut self, name: String, shape: &[usize], zero: bool) -> Result<ParamId> {
        let t = if zero {
            Tensor::zeros(shape)
        } else {
            normal_tensor(shape, PROMPT_INIT_STD, self.seed, &name)
        };
        let id = self.store.add(name, t, ParamKind::Prompt)?;
        if zero {
            self.store.set_trainable(id, false);
        }
        Ok(id)
    }
}

/// Length of the controller output of the one-hot dynamic head.
pub fn dynamic_param_count(classes: usize) -> usize {
    let w = DYNAMIC_WIDTH;
    w * w + w + w * w + w + w * classes + classes
}

impl<T: Real> Model<T> {
    /// Builds and deterministically initialises a model for `registry`.
    pub fn build(config: ModelConfig, registry: TaskRegistry, seed: u64) -> Result<Self> {
        config.validate()?;
        let slots = config.slots(registry.len());
        if slots < registry.len() {
            return Err(Error::Config(format!(
                "{slots} prompt slots cannot serve {} tasks",
                registry.len()
            )));
        }
        let s_count = config.num_stages;
        let classes = registry.max_classes();
        let variant = config.variant;
        let c_bottleneck = config.bottleneck_channels();
        let up_ch = config.universal_prompt_channels(registry.len());
        let p = config.task_prompt_width(registry.len());
        let bdims = config.bottleneck_dims(config.patch);

        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            seed,
            slope: config.leaky_slope,
        };

        let c0 = config.stage_channels(0);
        let mut stems = Vec::new();
        for cin in crate::net::SUPPORTED_IN_CHANNELS {
            stems.push((cin, b.block(&format!("stem.c{cin}"), cin, c0, [1, 1, 1])?));
        }

        let mut encoder = Vec::with_capacity(s_count);
        let mut cin = c0;
        for s in 0..s_count {
            let c = config.stage_channels(s);
            let first = b.block(&format!("encoder.s{s}.b0"), cin, c, config.strides[s])?;
            let second = b.block(&format!("encoder.s{s}.b1"), c, c, [1, 1, 1])?;
            encoder.push([first, second]);
            cin = c;
        }

        let prompt_shape = [up_ch, bdims[0], bdims[1], bdims[2]];
        let prompts = match variant {
            Variant::UniSeg | Variant::UniSegT => Prompts::Universal(b.prompt("prompt.universal".into(), &prompt_shape, false)?),
            Variant::FixedPrompt => Prompts::Universal(b.prompt("prompt.universal".into(), &prompt_shape, true)?),
            Variant::MultiplePrompts => Prompts::PerTask(
                (0..slots)
                    .map(|t| b.prompt(format!("prompt.task{t}"), &prompt_shape, false))
                    .collect::<Result<_>>()?,
            ),
            Variant::OneHotDynamic | Variant::Baseline => Prompts::None,
        };

        let mut fuse = Vec::new();
        if variant.has_fuse() {
            let out = if variant == Variant::MultiplePrompts { p } else { slots * p };
            let mut cin = up_ch + c_bottleneck;
            for i in 0..config.fuse_depth {
                let cout = if i + 1 == config.fuse_depth { out } else { c_bottleneck };
                fuse.push(b.block(&format!("fuse.b{i}"), cin, cout, [1, 1, 1])?);
                cin = cout;
            }
        }

        let dec_in = c_bottleneck + if variant.prompt_at_decoder_input() { p } else { 0 };
        let decoder_input = b.block("decoder.input", dec_in, c_bottleneck, [1, 1, 1])?;

        let mut decoder = Vec::new();
        for s in (0..s_count - 1).rev() {
            let (c_deep, c) = (config.stage_channels(s + 1), config.stage_channels(s));
            let up_stride = config.strides[s + 1];
            let up = b.transposed(&format!("decoder.s{s}.up"), c_deep, c, up_stride)?;
            let block = b.block(&format!("decoder.s{s}.block"), 2 * c, c, [1, 1, 1])?;
            decoder.push(DecoderStage {
                stage: s,
                up,
                up_stride,
                block,
            });
        }

        let mut heads = Vec::new();
        let mut dynamic = None;
        for s in config.supervised_stages(config.patch) {
            let c = config.stage_channels(s);
            if s == 0 && variant == Variant::OneHotDynamic {
                let pre = b.conv("heads.dynamic.pre", c, DYNAMIC_WIDTH, [1, 1, 1])?;
                let controller = b.conv(
                    "heads.dynamic.controller",
                    c_bottleneck + slots,
                    dynamic_param_count(classes),
                    [1, 1, 1],
                )?;
                dynamic = Some(DynamicHead { pre, controller });
                continue;
            }
            let cin = if s == 0 && variant == Variant::UniSegT { c + p } else { c };
            heads.push((s, b.conv(&format!("heads.s{s}"), cin, classes, [1, 1, 1])?));
        }

        Ok(Model {
            config,
            registry,
            store,
            stems,
            encoder,
            prompts,
            fuse,
            decoder_input,
            decoder,
            heads,
            dynamic,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &TaskRegistry {
        &self.registry
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Channel width of every segmentation head.
    pub fn head_classes(&self) -> usize {
        self.registry.max_classes()
    }

    pub fn num_slots(&self) -> usize {
        self.config.slots(self.registry.len())
    }

    pub fn task_prompt_width(&self) -> usize {
        self.config.task_prompt_width(self.registry.len())
    }

    /// Channels produced by the last FUSE block (`N * P`, or `P` with one
    /// prompt per task); zero when the variant has no FUSE blocks.
    pub fn fuse_output_channels(&self) -> usize {
        match self.config.variant {
            Variant::MultiplePrompts => self.task_prompt_width(),
            v if v.has_fuse() => self.num_slots() * self.task_prompt_width(),
            _ => 0,
        }
    }

    /// Stages whose decoder outputs are supervised, highest resolution first.
    pub fn supervised_stages(&self) -> Vec<usize> {
        self.config.supervised_stages(self.config.patch)
    }

    pub fn universal_prompt(&self) -> Option<ParamId> {
        match self.prompts {
            Prompts::Universal(id) => Some(id),
            _ => None,
        }
    }

    pub fn task_prompts(&self) -> &[ParamId] {
        match &self.prompts {
            Prompts::PerTask(ids) => ids,
            _ => &[],
        }
    }

    pub fn head_param_names(&self) -> Vec<String> {
        self.store
            .names()
            .filter(|n| n.starts_with(HEAD_PREFIX))
            .map(str::to_string)
            .collect()
    }

    /// Number of scalars over parameters whose name starts with `prefix`.
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Draws fresh values for every head parameter from `seed`.
    pub fn reinit_heads(&mut self, seed: u64) {
        let slope = self.config.leaky_slope;
        for p in self.store.iter_mut().filter(|p| p.name.starts_with(HEAD_PREFIX)) {
            p.value = match p.kind {
                ParamKind::Weight => {
                    let fan_in = p.value.len() / p.value.shape()[0];
                    normal_tensor(p.value.shape(), fan_in_normal(fan_in, slope), seed, &p.name)
                }
                _ => Tensor::zeros(p.value.shape()),
            };
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    fn run_block(&self, g: &mut Graph<T>, x: Var, blk: &ConvBlock) -> Result<Var> {
        let w = g.param(&self.store, blk.w);
        let b = g.param(&self.store, blk.b);
        let pad = same_padding([3, 3, 3])?;
        let y = g.conv3d(x, w, Some(b), blk.stride, pad)?;
        let gamma = g.param(&self.store, blk.gamma);
        let beta = g.param(&self.store, blk.beta);
        let n = g.instance_norm(y, gamma, beta, self.config.norm_eps)?;
        Ok(g.leaky_relu(n, self.config.leaky_slope))
    }

    fn run_pointwise(&self, g: &mut Graph<T>, x: Var, c: &Conv) -> Result<Var> {
        let w = g.param(&self.store, c.w);
        let b = g.param(&self.store, c.b);
        g.conv3d(x, w, Some(b), [1, 1, 1], [0, 0, 0])
    }

    fn check_input(&self, g: &Graph<T>, x: Var, task_id: usize) -> Result<()> {
        let task = self.registry.get(task_id)?;
        let shape = g.value(x).shape();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!("input must be [C, D, H, W], got {shape:?}")));
        }
        if shape[0] != task.in_channels {
            return Err(Error::Task(format!(
                "task {task_id} (`{}`) expects {} input channels, got {}",
                task.name, task.in_channels, shape[0]
            )));
        }
        Ok(())
    }

    /// Routes `x` through the stem matching its channel count.
    pub fn stem_forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let cin = g.value(x).shape()[0];
        let (_, blk) = self
            .stems
            .iter()
            .find(|(c, _)| *c == cin)
            .ok_or(Error::UnsupportedModality(cin))?;
        self.run_block(g, x, blk)
    }

    pub fn encoder_forward(&self, g: &mut Graph<T>, x_stem: Var) -> Result<EncoderOutput> {
        self.config.check_divisible(g.value(x_stem).spatial())?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x_stem;
        for [first, second] in &self.encoder {
            h = self.run_block(g, h, first)?;
            h = self.run_block(g, h, second)?;
            skips.push(h);
        }
        Ok(EncoderOutput { skips, bottleneck: h })
    }

    fn run_fuse(&self, g: &mut Graph<T>, prompt: ParamId, f: Var) -> Result<Var> {
        let pv = g.param(&self.store, prompt);
        let mut h = g.concat_channels(&[pv, f])?;
        for blk in &self.fuse {
            h = self.run_block(g, h, blk)?;
        }
        Ok(h)
    }

    /// `split(fuse(cat(universal_prompt, F)))` into one prompt per slot.
    pub fn fuse_forward(&self, g: &mut Graph<T>, f: Var) -> Result<TaskPromptSet> {
        let Prompts::Universal(prompt) = self.prompts else {
            return Err(Error::Usage(format!(
                "variant {} has no shared universal prompt",
                self.config.variant
            )));
        };
        let fused = self.run_fuse(g, prompt, f)?;
        let p = self.task_prompt_width();
        let prompts = g.split_channels(fused, &vec![p; self.num_slots()])?;
        Ok(TaskPromptSet { fused, prompts })
    }

    pub fn select_task_prompt(prompts: &TaskPromptSet, task_id: usize) -> Result<Var> {
        prompts.prompts.get(task_id).copied().ok_or_else(|| {
            Error::Task(format!(
                "task id {task_id} out of range for {} prompts",
                prompts.prompts.len()
            ))
        })
    }

    /// Task prompt of `task_id` for the configured variant, if any.
    pub fn task_prompt(&self, g: &mut Graph<T>, f: Var, task_id: usize) -> Result<Option<Var>> {
        match &self.prompts {
            Prompts::None => Ok(None),
            Prompts::Universal(_) => {
                let set = self.fuse_forward(g, f)?;
                Self::select_task_prompt(&set, task_id).map(Some)
            }
            Prompts::PerTask(ids) => {
                let id = *ids.get(task_id).ok_or_else(|| {
                    Error::Task(format!("task id {task_id} out of range for {} prompts", ids.len()))
                })?;
                self.run_fuse(g, id, f).map(Some)
            }
        }
    }

    /// Decodes the bottleneck into per-scale logits (highest resolution
    /// first). `task_prompt` is required by prompt variants; `task_id` is
    /// used by the one-hot dynamic head.
    pub fn decoder_forward(
        &self,
        g: &mut Graph<T>,
        f: Var,
        task_prompt: Option<Var>,
        skips: &[Var],
        task_id: usize,
    ) -> Result<Vec<Var>> {
        let variant = self.config.variant;
        let needs_prompt = variant.has_fuse();
        if needs_prompt != task_prompt.is_some() {
            return Err(Error::Usage(format!(
                "variant {variant} {} a task prompt",
                if needs_prompt { "needs" } else { "takes no" }
            )));
        }
        if skips.len() != self.encoder.len() {
            return Err(Error::Dimension(format!(
                "decoder expects {} skips, got {}",
                self.encoder.len(),
                skips.len()
            )));
        }
        let input = match task_prompt {
            Some(tp) if variant.prompt_at_decoder_input() => g.concat_channels(&[f, tp])?,
            _ => f,
        };
        let mut h = self.run_block(g, input, &self.decoder_input)?;
        let mut outputs = vec![None; self.encoder.len()];
        for st in &self.decoder {
            let w = g.param(&self.store, st.up.w);
            let b = g.param(&self.store, st.up.b);
            let up = g.conv_transpose3d(h, w, Some(b), st.up_stride)?;
            let cat = g.concat_channels(&[up, skips[st.stage]])?;
            h = self.run_block(g, cat, &st.block)?;
            outputs[st.stage] = Some(h);
        }

        let mut logits = Vec::new();
        for s in self.supervised_stages() {
            let feat = outputs[s].expect("every decoder stage produces an output");
            if s == 0 {
                if let Some(dynh) = &self.dynamic {
                    logits.push(self.dynamic_head(g, feat, f, task_id, dynh)?);
                    continue;
                }
            }
            let (_, head) = self.heads.iter().find(|(hs, _)| *hs == s).expect("head per supervised stage");
            let feat = match task_prompt {
                Some(tp) if s == 0 && variant == Variant::UniSegT => {
                    let fd = g.value(feat).spatial();
                    let pd = g.value(tp).spatial();
                    let factors = [fd[0] / pd[0], fd[1] / pd[1], fd[2] / pd[2]];
                    let up = g.upsample_nearest(tp, factors)?;
                    g.concat_channels(&[feat, up])?
                }
                _ => feat,
            };
            logits.push(self.run_pointwise(g, feat, head)?);
        }
        Ok(logits)
    }

    fn dynamic_head(&self, g: &mut Graph<T>, feat: Var, f: Var, task_id: usize, dynh: &DynamicHead) -> Result<Var> {
        let slots = self.num_slots();
        if task_id >= slots {
            return Err(Error::Task(format!("task id {task_id} out of range for {slots} task codes")));
        }
        let pooled = g.mean_spatial(f)?;
        let onehot = g.input(Tensor::from_fn(&[slots, 1, 1, 1], |i| {
            if i == task_id {
                T::one()
            } else {
                T::zero()
            }
        }));
        let code = g.concat_channels(&[pooled, onehot])?;
        let params = self.run_pointwise(g, code, &dynh.controller)?;
        let k = self.head_classes();
        let w8 = DYNAMIC_WIDTH;
        let pre = self.run_pointwise(g, feat, &dynh.pre)?;
        let mut h = g.leaky_relu(pre, self.config.leaky_slope);
        let mut offset = 0;
        let layers = [(w8, w8), (w8, w8), (w8, k)];
        for (i, &(cin, cout)) in layers.iter().enumerate() {
            let w = g.slice_flat(params, offset, &[cout, cin, 1, 1, 1])?;
            offset += cout * cin;
            let b = g.slice_flat(params, offset, &[cout])?;
            offset += cout;
            h = g.conv3d(h, w, Some(b), [1, 1, 1], [0, 0, 0])?;
            if i + 1 < layers.len() {
                h = g.leaky_relu(h, self.config.leaky_slope);
            }
        }
        Ok(h)
    }

    /// Stem, encoder, task prompt, decoder. Returns logits per supervised
    /// scale, highest resolution first.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, task_id: usize) -> Result<Vec<Var>> {
        self.check_input(g, x, task_id)?;
        let stem = self.stem_forward(g, x)?;
        let enc = self.encoder_forward(g, stem)?;
        let tp = self.task_prompt(g, enc.bottleneck, task_id)?;
        self.decoder_forward(g, enc.bottleneck, tp, &enc.skips, task_id)
    }

    /// Forward on a constant input, returning the logit tensors.
    pub fn forward_tensor(&self, x: &Tensor<T>, task_id: usize) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let logits = self.forward(&mut g, xv, task_id)?;
        Ok(logits.into_iter().map(|v| g.value(v).clone()).collect())
    }
}
