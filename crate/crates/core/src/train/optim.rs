use crate::autodiff::{ParamKind, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Optimisation and sampling hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Nesterov momentum.
    pub momentum: f64,
    /// L2 penalty on convolution weights.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub poly_power: f64,
    pub seed: u64,
    /// Deep-supervision weight of scale `s` is proportional to `ds_decay^s`.
    pub ds_decay: f64,
    pub foreground_crop_prob: f64,
    /// Write a checkpoint every this many iterations; 0 writes only the last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.01,
            momentum: 0.99,
            weight_decay: 3e-5,
            batch_size: 2,
            max_iterations: 1000,
            poly_power: 0.9,
            seed: 0,
            ds_decay: 0.5,
            foreground_crop_prob: 0.33,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return fail(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return fail(format!("poly_power must be non-negative, got {}", self.poly_power));
        }
        if !(self.ds_decay > 0.0 && self.ds_decay <= 1.0) {
            return fail(format!("ds_decay must lie in (0, 1], got {}", self.ds_decay));
        }
        if !(0.0..=1.0).contains(&self.foreground_crop_prob) {
            return fail(format!(
                "foreground_crop_prob must lie in [0, 1], got {}",
                self.foreground_crop_prob
            ));
        }
        Ok(())
    }

    /// `initial_lr * (1 - it / max_iterations)^poly_power`, zero from
    /// `max_iterations` on.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if self.max_iterations == 0 || iteration >= self.max_iterations {
            return 0.0;
        }
        let frac = 1.0 - iteration as f64 / self.max_iterations as f64;
        self.initial_lr * frac.powf(self.poly_power)
    }
}

/// Momentum buffers (trainable parameters only) and the iteration counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub buffers: Vec<Option<Tensor<T>>>,
    pub iteration: usize,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        OptimizerState {
            buffers: store
                .iter()
                .map(|(_, p)| p.trainable.then(|| Tensor::zeros(p.value.shape())))
                .collect(),
            iteration: 0,
        }
    }
}

/// One Nesterov SGD step at the polynomially decayed learning rate, in the
/// form `b = μ b + g;  p -= lr (g + μ b)` with `g` including weight decay for
/// convolution weights. Gradients are cleared afterwards. Returns the rate
/// used.
pub fn sgd_poly_step<T: Real>(store: &mut ParamStore<T>, opt: &mut OptimizerState<T>, cfg: &TrainConfig) -> Result<f64> {
    if !store.grads_ready() {
        return Err(Error::Usage("optimizer step before backward".into()));
    }
    if opt.buffers.len() != store.len() {
        return Err(Error::Usage(format!(
            "optimizer state tracks {} parameters, model has {}",
            opt.buffers.len(),
            store.len()
        )));
    }
    let lr_f = cfg.lr_at(opt.iteration);
    let (lr, mu, wd) = (T::lit(lr_f), T::lit(cfg.momentum), T::lit(cfg.weight_decay));
    for (p, buf) in store.iter_mut().zip(opt.buffers.iter_mut()) {
        if !p.trainable {
            continue;
        }
        let buf = buf.as_mut().ok_or_else(|| {
            Error::Usage(format!("no momentum buffer for trainable parameter `{}`", p.name))
        })?;
        let decay = p.kind == ParamKind::Weight;
        let (value, grad, b) = (p.value.data_mut(), p.grad.data(), buf.data_mut());
        for i in 0..value.len() {
            let mut g = grad[i];
            if decay {
                g += wd * value[i];
            }
            b[i] = mu * b[i] + g;
            value[i] -= lr * (g + mu * b[i]);
        }
    }
    opt.iteration += 1;
    store.zero_grad();
    Ok(lr_f)
}
