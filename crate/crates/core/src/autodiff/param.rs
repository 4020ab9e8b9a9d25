use std::collections::HashMap;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter, used to decide weight decay and head membership.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or fully connected weight (weight decay applies).
    Weight,
    Bias,
    NormScale,
    NormShift,
    Prompt,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Accumulated gradient, same shape as `value`.
    pub grad: Tensor<T>,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Named, ordered parameter collection of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
    grads_ready: bool,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            grads_ready: false,
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        kind: ParamKind,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id.0);
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable: true,
            kind,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Resets every accumulated gradient to zero.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
        self.grads_ready = false;
    }

    /// Whether a backward pass has populated gradients since the last reset.
    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub(crate) fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[T], scale: T) {
        let dst = self.params[id.0].grad.data_mut();
        debug_assert_eq!(dst.len(), grad.len());
        for (d, &g) in dst.iter_mut().zip(grad) {
            *d += scale * g;
        }
    }
}
