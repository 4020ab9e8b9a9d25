use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Dense row-major array. Volumes are laid out channels-first as
/// `[C, D, H, W]`.
///
/// Gradient bookkeeping lives on the [`Graph`](crate::Graph) (per node) and on
/// [`Parameter`](crate::autodiff::Parameter) (accumulated), not here.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Channel extent of a `[C, D, H, W]` volume.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Spatial extents `[D, H, W]` of a `[C, D, H, W]` volume.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub(crate) fn expect_volume(&self, what: &str) -> Result<()> {
        if self.shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "{what} must be a [C, D, H, W] volume, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts to another precision (`f32 <-> f64`).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    /// Bitwise equality, treating `-0.0 != 0.0` and NaN payloads as distinct.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64().unwrap().to_bits() == b.to_f64().unwrap().to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let r = t.clone().reshaped(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }
}
