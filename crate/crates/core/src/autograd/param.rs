use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Position of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar = f32> {
    id: String,
    value: Tensor<T>,
    grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(id: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            id: id.into(),
            value,
            grad,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor<T> {
        &mut self.grad
    }

    /// Mutable value and read-only gradient at once, for optimizer updates.
    pub fn split_mut(&mut self) -> (&mut Tensor<T>, &Tensor<T>) {
        (&mut self.value, &self.grad)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<(), TensorError> {
        self.grad.add_assign(g)
    }
}

/// Ordered collection of parameters with unique ids.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// # Panics
    /// On a duplicate id; ids are fixed by model construction.
    pub fn push(&mut self, id: impl Into<String>, value: Tensor<T>) -> ParamId {
        let id = id.into();
        assert!(self.find(&id).is_none(), "duplicate parameter id `{id}`");
        self.params.push(Parameter::new(id, value));
        ParamId(self.params.len() - 1)
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

    pub(crate) fn try_get_mut(&mut self, id: ParamId) -> Option<&mut Parameter<T>> {
        self.params.get_mut(id.0)
    }

    pub fn find(&self, id: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.id == id).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.grad.clone()).collect()
    }

    /// Same ids and values at another precision; gradients start at zero.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.id.clone(), p.value.cast()))
                .collect(),
        }
    }

    /// Copy values from `other`, which must hold the same ids and shapes.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<(), TensorError> {
        if other.len() != self.len() {
            return Err(TensorError::config(
                "load_values",
                format!("{} parameters, source has {}", self.len(), other.len()),
            ));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.id != src.id || dst.value.shape() != src.value.shape() {
                return Err(TensorError::config(
                    "load_values",
                    format!(
                        "`{}` {:?} does not match `{}` {:?}",
                        dst.id,
                        dst.value.shape(),
                        src.id,
                        src.value.shape()
                    ),
                ));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
