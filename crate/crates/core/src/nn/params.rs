use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Borrowed view of one learnable tensor with its gradient and Adam moments.
#[derive(Debug, Clone, Copy)]
pub struct Parameter<'a> {
    pub name: &'a str,
    pub value: &'a Tensor,
    pub grad: &'a Tensor,
    pub m1: &'a Tensor,
    pub m2: &'a Tensor,
    pub step_count: u64,
}

/// Registry of every learnable tensor of a model.
///
/// Values, gradients and optimizer moments live in parallel vectors so a tape
/// can borrow the values while backward writes into the gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub(crate) names: Vec<String>,
    pub(crate) values: Vec<Tensor>,
    pub(crate) grads: Vec<Tensor>,
    pub(crate) m1: Vec<Tensor>,
    pub(crate) m2: Vec<Tensor>,
    pub(crate) step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::invalid(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let zeros = Tensor::zeros(value.shape());
        self.names.push(name);
        self.grads.push(zeros.clone());
        self.m1.push(zeros.clone());
        self.m2.push(zeros);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn parameter(&self, id: ParamId) -> Parameter<'_> {
        let i = id.0;
        Parameter {
            name: &self.names[i],
            value: &self.values[i],
            grad: &self.grads[i],
            m1: &self.m1[i],
            m2: &self.m2[i],
            step_count: self.step_count,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Values for a tape to read, gradients for its backward pass to fill.
    pub fn split_mut(&mut self) -> (&[Tensor], &mut [Tensor]) {
        (&self.values, &mut self.grads)
    }
}
