use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numkernel::tensor::Tensor;

/// Named trainable (or frozen) tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParameterBlock {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
    pub trainable: bool,
}

/// Registry of all parameters of a model, addressable by name or index.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    blocks: Vec<ParameterBlock>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let gradient = Tensor::zeros(value.shape());
        let idx = self.blocks.len();
        self.blocks.push(ParameterBlock {
            name: name.to_string(),
            value,
            gradient,
            trainable: true,
        });
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    /// Register with normal(0, std) init.
    pub fn register_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<usize> {
        let dist = Normal::new(0.0, std).expect("valid normal");
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        self.register(name, Tensor::new(shape.to_vec(), values)?)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get(&self, idx: usize) -> &ParameterBlock {
        &self.blocks[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut ParameterBlock {
        &mut self.blocks[idx]
    }

    pub fn by_name(&self, name: &str) -> Result<&ParameterBlock> {
        Ok(self.get(self.index_of(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut ParameterBlock> {
        let idx = self.index_of(name)?;
        Ok(self.get_mut(idx))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParameterBlock> {
        self.blocks.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParameterBlock> {
        self.blocks.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for b in &mut self.blocks {
            b.gradient.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, idx: usize, grad: &[f64]) {
        let g = self.blocks[idx].gradient.values_mut();
        debug_assert_eq!(g.len(), grad.len());
        for (gi, d) in g.iter_mut().zip(grad) {
            *gi += d;
        }
    }
}
