//! Dense row-major f64 tensors and named parameter blocks.

use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Dense n-dimensional array, row-major, 64-bit floats throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "Tensor::new",
                format!("{:?} ({} elems)", shape, expected),
                format!("{} elems", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut SeedStream) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: rng.he_uniform(fan_in, n),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_fill(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Handle to a parameter block inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A learnable parameter: value, accumulated gradient, and momentum buffer,
/// all sharing one shape.
#[derive(Clone, Debug)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
    pub momentum: Tensor,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        ParamBlock {
            name: name.into(),
            value,
            gradient,
            momentum,
        }
    }
}

/// An ordered collection of named parameter blocks; the unit the optimizer,
/// gradient checker, and checkpoint format operate on.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { blocks: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.blocks.len());
        self.blocks.push(ParamBlock::new(name, value));
        id
    }

    pub fn get(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamBlock {
        &mut self.blocks[id.0]
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn zero_gradients(&mut self) {
        for b in &mut self.blocks {
            b.gradient.zero_fill();
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "diagnostic names shape: {msg}");
        assert!(msg.contains("5 elems"), "diagnostic names length: {msg}");
    }

    #[test]
    fn param_block_shapes_agree() {
        let b = ParamBlock::new("w", Tensor::zeros(&[3, 4]));
        assert_eq!(b.value.shape(), b.gradient.shape());
        assert_eq!(b.value.shape(), b.momentum.shape());
    }
}
