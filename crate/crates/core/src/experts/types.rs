use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// What the policy sees at one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `size × size × 3`, channel-last, values in `[0, 1]`.
    pub image: Vec<f64>,
    pub image_size: usize,
    pub instruction: Vec<usize>,
    pub proprio: Vec<f64>,
}

impl Observation {
    pub fn validate(&self, vocab: usize, proprio_dim: usize) -> Result<()> {
        if self.image.len() != self.image_size * self.image_size * 3 {
            return Err(Error::shape(
                "observation image",
                &[self.image_size, self.image_size, 3],
                &[self.image.len()],
            ));
        }
        if let Some(&bad) = self.instruction.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                index: bad,
                bound: vocab,
            });
        }
        if self.proprio.len() != proprio_dim {
            return Err(Error::shape(
                "proprio",
                &[proprio_dim],
                &[self.proprio.len()],
            ));
        }
        Ok(())
    }
}

/// `H × A` block of consecutive actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    horizon: usize,
    dim: usize,
    values: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if horizon == 0 || dim == 0 || values.len() != horizon * dim {
            return Err(Error::shape(
                "action chunk",
                &[horizon, dim],
                &[values.len()],
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action chunk".into()));
        }
        Ok(Self {
            horizon,
            dim,
            values,
        })
    }

    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self {
            horizon,
            dim,
            values: vec![0.0; horizon * dim],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.horizon, self.dim], self.values.clone()).expect("validated dims")
    }
}
