use crate::error::{Error, Result};
use crate::io::Plane;
use crate::numerics::Tensor;

/// Relative depth frame with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape("depth map", &[height, width], &[values.len()]));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Param(format!("depth value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// `[1 × H × W]` tensor view for the convolutional codec.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.height, self.width], self.values.clone()).expect("validated dims")
    }

    pub fn mse(&self, other: &DepthMap) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                "depth mse",
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        let n = self.values.len() as f64;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    /// 16-bit plane; `v` maps to `round(v·65535)`.
    pub fn to_plane16(&self) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            maxval: u16::MAX,
            samples: self
                .values
                .iter()
                .map(|v| (v * 65535.0).round() as u16)
                .collect(),
        }
    }

    /// 8-bit visualization plane.
    pub fn to_plane8(&self) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            maxval: 255,
            samples: self
                .values
                .iter()
                .map(|v| (v * 255.0).round() as u16)
                .collect(),
        }
    }

    pub fn from_plane(p: &Plane) -> Result<Self> {
        let scale = p.maxval as f64;
        Self::new(
            p.height,
            p.width,
            p.samples.iter().map(|&s| s as f64 / scale).collect(),
        )
    }

    /// Snaps values onto the 16-bit storage lattice.
    pub fn quantized16(mut self) -> Self {
        for v in &mut self.values {
            *v = (*v * 65535.0).round() / 65535.0;
        }
        self
    }
}
