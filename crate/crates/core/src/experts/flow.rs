//! Flow-matching pieces: noisy-action samples, the regression target, and
//! Euler integration of a learned field.

use rand::Rng;

use super::types::ActionChunk;
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// `noisy = λ·A + (1−λ)·η`, `target = η − A`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub lambda: f64,
    pub eta: Tensor,
    pub noisy: Tensor,
    pub target: Tensor,
}

impl FlowSample {
    pub fn new(actions: &ActionChunk, lambda: f64, eta: Tensor) -> Result<Self> {
        let a = actions.values();
        if eta.numel() != a.len() {
            return Err(Error::shape(
                "flow sample",
                &[actions.horizon(), actions.dim()],
                eta.shape(),
            ));
        }
        let shape = [actions.horizon(), actions.dim()];
        let noisy = a
            .iter()
            .zip(eta.data())
            .map(|(&x, &e)| lambda * x + (1.0 - lambda) * e)
            .collect();
        let target = a.iter().zip(eta.data()).map(|(&x, &e)| e - x).collect();
        Ok(Self {
            lambda,
            noisy: Tensor::new(shape, noisy)?,
            target: Tensor::new(shape, target)?,
            eta: eta.reshape(shape)?,
        })
    }
}

/// Draws `λ ~ U[lo, hi]` and `η ~ N(0, I)`.
pub fn sample_flow(
    actions: &ActionChunk,
    lo: f64,
    hi: f64,
    rng: &mut impl Rng,
) -> Result<FlowSample> {
    if actions.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("action chunk".into()));
    }
    let lambda = rng.gen_range(lo..=hi);
    let eta = Tensor::randn([actions.horizon(), actions.dim()], 1.0, rng);
    FlowSample::new(actions, lambda, eta)
}

/// Sinusoidal features of the noise level, `[1 × dim]`: `sin` then `cos`
/// over geometrically spaced frequencies.
pub fn time_features(lambda: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 1000f64.powf(i as f64 / half as f64);
        out[i] = (lambda * freq).sin();
        out[half + i] = (lambda * freq).cos();
    }
    Tensor::new([1, dim], out).expect("positive dim")
}

/// Squared error of a predicted field against the sample's target, summed
/// over the chunk.
pub fn cfm_loss<'t>(field: Var<'t>, sample: &FlowSample) -> Result<Var<'t>> {
    let target = field.tape().constant(sample.target.clone());
    Ok(field.sub(target)?.sum_squares())
}

/// Euler steps from `λ = 0` to `λ = 1`: `Â ← Â − f(Â, λ)/steps`.
pub fn integrate<F>(noise: Tensor, steps: usize, mut field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::Param("integration needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut a = noise;
    for s in 0..steps {
        let f = field(&a, s as f64 * dt)?;
        if f.shape() != a.shape() {
            return Err(Error::shape("flow field", a.shape(), f.shape()));
        }
        a.data_mut()
            .iter_mut()
            .zip(f.data())
            .for_each(|(x, &v)| *x -= dt * v);
    }
    Ok(a)
}
