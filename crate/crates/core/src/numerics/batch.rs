//! Minibatch gradients computed one example per tape, optionally in
//! parallel, and reduced in example order.

use std::collections::BTreeMap;

use super::params::{ParamVars, Params};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::par::{self, Exec};

/// Per-example scalar loss plus any auxiliary numbers the caller wants back.
pub struct ExampleOutput<'t> {
    pub loss: Var<'t>,
    pub metrics: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchGrads {
    /// Mean of the per-example losses.
    pub loss: f64,
    /// Per-example auxiliary metrics, in example order.
    pub metrics: Vec<Vec<f64>>,
    /// Gradient of the mean loss.
    pub grads: BTreeMap<String, Tensor>,
}

/// Differentiates the mean of `f(i)` over `0..n` with respect to `params`.
/// Summation runs in example order, so the result does not depend on `exec`.
pub fn batch_gradients<F>(exec: Exec, params: &Params, n: usize, f: F) -> Result<BatchGrads>
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>, usize) -> Result<ExampleOutput<'t>> + Sync + Send,
{
    let per = par::try_map_indexed(exec, n, |i| {
        let tape = Tape::new();
        let vars = tape.bind(params);
        let out = f(&tape, &vars, i)?;
        let loss = out.loss.item()?;
        Ok::<_, crate::Error>((loss, out.metrics, tape.gradients(out.loss)?))
    })?;
    let scale = 1.0 / n.max(1) as f64;
    let mut grads: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape().to_vec())))
        .collect();
    let mut loss = 0.0;
    let mut metrics = Vec::with_capacity(n);
    for (l, m, g) in per {
        loss += l;
        metrics.push(m);
        for (name, t) in g {
            if let Some(acc) = grads.get_mut(&name) {
                acc.data_mut()
                    .iter_mut()
                    .zip(t.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
    for t in grads.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok(BatchGrads {
        loss: loss * scale,
        metrics,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const XS: [[f64; 2]; 3] = [[1.0, 2.0], [3.0, -1.0], [0.0, 4.0]];

    #[test]
    fn matches_single_tape_mean_and_is_exec_independent() {
        let mut p = Params::new();
        p.insert("w", Tensor::new([2], vec![0.5, -1.5]).unwrap())
            .unwrap();
        fn f<'t>(_: &'t Tape, v: &ParamVars<'t>, i: usize) -> Result<ExampleOutput<'t>> {
            let w = v.get("w")?;
            let x = w.tape().constant(Tensor::new([2], XS[i].to_vec())?);
            Ok(ExampleOutput {
                loss: w.mul(x)?.sum_squares(),
                metrics: vec![i as f64],
            })
        }
        let a = batch_gradients(Exec::Sequential, &p, 3, f).unwrap();
        let b = batch_gradients(Exec::Parallel, &p, 3, f).unwrap();
        assert_eq!(a.grads, b.grads);
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        // d/dw mean_i sum (w x_i)^2 = mean_i 2 w x_i^2
        let w = [0.5, -1.5];
        for j in 0..2 {
            let g: f64 = XS.iter().map(|x| 2.0 * w[j] * x[j] * x[j]).sum::<f64>() / 3.0;
            assert!((a.grads["w"].data()[j] - g).abs() < 1e-12);
        }
        assert_eq!(a.metrics, vec![vec![0.0], vec![1.0], vec![2.0]]);
    }
}
