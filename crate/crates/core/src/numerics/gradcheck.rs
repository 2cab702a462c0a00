//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamVars, Params};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub eps: f64,
    /// Checks at most this many entries of each tensor (sampled by `seed`).
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&FdEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Evaluates `f` at `params` without recording gradients.
pub fn evaluate<F>(params: &Params, f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = tape.bind_frozen(params);
    f(&tape, &vars)?.item()
}

/// Compares tape gradients of `f` entry by entry against the fourth-order
/// central difference `(8(f(p+ε) − f(p−ε)) − (f(p+2ε) − f(p−2ε))) / 12ε`.
/// Fails with [`Error::OracleInvalid`] when two evaluations at the same
/// parameters disagree.
pub fn finite_diff_check<F>(params: &Params, opts: &FdOptions, f: F) -> Result<FdReport>
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Result<Var<'t>>,
{
    let base = evaluate(params, &f)?;
    let again = evaluate(params, &f)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "objective is not deterministic: {base} vs {again}"
        )));
    }
    let analytic = {
        let tape = Tape::new();
        let vars = tape.bind(params);
        let loss = f(&tape, &vars)?;
        tape.gradients(loss)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport::default();
    for (name, value) in params.iter() {
        let n = value.numel();
        let indices: Vec<usize> = match opts.max_entries_per_param {
            Some(cap) if cap < n => {
                let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let grad = &analytic[name];
        let mut entry = FdEntry {
            name: name.to_string(),
            checked: indices.len(),
            max_rel_err: 0.0,
            max_abs_grad: 0.0,
        };
        let mut probe = params.clone();
        for &i in &indices {
            let orig = value.data()[i];
            let mut at = |delta: f64| -> Result<f64> {
                probe.get_mut(name).expect("same names").data_mut()[i] = orig + delta;
                evaluate(&probe, &f)
            };
            let h = opts.eps;
            let numeric = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            probe.get_mut(name).expect("same names").data_mut()[i] = orig;
            let a = grad.data()[i];
            entry.max_rel_err = entry.max_rel_err.max(relative_error(a, numeric));
            entry.max_abs_grad = entry.max_abs_grad.max(a.abs());
        }
        report.entries.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut p = Params::new();
        p.insert("x", Tensor::new([3], vec![0.5, -1.5, 2.0]).unwrap())
            .unwrap();
        let r = finite_diff_check(&p, &FdOptions::default(), |_, v| {
            Ok(v.get("x")?.sum_squares())
        })
        .unwrap();
        assert!(r.max_rel_err() < 1e-9, "{r:?}");
    }

    #[test]
    fn non_deterministic_objective_is_rejected() {
        use std::cell::Cell;
        let mut p = Params::new();
        p.insert("x", Tensor::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0);
        let r = finite_diff_check(&p, &FdOptions::default(), |t, v| {
            calls.set(calls.get() + 1.0);
            let c = t.constant(Tensor::scalar(calls.get()));
            v.get("x")?.mul(c)
        });
        assert!(matches!(r, Err(Error::OracleInvalid(_))));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
