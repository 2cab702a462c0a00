//! Finite-difference checks of every differentiable tape operation, one
//! small random instance per op.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{finite_diff_check, FdOptions};
use super::params::{ParamVars, Params};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Worst relative error of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

struct Suite {
    seed: u64,
    out: Vec<OpCheck>,
}

impl Suite {
    fn params(&self, specs: &[(&str, &[usize])]) -> Result<Params> {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        let mut p = Params::new();
        for (name, shape) in specs {
            p.insert(*name, Tensor::randn(shape.to_vec(), 0.8, &mut r))?;
        }
        Ok(p)
    }

    /// Checks `f` projected to a scalar through fixed random weights.
    fn case<F>(&mut self, name: &str, specs: &[(&str, &[usize])], f: F) -> Result<()>
    where
        F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Result<Var<'t>>,
    {
        let p = self.params(specs)?;
        let seed = self.seed;
        let report = finite_diff_check(&p, &FdOptions::default(), |t, v| {
            let y = f(t, v)?;
            let w = Tensor::randn(
                y.shape(),
                1.0,
                &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9),
            );
            Ok(y.mul(t.constant(w))?.sum())
        })?;
        self.out.push(OpCheck {
            name: name.to_string(),
            max_rel_err: report.max_rel_err(),
            checked: report.entries.iter().map(|e| e.checked).sum(),
        });
        Ok(())
    }
}

/// Runs every op check for `seed`, in a fixed order.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut s = Suite {
        seed,
        out: Vec::new(),
    };
    let ab: &[(&str, &[usize])] = &[("a", &[3, 4]), ("b", &[3, 4])];
    s.case("add", ab, |_, v| v.get("a")?.add(v.get("b")?))?;
    s.case("sub", ab, |_, v| v.get("a")?.sub(v.get("b")?))?;
    s.case("mul", ab, |_, v| v.get("a")?.mul(v.get("b")?))?;
    let ar: &[(&str, &[usize])] = &[("a", &[3, 4]), ("r", &[4])];
    s.case("add_row", ar, |_, v| v.get("a")?.add_row(v.get("r")?))?;
    s.case("mul_row", ar, |_, v| v.get("a")?.mul_row(v.get("r")?))?;
    s.case("add_channel", &[("x", &[2, 3, 3]), ("b", &[2])], |_, v| {
        v.get("x")?.add_channel(v.get("b")?)
    })?;
    let a: &[(&str, &[usize])] = &[("a", &[3, 4])];
    s.case("scale", a, |_, v| Ok(v.get("a")?.scale(-1.7)))?;
    s.case("add_scalar", a, |_, v| Ok(v.get("a")?.add_scalar(0.3)))?;
    s.case("gelu", a, |_, v| Ok(v.get("a")?.gelu()))?;
    s.case("silu", a, |_, v| Ok(v.get("a")?.silu()))?;
    s.case("sigmoid", a, |_, v| Ok(v.get("a")?.sigmoid()))?;
    s.case("matmul", &[("a", &[3, 4]), ("b", &[4, 2])], |_, v| {
        v.get("a")?.matmul(v.get("b")?)
    })?;
    s.case("transpose", a, |_, v| v.get("a")?.transpose())?;
    s.case("reshape", a, |_, v| v.get("a")?.reshape(&[2, 6]))?;
    s.case("slice_rows", a, |_, v| v.get("a")?.slice_rows(1, 2))?;
    s.case("slice_cols", a, |_, v| v.get("a")?.slice_cols(1, 2))?;
    s.case("gather_rows", a, |_, v| v.get("a")?.gather_rows(&[2, 0, 2]))?;
    s.case("concat_rows", &[("a", &[2, 4]), ("b", &[3, 4])], |t, v| {
        t.concat_rows(&[v.get("a")?, v.get("b")?])
    })?;
    s.case("concat_cols", &[("a", &[3, 2]), ("b", &[3, 4])], |t, v| {
        t.concat_cols(&[v.get("a")?, v.get("b")?])
    })?;
    s.case("layer_norm", &[("a", &[3, 6])], |_, v| {
        Ok(v.get("a")?.layer_norm(1e-5))
    })?;
    s.case("sum", a, |_, v| Ok(v.get("a")?.sum()))?;
    s.case("mean", a, |_, v| Ok(v.get("a")?.mean()))?;
    s.case("sum_squares", a, |_, v| Ok(v.get("a")?.sum_squares()))?;
    s.case("softmax", a, |_, v| Ok(v.get("a")?.softmax()))?;
    s.case("cross_entropy", &[("a", &[4, 5])], |_, v| {
        v.get("a")?.cross_entropy(&[1, 0, 4, 4])
    })?;
    let codes = Tensor::randn(
        [5, 3],
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
    );
    s.case("neg_sq_dist", &[("x", &[4, 3])], |t, v| {
        v.get("x")?.neg_sq_dist(t.constant(codes.clone()), 0.7)
    })?;
    s.case(
        "conv2d",
        &[("x", &[2, 5, 5]), ("k", &[3, 2, 3, 3])],
        |_, v| v.get("x")?.conv2d(v.get("k")?, 2, 1),
    )?;
    s.case("upsample", &[("x", &[2, 3, 3])], |_, v| {
        v.get("x")?.upsample(2)
    })?;
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let mut mask: Vec<bool> = (0..12).map(|_| r.gen_bool(0.6)).collect();
    for i in 0..3 {
        mask[i * 4 + i] = true;
    }
    let mask: Rc<[bool]> = mask.into();
    s.case(
        "attention",
        &[("q", &[6, 4]), ("k", &[8, 4]), ("v", &[8, 4])],
        |t, v| t.attention(v.get("q")?, v.get("k")?, v.get("v")?, 2, 2, mask.clone()),
    )?;
    s.out.push(straight_through_check(seed)?);
    Ok(s.out)
}

/// The straight-through estimator is not the derivative of its forward
/// value, so it is checked against its definition instead: the gradient
/// reaching the input equals the upstream gradient exactly, and a detached
/// copy receives none.
fn straight_through_check(seed: u64) -> Result<OpCheck> {
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let x = Tensor::randn([3, 4], 1.0, &mut r);
    let q = Tensor::randn([3, 4], 1.0, &mut r);
    let w = Tensor::randn([3, 4], 1.0, &mut r);
    let mut p = Params::new();
    p.insert("x", x)?;
    let tape = Tape::new();
    let vars = tape.bind(&p);
    let xv = vars.get("x")?;
    let ste = xv.straight_through(q.clone())?;
    let loss = ste
        .mul(tape.constant(w.clone()))?
        .sum()
        .add(xv.detach().sum_squares())?;
    let g = tape.gradients(loss)?;
    let mut err = if ste.value().data() == q.data() {
        0.0
    } else {
        f64::INFINITY
    };
    for (a, b) in g["x"].data().iter().zip(w.data()) {
        err = f64::max(err, super::gradcheck::relative_error(*a, *b));
    }
    Ok(OpCheck {
        name: "straight_through".into(),
        max_rel_err: err,
        checked: w.numel(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_names_are_unique() {
        let r = op_suite(0).unwrap();
        let mut names: Vec<_> = r.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), r.len());
        for c in &r {
            assert!(c.max_rel_err < 1e-4, "{c:?}");
            assert!(c.checked > 0);
        }
    }
}
