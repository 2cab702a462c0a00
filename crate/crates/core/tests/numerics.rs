use std::rc::Rc;

use proptest::prelude::*;
use qdepth::numerics::{finite_diff_check, FdOptions, ParamVars, Params, Tape, Tensor, Var};
use qdepth::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    w: &[f64],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                s += x[c * h * wd + y as usize * wd + xx as usize]
                                    * w[((o * c_in + c) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = s;
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(11);
    let a = Tensor::randn([5, 7], 1.0, &mut r);
    let b = Tensor::randn([7, 3], 1.0, &mut r);
    let tape = Tape::new();
    let c = tape
        .constant(a.clone())
        .matmul(tape.constant(b.clone()))
        .unwrap()
        .value();
    let oracle = naive_matmul(a.data(), b.data(), 5, 7, 3);
    for (x, y) in c.data().iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut r = rng(12);
    let x = Tensor::randn([2, 8, 8], 1.0, &mut r);
    let w = Tensor::randn([3, 2, 3, 3], 1.0, &mut r);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), stride, pad)
            .unwrap()
            .value();
        let oracle = naive_conv(x.data(), w.data(), 2, 8, 8, 3, 3, stride, pad);
        assert_eq!(y.numel(), oracle.len());
        for (a, b) in y.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_matches_direct_formula() {
    let tape = Tape::new();
    let s = tape
        .constant(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap())
        .softmax()
        .value();
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
    for (i, p) in s.data().iter().enumerate() {
        assert!((p - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_matches_composed_oracle() {
    let mut r = rng(13);
    let logits = Tensor::randn([6, 5], 2.0, &mut r);
    let targets: Vec<usize> = (0..6).map(|_| r.gen_range(0..5)).collect();
    let tape = Tape::new();
    let l = tape
        .constant(logits.clone())
        .cross_entropy(&targets)
        .unwrap()
        .item()
        .unwrap();
    let mut oracle = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        oracle -= (row[t].exp() / z).ln();
    }
    oracle /= 6.0;
    assert!((l - oracle).abs() < 1e-10);
}

fn random_params(seed: u64, specs: &[(&str, &[usize])]) -> Params {
    let mut r = rng(seed);
    let mut p = Params::new();
    for (name, shape) in specs {
        p.insert(*name, Tensor::randn(shape.to_vec(), 0.8, &mut r))
            .unwrap();
    }
    p
}

fn check<F>(p: &Params, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Result<Var<'t>>,
{
    finite_diff_check(p, &FdOptions::default(), f)
        .unwrap()
        .max_rel_err()
}

/// A fixed random projection turns any tensor into a non-trivial scalar.
fn project<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = Tensor::randn(v.shape(), 1.0, &mut rng(seed ^ 0xabc));
    Ok(v.mul(tape.constant(w))?.sum())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn elementwise_and_matrix_ops_pass_gradcheck(seed in 0u64..10_000) {
        let p = random_params(seed, &[("a", &[3, 4]), ("b", &[4, 2]), ("c", &[3, 4]), ("r", &[4])]);
        let err = check(&p, |t, v| {
            let (a, b, c, r) = (v.get("a")?, v.get("b")?, v.get("c")?, v.get("r")?);
            let x = a.mul(c)?.add(a)?.sub(c.scale(0.3))?.add_row(r)?.mul_row(r)?;
            let y = x.matmul(b)?.gelu().transpose()?;
            let z = t.concat_rows(&[y, y.sigmoid()])?.silu();
            let w = t.concat_cols(&[z.slice_rows(1, 2)?, z.slice_cols(0, 2)?.slice_rows(0, 2)?])?;
            project(t, w.add_scalar(0.5), seed)
        });
        prop_assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn normalization_and_losses_pass_gradcheck(seed in 0u64..10_000) {
        let p = random_params(seed, &[("x", &[4, 6]), ("g", &[6]), ("e", &[5, 6])]);
        let targets = [1usize, 0, 3, 2];
        let err = check(&p, |t, v| {
            let x = v.get("x")?.layer_norm(1e-5).mul_row(v.get("g")?)?;
            let emb = v.get("e")?.gather_rows(&[4, 0, 4, 2])?;
            let logits = x.add(emb)?.slice_cols(0, 5)?;
            let ce = logits.cross_entropy(&targets)?;
            let sm = project(t, logits.softmax(), seed)?;
            ce.add(sm)?.add(x.mean())
        });
        prop_assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn conv_and_upsample_pass_gradcheck(seed in 0u64..10_000) {
        let p = random_params(seed, &[("x", &[2, 5, 5]), ("k", &[3, 2, 3, 3]), ("b", &[3])]);
        let err = check(&p, |t, v| {
            let y = v.get("x")?.conv2d(v.get("k")?, 2, 1)?.add_channel(v.get("b")?)?;
            let u = y.silu().upsample(2)?;
            project(t, u.reshape(&[3, 36])?, seed)
        });
        prop_assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn masked_attention_passes_gradcheck(seed in 0u64..10_000) {
        let p = random_params(seed, &[("q", &[6, 4]), ("k", &[8, 4]), ("v", &[8, 4])]);
        let mut r = rng(seed);
        let mut mask: Vec<bool> = (0..12).map(|_| r.gen_bool(0.6)).collect();
        for i in 0..3 { mask[i * 4 + i] = true; }
        let mask: Rc<[bool]> = mask.into();
        let err = check(&p, |t, v| {
            let o = t.attention(v.get("q")?, v.get("k")?, v.get("v")?, 2, 2, mask.clone())?;
            project(t, o, seed)
        });
        prop_assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn distance_logits_pass_gradcheck(seed in 0u64..10_000) {
        let p = random_params(seed, &[("x", &[4, 3])]);
        let codes = Tensor::randn([5, 3], 1.0, &mut rng(seed + 1));
        let err = check(&p, |t, v| {
            let l = v.get("x")?.neg_sq_dist(t.constant(codes.clone()), 0.7)?;
            l.cross_entropy(&[0, 4, 2, 2])?.add(project(t, l, seed)?)
        });
        prop_assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-1000.0f64..1000.0, 1..20)) {
        let n = values.len();
        let tape = Tape::new();
        let s = tape.constant(Tensor::new([n], values).unwrap()).softmax().value();
        prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_is_linear(seed in 0u64..10_000, alpha in -5.0f64..5.0) {
        let p = random_params(seed, &[("w", &[3, 3]), ("x", &[2, 3])]);
        let grads = |scale: f64| {
            let tape = Tape::new();
            let v = tape.bind(&p);
            let y = v.get("x").unwrap().matmul(v.get("w").unwrap()).unwrap().gelu();
            tape.gradients(y.sum_squares().scale(scale)).unwrap()
        };
        let (g1, ga) = (grads(1.0), grads(alpha));
        for name in ["w", "x"] {
            for (a, b) in g1[name].data().iter().zip(ga[name].data()) {
                prop_assert!((alpha * a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let p = random_params(5, &[("w", &[4, 4]), ("x", &[3, 4])]);
    let run = || {
        let tape = Tape::new();
        let v = tape.bind(&p);
        let y = v
            .get("x")
            .unwrap()
            .matmul(v.get("w").unwrap())
            .unwrap()
            .layer_norm(1e-5);
        let value = y.value();
        (value, tape.gradients(y.sum_squares()).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn distance_logits_never_reach_the_code_table() {
    let p = random_params(3, &[("x", &[4, 3]), ("c", &[5, 3])]);
    let tape = Tape::new();
    let v = tape.bind(&p);
    let l = v
        .get("x")
        .unwrap()
        .neg_sq_dist(v.get("c").unwrap(), 1.0)
        .unwrap();
    let g = tape
        .gradients(l.cross_entropy(&[0, 1, 2, 3]).unwrap())
        .unwrap();
    assert!(g["c"].data().iter().all(|&x| x == 0.0));
    assert!(g["x"].data().iter().any(|&x| x != 0.0));
}
