use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::error::Result;
use crate::rng::SeededRng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape, |_| rng.normal())
}

fn eval(f: impl FnOnce(&mut Tape<'_>) -> Result<Var>) -> Tensor {
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let v = f(&mut t).unwrap();
    t.value(v).clone()
}

const OP_TOL: f64 = 1e-3;
const EPS: f64 = 1e-4;

#[test]
fn matmul_identity_and_zeros() {
    let b = randn(&[3, 5], 1);
    let out = eval(|t| {
        let i = t.constant(Tensor::eye(3))?;
        let bv = t.constant(b.clone())?;
        t.matmul(i, bv)
    });
    assert!(out.max_abs_diff(&b) < 1e-15);
    let out = eval(|t| {
        let a = t.constant(randn(&[4, 3], 2))?;
        let z = t.constant(Tensor::zeros(&[3, 2]))?;
        t.matmul(a, z)
    });
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_mismatch() {
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(t.matmul(a, b).is_err());
}

#[test]
fn matmul_sum_gradient_is_ones_times_bt() {
    let a = randn(&[3, 4], 3);
    let b = randn(&[4, 2], 4);
    let mut store = ParamStore::new();
    let ia = store.add("a", a).unwrap();
    let mut t = Tape::new(&store);
    let av = t.param(ia);
    let bv = t.constant(b.clone()).unwrap();
    let p = t.matmul(av, bv).unwrap();
    let s = t.sum(p).unwrap();
    let g = t.backward(s).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..2).map(|j| b.data()[k * 2 + j]).sum();
            assert!((g.get(ia).data()[i * 4 + k] - expect).abs() < 1e-12);
        }
    }
    let err = grad_check(
        |t, x| {
            let bv = t.constant(b.clone())?;
            let p = t.matmul(x, bv)?;
            t.sum(p)
        },
        &randn(&[3, 4], 5),
        EPS,
    )
    .unwrap();
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn softmax_closed_forms() {
    let out = eval(|t| {
        let a = t.constant(Tensor::new(vec![2, 2], vec![5.0, 5.0, 0.0, 3f64.ln()]).unwrap())?;
        t.softmax_rows(a)
    });
    let d = out.data();
    assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
    assert!((d[2] - 0.25).abs() < 1e-12 && (d[3] - 0.75).abs() < 1e-12);
}

/// Weighted sum with fixed random weights makes the check a full
/// Jacobian-vector product rather than the (zero) gradient of a plain sum.
fn weighted(t: &mut Tape<'_>, v: Var, seed: u64) -> Result<Var> {
    let w = t.constant(randn(t.shape(v), seed))?;
    let p = t.mul(v, w)?;
    t.sum(p)
}

#[test]
fn elementwise_ops_pass_gradient_checks() {
    for (shape, seed) in [(vec![3, 4], 10u64), (vec![2, 5, 3], 11), (vec![7], 12)] {
        let x = randn(&shape, seed);
        let checks: Vec<(&str, f64)> = vec![
            (
                "softmax",
                grad_check(|t, x| { let y = t.softmax_rows(x)?; weighted(t, y, 99) }, &x, EPS).unwrap(),
            ),
            (
                "gelu",
                grad_check(|t, x| { let y = t.gelu(x)?; weighted(t, y, 98) }, &x, EPS).unwrap(),
            ),
            (
                "scale",
                grad_check(|t, x| { let y = t.scale(x, -1.7)?; weighted(t, y, 97) }, &x, EPS).unwrap(),
            ),
            (
                "add_broadcast",
                grad_check(
                    |t, x| {
                        let last = *t.shape(x).last().unwrap();
                        let b = t.constant(randn(&[last], 5))?;
                        let y = t.add(x, b)?;
                        let z = t.mul(y, y)?;
                        t.sum(z)
                    },
                    &x,
                    EPS,
                )
                .unwrap(),
            ),
        ];
        for (name, err) in checks {
            assert!(err < OP_TOL, "{name} {shape:?}: {err}");
        }
    }
}

#[test]
fn add_broadcast_gradient_to_bias() {
    let x = randn(&[4, 3], 20);
    let err = grad_check(
        |t, b| {
            let xv = t.constant(x.clone())?;
            let y = t.add(xv, b)?;
            let z = t.mul(y, y)?;
            t.sum(z)
        },
        &randn(&[3], 21),
        EPS,
    )
    .unwrap();
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn layer_norm_properties() {
    let out = eval(|t| {
        let x = t.constant(Tensor::full(&[2, 4], 3.0))?;
        let g = t.constant(Tensor::ones(&[4]))?;
        let b = t.constant(Tensor::zeros(&[4]))?;
        t.layer_norm(x, g, b, 1e-5)
    });
    assert!(out.data().iter().all(|&v| v == 0.0));

    let bias = randn(&[4], 3);
    let out = eval(|t| {
        let x = t.constant(randn(&[3, 4], 2))?;
        let g = t.constant(Tensor::zeros(&[4]))?;
        let b = t.constant(bias.clone())?;
        t.layer_norm(x, g, b, 1e-5)
    });
    for row in out.data().chunks(4) {
        assert_eq!(row, bias.data());
    }

    let out = eval(|t| {
        let x = t.constant(randn(&[5, 8], 4))?;
        let g = t.constant(Tensor::ones(&[8]))?;
        let b = t.constant(Tensor::zeros(&[8]))?;
        t.layer_norm(x, g, b, 1e-5)
    });
    for row in out.data().chunks(8) {
        assert!((row.iter().sum::<f64>() / 8.0).abs() < 1e-5);
    }
}

#[test]
fn layer_norm_gradients() {
    let g0 = randn(&[8], 31);
    let b0 = randn(&[8], 32);
    let x0 = randn(&[4, 8], 33);
    let err_x = grad_check(
        |t, x| {
            let g = t.constant(g0.clone())?;
            let b = t.constant(b0.clone())?;
            let y = t.layer_norm(x, g, b, 1e-5)?;
            weighted(t, y, 34)
        },
        &x0,
        EPS,
    )
    .unwrap();
    let err_g = grad_check(
        |t, g| {
            let x = t.constant(x0.clone())?;
            let b = t.constant(b0.clone())?;
            let y = t.layer_norm(x, g, b, 1e-5)?;
            weighted(t, y, 35)
        },
        &g0,
        EPS,
    )
    .unwrap();
    let err_b = grad_check(
        |t, b| {
            let x = t.constant(x0.clone())?;
            let g = t.constant(g0.clone())?;
            let y = t.layer_norm(x, g, b, 1e-5)?;
            weighted(t, y, 36)
        },
        &b0,
        EPS,
    )
    .unwrap();
    assert!(err_x < OP_TOL && err_g < OP_TOL && err_b < OP_TOL, "{err_x} {err_g} {err_b}");
}

#[test]
fn affine_and_bmm_gradients() {
    let w0 = randn(&[4, 3], 40);
    let b0 = randn(&[3], 41);
    let x0 = randn(&[2, 5, 4], 42);
    let err = grad_check(
        |t, x| {
            let w = t.constant(w0.clone())?;
            let b = t.constant(b0.clone())?;
            let y = t.affine(x, w, Some(b))?;
            weighted(t, y, 43)
        },
        &x0,
        EPS,
    )
    .unwrap();
    assert!(err < OP_TOL, "affine x {err}");
    let err = grad_check(
        |t, w| {
            let x = t.constant(x0.clone())?;
            let b = t.constant(b0.clone())?;
            let y = t.affine(x, w, Some(b))?;
            weighted(t, y, 44)
        },
        &w0,
        EPS,
    )
    .unwrap();
    assert!(err < OP_TOL, "affine w {err}");

    for trans in [false, true] {
        let other = if trans { randn(&[3, 6, 4], 45) } else { randn(&[3, 4, 6], 45) };
        let a0 = randn(&[3, 5, 4], 46);
        let err_a = grad_check(
            |t, a| {
                let b = t.constant(other.clone())?;
                let y = t.bmm(a, b, trans)?;
                weighted(t, y, 47)
            },
            &a0,
            EPS,
        )
        .unwrap();
        let err_b = grad_check(
            |t, b| {
                let a = t.constant(a0.clone())?;
                let y = t.bmm(a, b, trans)?;
                weighted(t, y, 48)
            },
            &other,
            EPS,
        )
        .unwrap();
        assert!(err_a < OP_TOL && err_b < OP_TOL, "bmm trans={trans}: {err_a} {err_b}");
    }
}

#[test]
fn bmm_matches_naive() {
    let a = randn(&[2, 3, 4], 50);
    let b = randn(&[2, 5, 4], 51);
    let out = eval(|t| {
        let av = t.constant(a.clone())?;
        let bv = t.constant(b.clone())?;
        t.bmm(av, bv, true)
    });
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let expect: f64 = (0..4)
                    .map(|k| a.data()[bi * 12 + i * 4 + k] * b.data()[bi * 20 + j * 4 + k])
                    .sum();
                assert!((out.data()[bi * 15 + i * 5 + j] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn structural_ops_gradients() {
    let x0 = randn(&[3, 4, 2], 60);
    let cases: Vec<(&str, Box<dyn Fn(&mut Tape<'_>, Var) -> Result<Var>>)> = vec![
        ("permute", Box::new(|t, x| { let y = t.permute(x, &[2, 0, 1])?; weighted(t, y, 61) })),
        ("reshape", Box::new(|t, x| { let y = t.reshape(x, &[12, 2])?; weighted(t, y, 62) })),
        ("narrow", Box::new(|t, x| { let y = t.narrow(x, 1, 1, 2)?; weighted(t, y, 63) })),
        (
            "concat",
            Box::new(|t, x| {
                let y = t.concat(&[x, x], 1)?;
                weighted(t, y, 64)
            }),
        ),
        (
            "gather",
            Box::new(|t, x| {
                let idx: Vec<usize> = (0..24).map(|i| (i * 7) % 24).chain([0, 0, 5]).collect();
                let y = t.gather(x, Arc::new(idx), &[27])?;
                weighted(t, y, 65)
            }),
        ),
        (
            "split",
            Box::new(|t, x| {
                let parts = t.split(x, 2, &[1, 1])?;
                let y = t.mul(parts[0], parts[1])?;
                t.sum(y)
            }),
        ),
    ];
    for (name, f) in cases {
        let err = grad_check(|t, x| f(t, x), &x0, EPS).unwrap();
        assert!(err < OP_TOL, "{name}: {err}");
    }
}

#[test]
fn permute_matches_manual_transpose() {
    let x = randn(&[2, 3], 70);
    let out = eval(|t| {
        let v = t.constant(x.clone())?;
        t.permute(v, &[1, 0])
    });
    assert_eq!(out.shape(), &[3, 2]);
    for i in 0..2 {
        for j in 0..3 {
            assert_eq!(out.data()[j * 2 + i], x.data()[i * 3 + j]);
        }
    }
}

#[test]
fn magnitude_and_l1() {
    let field = Tensor::from_fn(&[2, 3, 3], |i| if i < 9 { 3.0 } else { 4.0 });
    let out = eval(|t| {
        let v = t.constant(field.clone())?;
        t.two_channel_magnitude(v, MAGNITUDE_EPS)
    });
    assert_eq!(out.shape(), &[3, 3]);
    assert!(out.data().iter().all(|&m| (m - 5.0).abs() < 1e-9));

    let x = randn(&[4, 4], 80);
    let l = eval(|t| {
        let a = t.constant(x.clone())?;
        let b = t.constant(x.clone())?;
        t.l1_loss(a, b)
    });
    assert_eq!(l.item().unwrap(), 0.0);

    let err = grad_check(
        |t, x| {
            let m = t.two_channel_magnitude(x, MAGNITUDE_EPS)?;
            weighted(t, m, 81)
        },
        &randn(&[2, 4, 4], 82),
        EPS,
    )
    .unwrap();
    assert!(err < OP_TOL, "magnitude {err}");

    // no residual within eps of zero, so the subgradient is exact
    let target = randn(&[3, 5], 83);
    let x0 = target.map(|v| v + if v > 0.0 { 0.5 } else { -0.5 });
    let err = grad_check(
        |t, x| {
            let y = t.constant(target.clone())?;
            t.l1_loss(x, y)
        },
        &x0,
        EPS,
    )
    .unwrap();
    assert!(err < OP_TOL, "l1 {err}");
}

#[test]
fn l1_subgradient_is_zero_at_ties() {
    let x = randn(&[3], 84);
    let mut store = ParamStore::new();
    let id = store.add("x", x.clone()).unwrap();
    let mut t = Tape::new(&store);
    let a = t.param(id);
    let b = t.constant(x).unwrap();
    let l = t.l1_loss(a, b).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.get(id).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gelu_at_zero() {
    let out = eval(|t| {
        let z = t.constant(Tensor::zeros(&[1]))?;
        t.gelu(z)
    });
    assert_eq!(out.data()[0], 0.0);
}

#[test]
fn softmax_matmul_composite() {
    let w = randn(&[4, 6], 90);
    let err = grad_check(
        |t, x| {
            let wv = t.constant(w.clone())?;
            let y = t.matmul(x, wv)?;
            let s = t.softmax_rows(y)?;
            weighted(t, s, 91)
        },
        &randn(&[3, 4], 92),
        EPS,
    )
    .unwrap();
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn backward_semantics() {
    let mut store = ParamStore::new();
    let p = store.add("p", randn(&[2, 3], 100)).unwrap();
    let q = store.add("q", randn(&[4], 101)).unwrap();

    let mut t = Tape::new(&store);
    let pv = t.param(p);
    let s = t.sum(pv).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(p).data().iter().all(|&v| v == 1.0));
    // q is disconnected from the loss
    assert!(g.get(q).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.get(q).shape(), &[4]);
    // a second backward without reset is refused
    assert!(t.backward(s).is_err());

    t.reset();
    let c = t.constant(Tensor::scalar(3.0)).unwrap();
    let g = t.backward(c).unwrap();
    assert!(g.get(p).data().iter().all(|&v| v == 0.0));

    t.reset();
    let pv = t.param(p);
    assert!(t.backward(pv).is_err(), "non-scalar loss");
}

#[test]
fn parameter_used_twice_accumulates() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::full(&[3], 2.0)).unwrap();
    let mut t = Tape::new(&store);
    let a = t.param(p);
    let b = t.param(p);
    assert_eq!(a, b);
    let y = t.mul(a, b).unwrap();
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(p).data().iter().all(|&v| (v - 4.0).abs() < 1e-15));
}

#[test]
fn non_finite_outputs_are_rejected() {
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let x = t.constant(Tensor::full(&[2], 1e200)).unwrap();
    let y = t.mul(x, x);
    assert!(matches!(y, Err(crate::Error::NonFinite(_))));
}

#[test]
fn replay_is_bit_identical() {
    let mut store = ParamStore::new();
    let w = store.add("w", randn(&[5, 5], 110)).unwrap();
    let run = || {
        let mut t = Tape::new(&store);
        let x = t.constant(randn(&[3, 5], 111)).unwrap();
        let wv = t.param(w);
        let y = t.matmul(x, wv).unwrap();
        let y = t.softmax_rows(y).unwrap();
        let l = t.sum(y).unwrap();
        let l2 = t.mul(l, l).unwrap();
        let loss = t.value(l2).item().unwrap();
        let g = t.backward(l2).unwrap();
        (loss.to_bits(), g.get(w).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

struct Cube;

impl CustomOp for Cube {
    fn name(&self) -> &str {
        "cube"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| v * v * v))
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(x, g)| 3.0 * x * x * g)
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), g)?)])
    }
}

#[test]
fn custom_op_participates() {
    let err = grad_check(
        |t, x| {
            let y = t.custom(Arc::new(Cube), &[x])?;
            weighted(t, y, 120)
        },
        &randn(&[3, 3], 121),
        EPS,
    )
    .unwrap();
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn param_checker_agrees_on_small_model() {
    let mut store = ParamStore::new();
    let w = store.add("w", randn(&[4, 3], 130)).unwrap();
    let b = store.add("b", randn(&[3], 131)).unwrap();
    let x = randn(&[5, 4], 132);
    let checks = check_param_gradients(
        &store,
        |t| {
            let xv = t.constant(x.clone())?;
            let (wv, bv) = (t.param(w), t.param(b));
            let y = t.affine(xv, wv, Some(bv))?;
            let y = t.gelu(y)?;
            let z = t.mul(y, y)?;
            t.sum(z)
        },
        &[w, b],
        3,
        1e-5,
        7,
    )
    .unwrap();
    assert_eq!(checks.len(), 2 * 4);
    for c in checks {
        assert!(c.rel_err(1e-8) < 1e-6, "{c:?}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let out = eval(|t| {
            let a = t.constant(Tensor::new(vec![3, 4], vals.clone())?)?;
            t.softmax_rows(a)
        });
        for row in out.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn permutation_roundtrip(seed in 0u64..1000) {
        let x = randn(&[2, 3, 4], seed);
        let out = eval(|t| {
            let v = t.constant(x.clone())?;
            let p = t.permute(v, &[1, 2, 0])?;
            t.permute(p, &[2, 0, 1])
        });
        prop_assert_eq!(out, x);
    }
}
