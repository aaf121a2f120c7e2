use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn add_and_tanh_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let c = t.forward_op("add", &[a, b]).unwrap();
    assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    let z = t.constant(Tensor::vector(vec![0.0]));
    let th = t.forward_op("tanh", &[z]).unwrap();
    assert_eq!(t.value(th).data(), &[0.0]);
}

#[test]
fn identity_spmm_is_noop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::new();
    let x = t.constant(random(&mut rng, &[3, 2]));
    let y = t.spmm(&Arc::new(SparseMatrix::identity(3)), x).unwrap();
    assert_eq!(t.value(x), t.value(y));
}

#[test]
fn shape_mismatch_and_unknown_op() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    match t.forward_op("add", &[a, b]) {
        Err(Error::Contract { op, detail }) => {
            assert_eq!(op, "add");
            assert!(detail.contains("[2]") && detail.contains("[3]"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(t.forward_op("softmax", &[a]), Err(Error::UnsupportedOp(_))));
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![0.5, -1.0, 2.0]));
    let s = t.sum(x).unwrap();
    assert_eq!(t.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![2.0]));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    assert_eq!(t.backward(s).unwrap().get(x).unwrap().data(), &[4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(Error::Contract { .. })));
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    let y = t.param(Tensor::vector(vec![3.0]));
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(y).is_none());
    assert_eq!(g.get_or_zeros(&t, y).data(), &[0.0]);
}

#[test]
fn mean_relu_matmul_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = random(&mut rng, &[4, 3]);
    let x = random(&mut rng, &[3, 2]);
    let err = grad_check_many(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let r = t.relu(y)?;
            t.mean(r)
        },
        &[w, x],
        1e-5,
        None,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_examples() {
    let x = Tensor::vector(vec![0.3, -0.7, 1.1]);
    assert!(grad_check(|t, v| t.sum(v), &x, 1e-5).unwrap() <= 1e-9);
    let x = Tensor::vector(vec![0.3, -0.7]);
    let err = grad_check(
        |t, v| {
            let y = t.tanh(v)?;
            t.sum(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

/// Weighted sum so every output coordinate receives a distinct cotangent.
fn probe(t: &mut Tape, y: Var, seed: u64) -> Result<Var, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let w = t.constant(random(&mut rng, &shape));
    let p = t.mul(y, w)?;
    t.sum(p)
}

#[test]
fn every_registered_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sparse = Arc::new(
        SparseMatrix::from_triplets(3, 4, [(0, 1, 0.5), (1, 0, -1.0), (2, 3, 2.0), (2, 2, 0.25)]).unwrap(),
    );
    let idx = Arc::new(vec![0usize, 3, 3, 5, 1, 2]);
    let m34 = random(&mut rng, &[3, 4]);
    let m43 = random(&mut rng, &[4, 3]);
    let m42 = random(&mut rng, &[4, 2]);
    let v4 = random(&mut rng, &[4]);
    let pos = Tensor::vector((0..6).map(|i| 0.3 + 0.2 * i as f64).collect());
    let img = random(&mut rng, &[2, 4, 4]);
    let ker = random(&mut rng, &[3, 2, 3, 3]);
    let g3 = random(&mut rng, &[3, 4, 4]);

    type Case<'a> = (&'a str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, Error>>);
    let cases: Vec<Case> = vec![
        ("add", vec![m34.clone(), m34.map(|v| v * 0.5)], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![m34.clone(), m34.map(|v| v * 0.3)], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![m34.clone(), m34.map(|v| v + 1.0)], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![m34.clone()], Box::new(|t, v| Ok(t.scale(v[0], -2.5)))),
        ("pow", vec![pos.clone()], Box::new(|t, v| Ok(t.pow(v[0], 1.7)))),
        ("sqrt", vec![pos.clone()], Box::new(|t, v| Ok(t.sqrt(v[0])))),
        ("tanh", vec![m34.clone()], Box::new(|t, v| t.tanh(v[0]))),
        ("relu", vec![m34.clone()], Box::new(|t, v| t.relu(v[0]))),
        ("sin", vec![m34.clone()], Box::new(|t, v| t.sin(v[0]))),
        ("cos", vec![m34.clone()], Box::new(|t, v| t.cos(v[0]))),
        ("clamp", vec![m34.clone()], Box::new(|t, v| t.clamp(v[0], -0.5, 0.5))),
        ("matmul", vec![m34.clone(), m42.clone()], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![m34.clone()], Box::new(|t, v| t.transpose(v[0]))),
        ("spmm", vec![m42.clone()], {
            let s = Arc::clone(&sparse);
            Box::new(move |t, v| t.spmm(&s, v[0]))
        }),
        ("spmm_t", vec![m34.map(|v| v * 2.0).reshaped(&[3, 4]).unwrap()], {
            let s = Arc::clone(&sparse);
            Box::new(move |t, v| t.spmm_transposed(&s, v[0]))
        }),
        ("reshape", vec![m34.clone()], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        ("slice_cols", vec![m34.clone()], Box::new(|t, v| t.slice_cols(v[0], 1, 3))),
        ("pad_cols", vec![m34.clone()], Box::new(|t, v| t.pad_cols(v[0], 2, 7))),
        ("concat", vec![m43.clone(), m42.clone()], Box::new(|t, v| t.concat_cols(v[0], v[1]))),
        ("sum", vec![m34.clone()], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![m34.clone()], Box::new(|t, v| t.mean(v[0]))),
        ("l2_norm", vec![m34.clone()], Box::new(|t, v| t.l2_norm(v[0]))),
        ("broadcast", vec![Tensor::scalar(0.7)], Box::new(|t, v| t.broadcast(v[0], &[2, 3]))),
        ("sum_rows", vec![m34.clone()], Box::new(|t, v| t.sum_rows(v[0]))),
        ("broadcast_rows", vec![v4.clone()], Box::new(|t, v| t.broadcast_rows(v[0], 3))),
        ("sum_cols", vec![m34.clone()], Box::new(|t, v| t.sum_cols(v[0]))),
        ("broadcast_cols", vec![v4.clone()], Box::new(|t, v| t.broadcast_cols(v[0], 3))),
        ("gather", vec![m34.clone()], {
            let i = Arc::clone(&idx);
            Box::new(move |t, v| t.gather(v[0], &i, &[2, 3]))
        }),
        ("scatter_add", vec![random(&mut rng, &[6])], {
            let i = Arc::clone(&idx);
            Box::new(move |t, v| t.scatter_add(v[0], &i, &[2, 3]))
        }),
        ("conv2d", vec![img.clone(), ker.clone()], Box::new(|t, v| t.conv2d(v[0], v[1]))),
        ("conv2d_input_grad", vec![g3.clone(), ker.clone()], Box::new(|t, v| t.conv2d_input_grad(v[0], v[1]))),
        ("conv2d_weight_grad", vec![img.clone(), g3.clone()], Box::new(|t, v| t.conv2d_weight_grad(v[0], v[1], 3))),
        ("max_pool2", vec![img.clone()], Box::new(|t, v| t.max_pool2(v[0]))),
        ("biased_relu", vec![m34.clone(), v4.clone()], Box::new(|t, v| t.biased_relu(v[0], v[1]))),
        ("normalize_rows", vec![m34.clone()], Box::new(|t, v| t.normalize_rows(v[0]))),
    ];
    for (k, (name, inputs, f)) in cases.into_iter().enumerate() {
        let err = grad_check_many(
            |t, v| {
                let y = f(t, v)?;
                probe(t, y, 100 + k as u64)
            },
            &inputs,
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-5, "{name}: {err}");
    }
}

#[test]
fn recording_does_not_change_forward_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(&mut rng, &[5, 4]);
    let x = random(&mut rng, &[4, 3]);
    let run = |t: &mut Tape| {
        let wv = t.param(w.clone());
        let xv = t.param(x.clone());
        let y = t.matmul(wv, xv).unwrap();
        let y = t.tanh(y).unwrap();
        let y = t.relu(y).unwrap();
        t.value(y).clone()
    };
    let recorded = {
        let mut t = Tape::new();
        run(&mut t)
    };
    let plain = run(&mut Tape::no_grad());
    assert_eq!(recorded.data(), plain.data());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = random(&mut rng, &[6]);
    let l1 = |t: &mut Tape, x: Var| {
        let y = t.tanh(x).unwrap();
        t.sum(y).unwrap()
    };
    let l2 = |t: &mut Tape, x: Var| {
        let y = t.mul(x, x).unwrap();
        let y = t.sin(y).unwrap();
        t.sum(y).unwrap()
    };
    let grad = |which: u8| {
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let loss = match which {
            1 => l1(&mut t, x),
            2 => l2(&mut t, x),
            _ => {
                let a = l1(&mut t, x);
                let b = l2(&mut t, x);
                t.add(a, b).unwrap()
            }
        };
        t.backward(loss).unwrap().get(x).unwrap().clone()
    };
    let (g1, g2, g12) = (grad(1), grad(2), grad(3));
    for i in 0..6 {
        assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() < 1e-14);
    }
}

/// d/dw of ||d(conv(x, w) pooled, summed)/dx||^2 versus finite differences
/// of the first-order gradient norm.
#[test]
fn second_order_through_conv_and_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[1, 4, 4]);
    let w = random(&mut rng, &[2, 1, 3, 3]);
    let penalty = |t: &mut Tape, xv: Var, wv: Var, graph: bool| -> Result<Var, Error> {
        let y = t.conv2d(xv, wv)?;
        let y = t.tanh(y)?;
        let y = t.max_pool2(y)?;
        let s = t.sum(y)?;
        let g = t.grad(s, &[xv], graph)?[0];
        let n = t.l2_norm(g)?;
        let d = t.add_scalar(n, -1.0);
        t.mul(d, d)
    };
    let mut t = Tape::new();
    let xv = t.param(x.clone());
    let wv = t.param(w.clone());
    let p = penalty(&mut t, xv, wv, true).unwrap();
    let analytic = t.backward(p).unwrap().get(wv).unwrap().clone();
    let eval = |wt: &Tensor| {
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let wv = t.constant(wt.clone());
        let p = penalty(&mut t, xv, wv, false).unwrap();
        t.value(p).item()
    };
    let h = 1e-5;
    for i in 0..w.numel() {
        let mut wp = w.clone();
        wp.data_mut()[i] += h;
        let mut wm = w.clone();
        wm.data_mut()[i] -= h;
        let numeric = (eval(&wp) - eval(&wm)) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        assert!(err < 1e-5, "coordinate {i}: {} vs {numeric}", analytic.data()[i]);
    }
}

#[test]
fn max_pool_ties_route_to_first_element() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
    let y = t.max_pool2(x).unwrap();
    let s = t.sum(y).unwrap();
    assert_eq!(t.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![0.0, 1.0]));
    let y = t.relu(x).unwrap();
    let s = t.sum(y).unwrap();
    assert_eq!(t.backward(s).unwrap().get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn injected_fault_breaks_the_gradient_check() {
    let a = Arc::new(SparseMatrix::from_triplets(2, 2, [(0, 1, 1.0), (1, 0, 1.0)]).unwrap());
    let x = Tensor::matrix(2, 1, vec![0.2, -0.4]).unwrap();
    let f = |t: &mut Tape, v: &[Var]| {
        let y = t.spmm(&a, v[0])?;
        probe(t, y, 1)
    };
    assert!(grad_check_many(f, std::slice::from_ref(&x), 1e-5, None).unwrap() < 1e-8);
    let fault = VjpFault {
        op: "spmm".into(),
        factor: 1.1,
    };
    assert!(grad_check_many(f, &[x], 1e-5, Some(fault)).unwrap() > 1e-3);
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn matmul_gradient_matches_finite_differences(
            a in proptest::collection::vec(-2.0f64..2.0, 6),
            b in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            let a = Tensor::matrix(2, 3, a).unwrap();
            let b = Tensor::matrix(3, 2, b).unwrap();
            let err = grad_check_many(
                |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    let y = t.tanh(y)?;
                    t.sum(y)
                },
                &[a, b],
                1e-5,
                None,
            ).unwrap();
            prop_assert!(err < 1e-5);
        }
    }
}
