use proptest::prelude::*;
use stpl_oracles::CaseRng;

use super::*;
use crate::error::{Error, Result};

fn rand_tensor(rng: &mut CaseRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.vec(n, lo, hi)).unwrap()
}

/// `sum(y * r)` for a fixed random `r`, so every output element gets a
/// distinct upstream gradient.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = CaseRng::new(seed);
    let r = t.input(rand_tensor(&mut rng, t.shape(y), -1.0, 1.0));
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

#[test]
fn sum_gradient_is_ones() {
    let mut store = ParamStore::<f64>::new();
    let id = store.push("x", Tensor::from_fn([2, 3], |i| i as f64));
    let mut t = Tape::new();
    let x = t.param(&store, id);
    let s = t.sum(x);
    t.backward(s, &mut store).unwrap();
    assert!(store.get(id).grad().data().iter().all(|&g| g == 1.0));
}

#[test]
fn square_gradient_is_twice_input() {
    let mut store = ParamStore::<f64>::new();
    let id = store.push("x", Tensor::new([4], vec![-2.0, 0.0, 0.5, 3.0]).unwrap());
    let mut t = Tape::new();
    let x = t.param(&store, id);
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    t.backward(s, &mut store).unwrap();
    assert_eq!(store.get(id).grad().data(), &[-4.0, 0.0, 1.0, 6.0]);
}

#[test]
fn softmax_matches_explicit_jacobian() {
    let tau = 0.5;
    let xs = [0.3, -1.2, 0.8, 0.1];
    let ws = [1.0, -2.0, 0.5, 3.0];
    let mut store = ParamStore::<f64>::new();
    let id = store.push("x", Tensor::new([1, 4], xs.to_vec()).unwrap());
    let mut t = Tape::new();
    let x = t.param(&store, id);
    let y = t.softmax(x, &[1], tau).unwrap();
    let w = t.input(Tensor::new([1, 4], ws.to_vec()).unwrap());
    let p = t.mul(y, w).unwrap();
    let s = t.sum(p);
    t.backward(s, &mut store).unwrap();

    let z: f64 = xs.iter().map(|v| (v / tau).exp()).sum();
    let sm: Vec<f64> = xs.iter().map(|v| (v / tau).exp() / z).collect();
    for j in 0..4 {
        // d s_i / d x_j = s_i (delta_ij - s_j) / tau
        let want: f64 = (0..4)
            .map(|i| ws[i] * sm[i] * (f64::from(u8::from(i == j)) - sm[j]) / tau)
            .sum();
        assert!((store.get(id).grad().data()[j] - want).abs() < 1e-12);
    }
}

#[test]
fn shared_value_accumulates_both_paths() {
    let mut store = ParamStore::<f64>::new();
    let id = store.push("x", Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
    let mut t = Tape::new();
    let x = t.param(&store, id);
    let x2 = t.param(&store, id);
    let a = t.scale(x, 3.0);
    let b = t.add(a, x2).unwrap();
    let c = t.add(b, x).unwrap();
    let s = t.sum(c);
    t.backward(s, &mut store).unwrap();
    assert_eq!(store.get(id).grad().data(), &[5.0, 5.0, 5.0]);

    // a second recording adds on top of the first
    let mut t = Tape::new();
    let x = t.param(&store, id);
    let s = t.sum(x);
    t.backward(s, &mut store).unwrap();
    assert_eq!(store.get(id).grad().data(), &[6.0, 6.0, 6.0]);
}

#[test]
fn second_backward_is_rejected() {
    let mut store = ParamStore::<f64>::new();
    let id = store.push("x", Tensor::ones([2]));
    let mut t = Tape::new();
    let x = t.param(&store, id);
    let s = t.sum(x);
    t.backward(s, &mut store).unwrap();
    assert!(matches!(t.backward(s, &mut store), Err(AutogradError::TapeConsumed)));
    assert!(t.is_consumed());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut store = ParamStore::<f64>::new();
    let id = store.push("x", Tensor::ones([2]));
    let mut t = Tape::new();
    let x = t.param(&store, id);
    assert!(matches!(
        t.backward(x, &mut store),
        Err(AutogradError::NonScalarLoss(s)) if s == vec![2]
    ));
    assert!(!t.is_consumed());
}

#[test]
fn backward_visits_in_reverse_recording_order() {
    let mut store = ParamStore::<f64>::new();
    let id = store.push("x", Tensor::ones([2]));
    let mut t = Tape::new();
    let x = t.param(&store, id);
    let a = t.exp(x);
    let b = t.sigmoid(a);
    let s = t.sum(b);
    t.backward(s, &mut store).unwrap();
    assert_eq!(t.visited, vec![s.index(), b.index(), a.index(), x.index()]);
}

#[test]
fn inference_tape_records_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let id = store.push("x", Tensor::ones([2]));
    let mut t = Tape::inference();
    let x = t.param(&store, id);
    let e = t.exp(x);
    let s = t.sum(e);
    assert!(!t.requires_grad(s));
    t.backward(s, &mut store).unwrap();
    assert!(store.get(id).grad().data().iter().all(|&g| g == 0.0));
}

#[test]
fn zero_loss_gives_zero_gradients() {
    let mut store = ParamStore::<f64>::new();
    let id = store.push("x", Tensor::new([3], vec![0.4, -1.0, 2.0]).unwrap());
    let mut t = Tape::new();
    let x = t.param(&store, id);
    let d = t.sub(x, x).unwrap();
    let sq = t.mul(d, d).unwrap();
    let s = t.sum(sq);
    assert_eq!(t.value(s).data()[0], 0.0);
    t.backward(s, &mut store).unwrap();
    assert!(store.get(id).grad().data().iter().all(|&g| g == 0.0));
}

#[test]
fn corrupted_rule_is_caught() {
    let mut rng = CaseRng::new(11);
    let mut store = ParamStore::<f64>::new();
    store.push("x", rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0));
    let build = |t: &mut Tape<f64>, s: &ParamStore<f64>| -> Result<Var> {
        let x = t.param(s, ParamId(0));
        let y = t.silu(x);
        project(t, y, 3)
    };
    let cfg = FdConfig::default();
    let honest = gradient_check(&mut store, build, &cfg).unwrap();
    assert!(honest.passed(), "{honest}");

    // same function, analytic gradient doubled as a broken rule would produce
    store.zero_grad();
    let mut t = Tape::new();
    let l = build(&mut t, &store).unwrap();
    t.backward(l, &mut store).unwrap();
    let doubled: Vec<_> = store.grads().iter().map(|g| g.scale(2.0)).collect();
    let report = finite_difference_check(
        &mut store,
        &doubled,
        |s| {
            let mut t = Tape::inference();
            let l = build(&mut t, s).unwrap();
            t.value(l).data()[0]
        },
        &cfg,
    );
    assert!(!report.passed());
    assert!(report.max_rel_error() > 0.3, "{report}");
}

#[test]
fn non_finite_loss_is_reported() {
    let mut store = ParamStore::<f64>::new();
    store.push("x", Tensor::full([2], 800.0));
    let report = gradient_check(
        &mut store,
        |t, s| {
            let x = t.param(s, ParamId(0));
            let e = t.exp(x);
            Ok(t.sum(e))
        },
        &FdConfig::default(),
    )
    .unwrap();
    assert_eq!(report.non_finite(), 2);
    assert!(!report.passed());
}

/// One small graph per primitive. Each returns the loss and leaves the
/// primitive under test on the tape.
fn primitive_case(p: Primitive) -> (ParamStore<f64>, Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>>) {
    let mut rng = CaseRng::new(0xC0DE ^ p as u64);
    let mut s = ParamStore::new();
    let x4 = [2, 4, 5, 4];
    let build: Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>> = match p {
        Primitive::Conv2d => {
            s.push("x", rand_tensor(&mut rng, &x4, -1.0, 1.0));
            s.push("w", rand_tensor(&mut rng, &[6, 2, 3, 3], -0.5, 0.5));
            s.push("b", rand_tensor(&mut rng, &[6], -0.5, 0.5));
            Box::new(|t, s| {
                let spec = ConvSpec::new(4, 6, 3).with_groups(2).with_dilation(2).same();
                let (x, w, b) = (t.param(s, ParamId(0)), t.param(s, ParamId(1)), t.param(s, ParamId(2)));
                let y = t.conv2d(x, w, b, &spec)?;
                project(t, y, 1)
            })
        }
        Primitive::ConvTranspose2d => {
            s.push("x", rand_tensor(&mut rng, &x4, -1.0, 1.0));
            s.push("w", rand_tensor(&mut rng, &[4, 3, 4, 4], -0.5, 0.5));
            s.push("b", rand_tensor(&mut rng, &[6], -0.5, 0.5));
            Box::new(|t, s| {
                let spec = ConvSpec::new(4, 6, 4).with_stride(2).with_padding(1).with_groups(2);
                let (x, w, b) = (t.param(s, ParamId(0)), t.param(s, ParamId(1)), t.param(s, ParamId(2)));
                let y = t.conv_transpose2d(x, w, b, &spec)?;
                project(t, y, 1)
            })
        }
        Primitive::GlobalAvgPool => {
            s.push("x", rand_tensor(&mut rng, &x4, -1.0, 1.0));
            Box::new(|t, s| {
                let x = t.param(s, ParamId(0));
                let y = t.global_avg_pool(x)?;
                project(t, y, 1)
            })
        }
        Primitive::Linear => {
            s.push("x", rand_tensor(&mut rng, &[3, 5], -1.0, 1.0));
            s.push("w", rand_tensor(&mut rng, &[2, 5], -1.0, 1.0));
            s.push("b", rand_tensor(&mut rng, &[2], -1.0, 1.0));
            Box::new(|t, s| {
                let (x, w, b) = (t.param(s, ParamId(0)), t.param(s, ParamId(1)), t.param(s, ParamId(2)));
                let y = t.linear(x, w, b)?;
                project(t, y, 1)
            })
        }
        Primitive::Softmax | Primitive::LogSoftmax => {
            s.push("x", rand_tensor(&mut rng, &[2, 3, 2, 3, 2], -0.2, 0.2));
            Box::new(move |t, s| {
                let x = t.param(s, ParamId(0));
                let y = if p == Primitive::Softmax {
                    t.softmax(x, &[2, 3, 4], 0.1)?
                } else {
                    t.log_softmax(x, &[2, 3, 4], 0.1)?
                };
                project(t, y, 1)
            })
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            s.push("a", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0));
            s.push("b", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0));
            Box::new(move |t, s| {
                let (a, b) = (t.param(s, ParamId(0)), t.param(s, ParamId(1)));
                let y = match p {
                    Primitive::Add => t.add(a, b)?,
                    Primitive::Sub => t.sub(a, b)?,
                    _ => t.mul(a, b)?,
                };
                project(t, y, 1)
            })
        }
        Primitive::Scale => {
            s.push("x", rand_tensor(&mut rng, &[7], -1.0, 1.0));
            Box::new(|t, s| {
                let x = t.param(s, ParamId(0));
                let y = t.scale(x, -2.5);
                project(t, y, 1)
            })
        }
        Primitive::BroadcastMul => {
            s.push("x", rand_tensor(&mut rng, &x4, -1.0, 1.0));
            s.push("g", rand_tensor(&mut rng, &[2, 4, 1, 1], -1.0, 1.0));
            Box::new(|t, s| {
                let (x, g) = (t.param(s, ParamId(0)), t.param(s, ParamId(1)));
                let y = t.broadcast_mul(x, g)?;
                project(t, y, 1)
            })
        }
        Primitive::Reshape => {
            s.push("x", rand_tensor(&mut rng, &x4, -1.0, 1.0));
            Box::new(|t, s| {
                let x = t.param(s, ParamId(0));
                let y = t.reshape(x, [8, 20])?;
                project(t, y, 1)
            })
        }
        Primitive::Narrow => {
            s.push("x", rand_tensor(&mut rng, &x4, -1.0, 1.0));
            Box::new(|t, s| {
                let x = t.param(s, ParamId(0));
                let y = t.narrow(x, 1, 1, 2)?;
                project(t, y, 1)
            })
        }
        Primitive::GroupNorm => {
            s.push("x", rand_tensor(&mut rng, &x4, -1.0, 1.0));
            s.push("gain", rand_tensor(&mut rng, &[4], 0.5, 1.5));
            s.push("shift", rand_tensor(&mut rng, &[4], -0.5, 0.5));
            Box::new(|t, s| {
                let (x, g, b) = (t.param(s, ParamId(0)), t.param(s, ParamId(1)), t.param(s, ParamId(2)));
                let y = t.group_norm(x, g, b, 2, 1e-5)?;
                project(t, y, 1)
            })
        }
        Primitive::Silu | Primitive::Sigmoid | Primitive::Exp => {
            s.push("x", rand_tensor(&mut rng, &[9], -2.0, 2.0));
            Box::new(move |t, s| {
                let x = t.param(s, ParamId(0));
                let y = match p {
                    Primitive::Silu => t.silu(x),
                    Primitive::Sigmoid => t.sigmoid(x),
                    _ => t.exp(x),
                };
                project(t, y, 1)
            })
        }
        Primitive::Sum | Primitive::Mean => {
            s.push("x", rand_tensor(&mut rng, &[3, 3], -1.0, 1.0));
            Box::new(move |t, s| {
                let x = t.param(s, ParamId(0));
                let sq = t.mul(x, x)?;
                Ok(if p == Primitive::Sum { t.sum(sq) } else { t.mean(sq) })
            })
        }
    };
    (s, build)
}

#[test]
fn every_primitive_has_a_verified_backward_rule() {
    let cfg = FdConfig::default();
    for p in Primitive::ALL {
        let (mut store, build) = primitive_case(p);
        let mut t = Tape::new();
        build(&mut t, &store).unwrap();
        assert!(t.primitives().contains(&p), "{p:?} case does not exercise {p:?}");
        // temperature 0.1 magnifies the logit perturbation tenfold, so the
        // step shrinks by the same factor to keep truncation error comparable
        let cfg = match p {
            Primitive::Softmax | Primitive::LogSoftmax => FdConfig { step: 1e-4, ..cfg.clone() },
            _ => cfg.clone(),
        };
        let report = gradient_check(&mut store, &build, &cfg).unwrap();
        assert!(report.passed(), "{p:?}: {report}");
    }
}

#[test]
fn gradient_check_propagates_build_errors() {
    let mut store = ParamStore::<f64>::new();
    store.push("x", Tensor::ones([2, 3]));
    let r = gradient_check(
        &mut store,
        |t, s| {
            let x = t.param(s, ParamId(0));
            Ok(t.reshape(x, [5])?)
        },
        &FdConfig::default(),
    );
    assert!(matches!(r, Err(Error::Tensor(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradients_are_linear_in_the_loss(
        seed in any::<u64>(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let mut rng = CaseRng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let id = store.push("x", rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0));
        let l1 = |t: &mut Tape<f64>, x: Var| -> Var { let e = t.silu(x); t.sum(e) };
        let l2 = |t: &mut Tape<f64>, x: Var| -> Var { let e = t.sigmoid(x); let q = t.mul(e, e).unwrap(); t.mean(q) };

        let grad_of = |store: &mut ParamStore<f64>, f: &dyn Fn(&mut Tape<f64>, Var) -> Var| {
            store.zero_grad();
            let mut t = Tape::new();
            let x = t.param(store, id);
            let l = f(&mut t, x);
            t.backward(l, store).unwrap();
            store.get(id).grad().clone()
        };
        let g1 = grad_of(&mut store, &l1);
        let g2 = grad_of(&mut store, &l2);
        let gc = grad_of(&mut store, &|t, x| {
            let u = l1(t, x);
            let v = l2(t, x);
            let su = t.scale(u, a);
            let sv = t.scale(v, b);
            t.add(su, sv).unwrap()
        });
        for ((c, x), y) in gc.data().iter().zip(g1.data()).zip(g2.data()) {
            prop_assert!((c - (a * x + b * y)).abs() < 1e-12);
        }
    }
}
