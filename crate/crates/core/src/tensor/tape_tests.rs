use super::gradcheck::{check_gradients, project, random_tensor};
use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn conv_identity_kernel() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
    let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = tape.conv2d(x, w, Some(b), 1).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[1, 1, 4, 4], 1.0));
}

#[test]
fn conv_two_by_two_stride_two_sums_block() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = tape.conv2d(x, w, None, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).item(), 10.0);
}

#[test]
fn transposed_conv_expands_single_pixel() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
    let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = tape.conv_transpose2d(x, w, None, 2).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[1, 1, 2, 2], 2.0));

    let x = tape.constant(random_tensor(&[1, 3, 4, 4], 1));
    let w = tape.constant(random_tensor(&[3, 5, 3, 3], 2));
    let y = tape.conv_transpose2d(x, w, None, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 5, 8, 8]);
}

#[test]
fn stride_two_round_trips_every_even_shape() {
    for h in (2..=32).step_by(2) {
        for w in (2..=32).step_by(2) {
            for k in [3, 5] {
                let mut tape = Tape::<f64>::new();
                let x = tape.constant(Tensor::zeros(&[1, 1, h, w]));
                let wd = tape.constant(Tensor::zeros(&[2, 1, k, k]));
                let wu = tape.constant(Tensor::zeros(&[2, 1, k, k]));
                let d = tape.conv2d(x, wd, None, 2).unwrap();
                assert_eq!(tape.shape(d), &[1, 2, h / 2, w / 2]);
                let u = tape.conv_transpose2d(d, wu, None, 2).unwrap();
                assert_eq!(tape.shape(u), &[1, 1, h, w]);
            }
        }
    }
}

#[test]
fn stride_two_rejects_odd_extent() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 5, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(tape.conv2d(x, w, None, 2), Err(Error::Shape { .. })));
    let w = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    assert!(matches!(tape.conv2d(x, w, None, 1), Err(Error::Shape { .. })));
}

#[test]
fn conv_weight_gradient_is_tight() {
    for seed in 0..5 {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", random_tensor(&[3, 2, 3, 3], seed), Constraint::None);
        let x = random_tensor(&[1, 2, 6, 6], seed + 50);
        let err = check_gradients(&store, |tape, p| {
            let xv = tape.constant(x.clone());
            let y = tape.conv2d(xv, p.get(w), None, 1)?;
            tape.sum(y)
        });
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn sigmoid_and_tanh_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[0.0, 0.5]));
    let s = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(s).data()[0], 0.5);
    assert!((tape.value(s).data()[1] - 0.6224593312018546).abs() < 1e-15);

    let z = tape.leaf(Tensor::scalar(0.0));
    let th = tape.tanh(z).unwrap();
    let g = tape.backward(th).unwrap();
    assert_eq!(g.get(z).item(), 1.0);
}

#[test]
fn backward_of_sum_and_sum_of_squares() {
    let xt = random_tensor(&[2, 3], 4);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(xt.clone());
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(xt.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    for (gv, xv) in g.get(x).data().iter().zip(xt.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn unreachable_leaf_has_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(random_tensor(&[3], 1));
    let b = tape.leaf(random_tensor(&[3], 2));
    let _unused = tape.exp(b).unwrap();
    let l = tape.sum(a).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(b).data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(random_tensor(&[3], 1));
    assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
    let l = tape.sum(a).unwrap();
    tape.backward(l).unwrap();
    assert!(matches!(tape.backward(l), Err(Error::TapeConsumed)));
}

#[test]
fn domain_and_finiteness_errors() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(t(&[2], &[1.0, 0.0]));
    let o = tape.constant(t(&[2], &[1.0, 1.0]));
    assert!(matches!(tape.div(o, z), Err(Error::Domain { .. })));
    assert!(matches!(tape.log(z), Err(Error::Domain { .. })));
    assert!(matches!(tape.sqrt(z), Err(Error::Domain { .. })));
    let big = tape.constant(t(&[1], &[1000.0]));
    assert!(matches!(tape.exp(big), Err(Error::NonFinite { .. })));
    let m = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.add(o, m), Err(Error::Shape { .. })));
    let s = tape.constant(Tensor::scalar(2.0));
    let r = tape.mul(o, s).unwrap();
    assert_eq!(tape.value(r).data(), &[2.0, 2.0]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(random_tensor(&[2, 3, 8, 8], 1).cast());
        let w = tape.constant(random_tensor(&[4, 3, 5, 5], 2).cast());
        let y = tape.conv2d(x, w, None, 2).unwrap();
        let w2 = tape.constant(random_tensor(&[4, 3, 5, 5], 3).cast());
        let z = tape.conv_transpose2d(y, w2, None, 2).unwrap();
        tape.value(z).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.digest(), b.digest());
    assert_eq!(a, b);
}

#[test]
fn zero_flow_warp_is_identity() {
    let mut tape = Tape::<f64>::new();
    let f = tape.constant(random_tensor(&[2, 3, 5, 7], 3));
    let flow = tape.constant(Tensor::zeros(&[2, 2, 5, 7]));
    let w = tape.warp(f, flow).unwrap();
    assert_eq!(tape.value(w), tape.value(f));

    let mut tape = Tape::<f32>::new();
    let f = tape.constant(random_tensor(&[1, 1, 4, 4], 3).cast());
    let flow = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.warp(f, flow).unwrap();
    assert_eq!(tape.value(w), tape.value(f));
}

#[test]
fn unit_flow_shifts_ramp() {
    let (h, w) = (5, 8);
    let ramp: Vec<f64> = (0..h * w).map(|i| (i % w) as f64).collect();
    let mut flow = vec![0.0; 2 * h * w];
    flow[..h * w].fill(1.0);
    let mut tape = Tape::<f64>::new();
    let f = tape.constant(t(&[1, 1, h, w], &ramp));
    let fl = tape.constant(t(&[1, 2, h, w], &flow));
    let out = tape.warp(f, fl).unwrap();
    for y in 0..h {
        for x in 0..w - 1 {
            assert_eq!(tape.value(out).data()[y * w + x], x as f64 + 1.0);
        }
    }
}

fn leaf_store(shapes: &[(&str, Vec<usize>)], seed: u64) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, (n, sh))| s.add(*n, random_tensor(sh, seed * 31 + i as u64), Constraint::None))
        .collect();
    (s, ids)
}

const SEEDS: u64 = 20;

#[test]
fn conv_gradients_over_seeds() {
    for seed in 0..SEEDS {
        let k = [1, 3, 5][seed as usize % 3];
        let stride = 1 + (seed as usize % 2);
        let (store, ids) = leaf_store(&[("x", vec![2, 2, 6, 6]), ("w", vec![3, 2, k, k]), ("b", vec![3])], seed);
        let err = check_gradients(&store, |tape, p| {
            let y = tape.conv2d(p.get(ids[0]), p.get(ids[1]), Some(p.get(ids[2])), stride)?;
            project(tape, y, seed)
        });
        assert!(err < 1e-4, "seed {seed} k {k} s {stride}: {err}");
    }
}

#[test]
fn transposed_conv_gradients_over_seeds() {
    for seed in 0..SEEDS {
        let k = [3, 5, 2][seed as usize % 3];
        let (store, ids) = leaf_store(&[("x", vec![2, 3, 3, 3]), ("w", vec![3, 2, k, k]), ("b", vec![2])], seed);
        let err = check_gradients(&store, |tape, p| {
            let y = tape.conv_transpose2d(p.get(ids[0]), p.get(ids[1]), Some(p.get(ids[2])), 2)?;
            project(tape, y, seed)
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn elementwise_gradients_over_seeds() {
    for seed in 0..SEEDS {
        let (store, ids) = leaf_store(&[("a", vec![1, 2, 3, 3]), ("b", vec![1, 2, 3, 3])], seed);
        let err = check_gradients(&store, |tape, p| {
            let (a, b) = (p.get(ids[0]), p.get(ids[1]));
            let s = tape.add(a, b)?;
            let d = tape.sub(a, b)?;
            let m = tape.mul(s, d)?;
            let e = tape.exp(b)?;
            let q = tape.div(m, e)?;
            let sq = tape.square(a)?;
            let pos = tape.add_scalar(sq, 0.5)?;
            let l = tape.log(pos)?;
            let r = tape.sqrt(pos)?;
            let pw = tape.pow(pos, 0.37)?;
            let th = tape.tanh(q)?;
            let sg = tape.sigmoid(b)?;
            let sp = tape.softplus(a)?;
            let ng = tape.neg(sp)?;
            let ms = tape.mul_scalar(th, 1.7)?;
            let terms = [l, r, pw, ms, sg, ng];
            let mut acc = q;
            for t in terms {
                acc = tape.add(acc, t)?;
            }
            let c = tape.clamp(acc, -3.0, 3.0)?;
            let rl = tape.relu(c)?;
            let mean = tape.mean(rl)?;
            let proj = project(tape, c, seed)?;
            tape.add(mean, proj)
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn shape_op_gradients_over_seeds() {
    for seed in 0..SEEDS {
        let (store, ids) = leaf_store(&[("a", vec![2, 2, 4, 4]), ("b", vec![2, 1, 4, 4]), ("c", vec![3])], seed);
        let err = check_gradients(&store, |tape, p| {
            let cat = tape.concat(&[p.get(ids[0]), p.get(ids[1])])?;
            let pooled = tape.avg_pool2(cat)?;
            let up = tape.upsample2x(pooled)?;
            let sl = tape.slice_channels(up, 1, 2)?;
            let r = tape.reshape(sl, &[2, 2, 2, 8])?;
            let r = tape.reshape(r, &[2, 2, 4, 4])?;
            let e = tape.expand_channels(p.get(ids[2]), 2, 4, 4)?;
            let mixed = tape.mul(cat, e)?;
            let a = project(tape, r, seed)?;
            let b = project(tape, mixed, seed + 1)?;
            tape.add(a, b)
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn mse_gradient() {
    for seed in 0..SEEDS {
        let (store, ids) = leaf_store(&[("a", vec![1, 1, 4, 4]), ("b", vec![1, 1, 4, 4])], seed);
        let err = check_gradients(&store, |tape, p| tape.mse(p.get(ids[0]), p.get(ids[1])));
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn warp_gradients_over_seeds() {
    for seed in 0..SEEDS {
        let mut store = ParamStore::<f64>::new();
        let frame = store.add("frame", random_tensor(&[1, 2, 6, 6], seed), Constraint::None);
        let flow = store.add("flow", random_tensor(&[1, 2, 6, 6], seed + 99).map(|v| v * 2.3), Constraint::None);
        let err = check_gradients(&store, |tape, p| {
            let w = tape.warp(p.get(frame), p.get(flow))?;
            project(tape, w, seed)
        });
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn gdn_gradients_over_seeds() {
    for seed in 0..SEEDS {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", random_tensor(&[2, 3, 3, 3], seed), Constraint::None);
        let beta = store.add("beta", random_tensor(&[3], seed + 1).map(|v| v.abs() + 0.2), Constraint::None);
        let gamma = store.add("gamma", random_tensor(&[3, 3], seed + 2).map(|v| v.abs()), Constraint::None);
        let inverse = seed % 2 == 1;
        let err = check_gradients(&store, |tape, p| {
            let y = tape.gdn(p.get(x), p.get(beta), p.get(gamma), inverse)?;
            project(tape, y, seed)
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn logistic_bits_gradients_over_seeds() {
    for seed in 0..SEEDS {
        let mut store = ParamStore::<f64>::new();
        // noisy latents, as during training
        let y = store.add("y", random_tensor(&[1, 2, 3, 3], seed).map(|v| v * 6.0), Constraint::None);
        let mu = store.add("mu", random_tensor(&[1, 2, 3, 3], seed + 1).map(|v| v * 4.0), Constraint::None);
        let s = store.add("s", random_tensor(&[1, 2, 3, 3], seed + 2).map(|v| v.abs() * 3.0 + 0.05), Constraint::None);
        let err = check_gradients(&store, |tape, p| {
            let b = tape.logistic_bits(p.get(y), p.get(mu), p.get(s), 64)?;
            tape.sum(b)
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}
