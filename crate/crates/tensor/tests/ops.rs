use medconv_tensor::{
    grad_check, grad_check_many, Conv3dGeometry, NormMode, RunningStats, Tape, Tensor, TensorError, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values with |x| in [0.2, 1.0] so ReLU kinks sit far from any probe.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// reaches the scalar with a distinct sensitivity.
fn weighted_sum(tape: &mut Tape<f64>, v: Var) -> medconv_tensor::Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::from_vec(&shape, (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect())?;
    let w = tape.constant(w);
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

fn conv(tape: &mut Tape<f64>, x: &Tensor<f64>, k: &Tensor<f64>, geom: Conv3dGeometry) -> Tensor<f64> {
    let x = tape.constant(x.clone());
    let k = tape.constant(k.clone());
    let y = tape.conv3d(x, k, None, geom).unwrap();
    tape.value(y).clone()
}

// ---------------------------------------------------------------- conv3d

#[test]
fn conv3d_sum_of_ones() {
    let mut tape = Tape::new();
    let out = conv(
        &mut tape,
        &Tensor::ones(&[1, 1, 3, 3, 3]).unwrap(),
        &Tensor::ones(&[1, 1, 3, 3, 3]).unwrap(),
        Conv3dGeometry::uniform(1, 0),
    );
    assert_eq!(out.shape(), &[1, 1, 1, 1, 1]);
    assert_eq!(out.item(), 27.0);
}

#[test]
fn conv3d_centered_delta_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[2, 1, 4, 5, 3]);
    let mut k = vec![0.0; 27];
    k[13] = 1.0;
    let k = Tensor::from_vec(&[1, 1, 3, 3, 3], k).unwrap();
    let out = conv(&mut Tape::new(), &x, &k, Conv3dGeometry::uniform(1, 1));
    assert_eq!(out, x);
}

#[test]
fn conv3d_output_extent_formula() {
    let x = Tensor::zeros(&[1, 2, 9, 8, 7]).unwrap();
    let k = Tensor::zeros(&[3, 2, 3, 2, 1]).unwrap();
    let out = conv(&mut Tape::new(), &x, &k, Conv3dGeometry::new([2, 3, 1], [1, 0, 2]));
    // floor((9+2-3)/2)+1, floor((8-2)/3)+1, floor((7+4-1)/1)+1
    assert_eq!(out.shape(), &[1, 3, 5, 3, 11]);
}

#[test]
fn conv3d_shape_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4, 4]).unwrap());
    let bad_c = tape.constant(Tensor::zeros(&[1, 3, 3, 3, 3]).unwrap());
    assert!(matches!(
        tape.conv3d(x, bad_c, None, Conv3dGeometry::uniform(1, 0)),
        Err(TensorError::ShapeMismatch { .. })
    ));
    let big = tape.constant(Tensor::zeros(&[1, 2, 5, 1, 1]).unwrap());
    assert!(matches!(
        tape.conv3d(x, big, None, Conv3dGeometry::uniform(1, 0)),
        Err(TensorError::EmptyOutput { .. })
    ));
    let k = tape.constant(Tensor::zeros(&[1, 2, 1, 1, 1]).unwrap());
    assert!(tape.conv3d(x, k, None, Conv3dGeometry::uniform(0, 0)).is_err());
    let flat = tape.constant(Tensor::zeros(&[2, 4, 4]).unwrap());
    assert!(tape.conv3d(flat, k, None, Conv3dGeometry::uniform(1, 0)).is_err());
}

#[test]
fn conv3d_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for geom in [Conv3dGeometry::uniform(1, 0), Conv3dGeometry::new([2, 1, 2], [1, 1, 0])] {
        for _ in 0..10 {
            let x = random(&mut rng, &[1, 2, 4, 4, 4]);
            let k = random(&mut rng, &[3, 2, 2, 2, 2]);
            let b = random(&mut rng, &[3]);
            let err = grad_check_many(
                |t, v| {
                    let y = t.conv3d(v[0], v[1], Some(v[2]), geom)?;
                    weighted_sum(t, y)
                },
                &[x, k, b],
                STEP,
            )
            .unwrap();
            assert!(err < 1e-6, "conv3d {geom:?}: {err}");
        }
    }
}

#[test]
fn conv3d_pointwise_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 3, 2, 3, 2]);
    let k = random(&mut rng, &[4, 3, 1, 1, 1]);
    let err = grad_check_many(
        |t, v| {
            let y = t.conv3d(v[0], v[1], None, Conv3dGeometry::uniform(1, 0))?;
            weighted_sum(t, y)
        },
        &[x, k],
        STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

// ---------------------------------------------------------------- batch norm

fn bn_train(x: &Tensor<f64>, eps: f64) -> (Tensor<f64>, RunningStats<f64>) {
    let c = x.shape()[1];
    let mut running = RunningStats::new(c);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::ones(&[c]).unwrap());
    let b = tape.constant(Tensor::zeros(&[c]).unwrap());
    let y = tape
        .batch_norm3d(xv, g, b, eps, NormMode::Train { running: &mut running, momentum: 0.1 })
        .unwrap();
    (tape.value(y).clone(), running)
}

#[test]
fn batch_norm_constant_input_is_zero() {
    let x = Tensor::full(&[2, 3, 2, 2, 2], 4.2).unwrap();
    let (y, _) = bn_train(&x, 1e-5);
    assert!(y.data().iter().all(|v| v.abs() <= 1e-5f64.sqrt()));
}

#[test]
fn batch_norm_two_values_map_to_unit() {
    let x = Tensor::from_vec(&[2, 1, 1, 1, 1], vec![0.0, 2.0]).unwrap();
    let (y, running) = bn_train(&x, 1e-5);
    assert!((y.data()[0] + 1.0).abs() < 1e-3);
    assert!((y.data()[1] - 1.0).abs() < 1e-3);
    // momentum 0.1: mean 0.9*0 + 0.1*1, unbiased var 2 -> 0.9*1 + 0.1*2
    assert!((running.mean[0] - 0.1).abs() < 1e-12);
    assert!((running.var[0] - 1.1).abs() < 1e-12);
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let running = RunningStats::<f64> { mean: vec![1.0, -1.0], var: vec![4.0, 0.25] };
    let x = Tensor::from_vec(&[1, 2, 1, 1, 2], vec![3.0, 1.0, 0.0, -1.5]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::from_vec(&[2], vec![2.0, 1.0]).unwrap());
    let b = tape.constant(Tensor::from_vec(&[2], vec![0.5, 0.0]).unwrap());
    let y = tape.batch_norm3d(xv, g, b, 0.0 + 1e-12, NormMode::Eval { running: &running }).unwrap();
    let want = [2.0 * 1.0 + 0.5, 0.5, 2.0, -1.0];
    for (a, b) in tape.value(y).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn batch_norm_rejects_bad_arguments() {
    let mut running = RunningStats::<f64>::new(2);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 1, 1, 1]).unwrap());
    let g = tape.constant(Tensor::ones(&[2]).unwrap());
    let b = tape.constant(Tensor::zeros(&[2]).unwrap());
    let mode = NormMode::Train { running: &mut running, momentum: 0.1 };
    assert!(matches!(tape.batch_norm3d(x, g, b, 1e-5, mode), Err(TensorError::ShapeMismatch { .. })));
    let g3 = tape.constant(Tensor::ones(&[3]).unwrap());
    let b3 = tape.constant(Tensor::zeros(&[3]).unwrap());
    let mut r3 = RunningStats::new(3);
    let mode = NormMode::Train { running: &mut r3, momentum: 0.1 };
    assert!(tape.batch_norm3d(x, g3, b3, 0.0, mode).is_err());
}

#[test]
fn batch_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let x = random(&mut rng, &[2, 3, 2, 2, 2]);
        let g = random(&mut rng, &[3]);
        let b = random(&mut rng, &[3]);
        let err = grad_check_many(
            |t, v| {
                let mut running = RunningStats::new(3);
                let y = t.batch_norm3d(v[0], v[1], v[2], 1e-5, NormMode::Train { running: &mut running, momentum: 0.1 })?;
                // mean((y - target)^2); plain mean(y^2) is constant in x after normalization
                let target = Tensor::from_vec(&[2, 3, 2, 2, 2], (0..48).map(|i| (i % 5) as f64 * 0.3 - 0.6).collect())?;
                let target = t.constant(target);
                let neg = t.scale(target, -1.0);
                let diff = t.add(y, neg)?;
                let sq = t.mul(diff, diff)?;
                Ok(t.mean(sq))
            },
            &[x, g, b],
            STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "batch_norm3d: {err}");
    }
}

#[test]
fn batch_norm_eval_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let running = RunningStats { mean: vec![0.3, -0.2], var: vec![0.5, 2.0] };
    let x = random(&mut rng, &[2, 2, 1, 2, 2]);
    let g = random(&mut rng, &[2]);
    let b = random(&mut rng, &[2]);
    let err = grad_check_many(
        |t, v| {
            let y = t.batch_norm3d(v[0], v[1], v[2], 1e-5, NormMode::Eval { running: &running })?;
            weighted_sum(t, y)
        },
        &[x, g, b],
        STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

// ---------------------------------------------------------------- relu

#[test]
fn relu_values_and_subgradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn relu_linear_composite_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    while checked < 10 {
        let x = away_from_zero(&mut rng, &[3, 4]);
        let w = away_from_zero(&mut rng, &[5, 4]);
        let b = away_from_zero(&mut rng, &[5]);
        let program = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let r = t.relu(y);
            weighted_sum(t, r)
        };
        let mut probe = Tape::new();
        let vars: Vec<Var> = [&x, &w, &b].iter().map(|p| probe.constant((*p).clone())).collect();
        program(&mut probe, &vars).unwrap();
        if probe.relu_margin().unwrap() < 1e-3 {
            continue;
        }
        let err = grad_check_many(program, &[x, w, b], STEP).unwrap();
        assert!(err < 1e-6, "relu∘linear: {err}");
        checked += 1;
    }
}

// ---------------------------------------------------------------- pooling

#[test]
fn global_avg_pool_values() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(&[1, 1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap());
    let y = tape.global_avg_pool3d(x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1]);
    assert_eq!(tape.value(y).item(), 4.5);

    let c = tape.constant(Tensor::full(&[2, 3, 2, 3, 1], -0.75).unwrap());
    let yc = tape.global_avg_pool3d(c).unwrap();
    assert!(tape.value(yc).data().iter().all(|&v| v == -0.75));

    let scaled = tape.scale(y, 3.0);
    let s = tape.sum(scaled);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 3.0 / 8.0));
}

#[test]
fn global_avg_pool_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let x = random(&mut rng, &[2, 3, 2, 1, 3]);
        let err = grad_check(
            |t, v| {
                let y = t.global_avg_pool3d(v)?;
                weighted_sum(t, y)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn max_pool_values_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(&[1, 1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
    let y = tape
        .max_pool3d(x, [1, 2, 2], Conv3dGeometry::new([1, 2, 2], [0, 0, 0]))
        .unwrap();
    assert_eq!(tape.value(y).data(), &[5.0]);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let x = random(&mut rng, &[1, 2, 4, 5, 3]);
        let err = grad_check(
            |t, v| {
                let y = t.max_pool3d(v, [3, 3, 3], Conv3dGeometry::uniform(2, 1))?;
                weighted_sum(t, y)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

// ---------------------------------------------------------------- linear

#[test]
fn linear_identity_and_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.5]).unwrap());
    let mut eye = vec![0.0; 9];
    eye[0] = 1.0;
    eye[4] = 1.0;
    eye[8] = 1.0;
    let w = tape.constant(Tensor::from_vec(&[3, 3], eye).unwrap());
    let zero_b = tape.constant(Tensor::zeros(&[3]).unwrap());
    let y = tape.linear(x, w, Some(zero_b)).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());

    let z = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
    let b = tape.constant(Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap());
    let y = tape.linear(z, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

    let bad = tape.constant(Tensor::zeros(&[3, 4]).unwrap());
    assert!(tape.linear(x, bad, None).is_err());
}

#[test]
fn linear_gradient_all_arguments() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let x = random(&mut rng, &[3, 4]);
        let w = random(&mut rng, &[2, 4]);
        let b = random(&mut rng, &[2]);
        let err = grad_check_many(
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                weighted_sum(t, y)
            },
            &[x, w, b],
            STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

// ---------------------------------------------------------------- log_softmax

fn log_softmax(values: &[f64], c: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(&[values.len() / c, c], values.to_vec()).unwrap());
    let y = tape.log_softmax(x).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn log_softmax_uniform_row() {
    for v in log_softmax(&[0.0, 0.0, 0.0], 3) {
        assert!((v + 3f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn log_softmax_shift_invariance_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let z: Vec<f64> = (0..12).map(|_| rng.random_range(-30.0..30.0)).collect();
        let shift = rng.random_range(-50.0..50.0);
        let a = log_softmax(&z, 4);
        let b = log_softmax(&z.iter().map(|v| v + shift).collect::<Vec<_>>(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        for row in a.chunks(4) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn log_softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let z = random(&mut rng, &[4, 3]);
        let err = grad_check(
            |t, v| {
                let y = t.log_softmax(v)?;
                weighted_sum(t, y)
            },
            &z,
            STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn log_softmax_needs_two_classes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[3, 1]).unwrap());
    assert!(tape.log_softmax(x).is_err());
}

// ---------------------------------------------------------------- fused losses

#[test]
fn fused_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let labels = [0usize, 2, 1, 2];
    let weights = [0.5, 3.0, 1.25, 3.0];
    for _ in 0..10 {
        let z = random(&mut rng, &[4, 3]);
        let nll = grad_check(
            |t, v| {
                let lp = t.log_softmax(v)?;
                Ok(t.weighted_nll(lp, &labels, &weights)?.0)
            },
            &z,
            STEP,
        )
        .unwrap();
        let bce = grad_check(|t, v| Ok(t.weighted_bce_with_logits(v, &labels, &weights)?.0), &z, STEP).unwrap();
        assert!(nll < 1e-6 && bce < 1e-6, "nll {nll}, bce {bce}");
    }
}

#[test]
fn fused_losses_reject_bad_labels() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::<f64>::zeros(&[2, 3]).unwrap());
    assert!(tape.weighted_nll(z, &[0, 3], &[1.0, 1.0]).is_err());
    assert!(tape.weighted_nll(z, &[0], &[1.0]).is_err());
    assert!(tape.weighted_bce_with_logits(z, &[5, 0], &[1.0, 1.0]).is_err());
}
