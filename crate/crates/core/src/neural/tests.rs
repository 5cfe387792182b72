use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn single(inputs: usize, outputs: usize, activation: Activation, batch_norm: bool) -> Architecture {
    Architecture {
        layers: vec![LayerSpec {
            inputs,
            outputs,
            activation,
            batch_norm,
            dropout: 0.0,
        }],
    }
}

fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Sign pattern of every ReLU pre-activation; used to skip finite differences
/// that straddle a kink.
fn relu_pattern(net: &DenseNet, x: &Array2<f64>) -> Vec<bool> {
    let (_, tape) = net.forward_eval(x.view()).unwrap();
    tape.layers
        .iter()
        .zip(&net.arch.layers)
        .filter(|(_, l)| l.activation == Activation::Relu)
        .flat_map(|(c, _)| c.pre_act.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
        .collect()
}

fn linear_loss(net: &DenseNet, x: &Array2<f64>, weights: &Array2<f64>) -> f64 {
    (net.predict(x.view()).unwrap() * weights).sum()
}

/// Max relative error of analytic gradients against central differences.
fn gradient_check(net: &DenseNet, x: &Array2<f64>, weights: &Array2<f64>) -> (f64, usize) {
    let h = 1e-5;
    let (_, tape) = net.forward_eval(x.view()).unwrap();
    let (grads, _) = net.backward(tape, weights.view()).unwrap();
    let base = relu_pattern(net, x);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..net.n_params() {
        let mut plus = net.clone();
        plus.params[i] += h;
        let mut minus = net.clone();
        minus.params[i] -= h;
        if relu_pattern(&plus, x) != base || relu_pattern(&minus, x) != base {
            continue;
        }
        let fd = (linear_loss(&plus, x, weights) - linear_loss(&minus, x, weights)) / (2.0 * h);
        let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-4);
        worst = worst.max(rel);
        checked += 1;
    }
    (worst, checked)
}

#[test]
fn identity_layer_passes_input_through() {
    let mut net = DenseNet::zeros(single(3, 3, Activation::Identity, false)).unwrap();
    net.set_layer(0, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[0.0; 3])
        .unwrap();
    let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
    assert_eq!(net.predict(x.view()).unwrap(), x);
}

#[test]
fn zero_weights_emit_relu_of_bias() {
    let mut net = DenseNet::zeros(single(2, 3, Activation::Relu, false)).unwrap();
    net.set_layer(0, &[0.0; 6], &[0.5, -1.0, 2.0]).unwrap();
    let y = net.predict(array![[3.0, 1.0], [-7.0, 2.0]].view()).unwrap();
    assert_eq!(y, array![[0.5, 0.0, 2.0], [0.5, 0.0, 2.0]]);
}

#[test]
fn forward_matches_scalar_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let net = DenseNet::new(Architecture::mlp(4, &[6, 5], 2, false, 0.0), &mut rng).unwrap();
    let x = random_input(&mut rng, 3, 4, 1.0);
    let y = net.predict(x.view()).unwrap();
    for r in 0..3 {
        let mut a: Vec<f64> = x.row(r).to_vec();
        for (l, spec) in net.arch.layers.iter().enumerate() {
            let w = net.weights(l);
            let b = net.bias(l);
            let mut next = Vec::new();
            for j in 0..spec.outputs {
                let mut z = b[j];
                for i in 0..spec.inputs {
                    z += a[i] * w[[i, j]];
                }
                next.push(if spec.activation == Activation::Relu { z.max(0.0) } else { z });
            }
            a = next;
        }
        for j in 0..2 {
            assert!((a[j] - y[[r, j]]).abs() < 1e-13);
        }
    }
}

#[test]
fn squared_loss_at_target_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = DenseNet::new(Architecture::mlp(3, &[], 2, false, 0.0), &mut rng).unwrap();
    let x = random_input(&mut rng, 4, 3, 1.0);
    let (y, tape) = net.forward_eval(x.view()).unwrap();
    let target = y.clone();
    let dy = (&y - &target) * 2.0;
    let (grads, dx) = net.backward(tape, dy.view()).unwrap();
    assert!(grads.iter().all(|&g| g == 0.0));
    assert!(dx.iter().all(|&g| g == 0.0));
}

#[test]
fn identity_input_gradient_is_dy_times_w_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = DenseNet::new(single(3, 2, Activation::Identity, false), &mut rng).unwrap();
    let x = random_input(&mut rng, 4, 3, 1.0);
    let dy = random_input(&mut rng, 4, 2, 1.0);
    let (_, tape) = net.forward_eval(x.view()).unwrap();
    let (_, dx) = net.backward(tape, dy.view()).unwrap();
    let expected = dy.dot(&net.weights(0).t());
    assert!((dx - expected).iter().all(|v| v.abs() < 1e-14));
}

#[test]
fn three_layer_relu_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = DenseNet::new(Architecture::mlp(5, &[10, 15, 10], 1, false, 0.0), &mut rng).unwrap();
    let x = random_input(&mut rng, 8, 5, 1.0);
    let w = random_input(&mut rng, 8, 1, 1.0);
    let (worst, checked) = gradient_check(&net, &x, &w);
    assert!(checked > net.n_params() / 2);
    assert!(worst <= 1e-5, "max relative error {worst}");
}

#[test]
fn twenty_random_nets_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let depth = rng.random_range(1..=4);
        let hidden: Vec<usize> = (0..depth - 1).map(|_| rng.random_range(2..=16)).collect();
        let inputs = rng.random_range(1..=16);
        let outputs = rng.random_range(1..=3);
        let net = DenseNet::new(Architecture::mlp(inputs, &hidden, outputs, false, 0.0), &mut rng).unwrap();
        let x = random_input(&mut rng, 6, inputs, 1.0);
        let w = random_input(&mut rng, 6, outputs, 1.0);
        let (worst, _) = gradient_check(&net, &x, &w);
        assert!(worst <= 1e-5, "depth {depth} hidden {hidden:?}: {worst}");
    }
}

#[test]
fn batch_norm_train_gradients_match_finite_differences() {
    // Train-mode BN is a smooth function of the whole batch; check it without ReLU.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let arch = Architecture {
        layers: vec![
            LayerSpec {
                inputs: 3,
                outputs: 4,
                activation: Activation::Identity,
                batch_norm: true,
                dropout: 0.0,
            },
            LayerSpec {
                inputs: 4,
                outputs: 1,
                activation: Activation::Identity,
                batch_norm: false,
                dropout: 0.0,
            },
        ],
    };
    let mut net = DenseNet::new(arch, &mut rng).unwrap();
    for p in net.params.iter_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let x = random_input(&mut rng, 7, 3, 2.0);
    let w = random_input(&mut rng, 7, 1, 1.0);
    let loss = |n: &DenseNet| {
        let mut n = n.clone();
        let (y, _) = n.forward_train(x.view(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (y * &w).sum()
    };
    let mut probe = net.clone();
    let (_, tape) = probe.forward_train(x.view(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (grads, dx) = net.backward(tape, w.view()).unwrap();
    let h = 1e-5;
    for i in 0..net.n_params() {
        let mut p = net.clone();
        p.params[i] += h;
        let mut m = net.clone();
        m.params[i] -= h;
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-4);
        assert!(rel <= 1e-5, "param {i}: fd {fd} analytic {}", grads[i]);
    }
    for r in 0..7 {
        for c in 0..3 {
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let f = |xx: &Array2<f64>| {
                let mut n = net.clone();
                let (y, _) = n.forward_train(xx.view(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                (y * &w).sum()
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - dx[[r, c]]).abs() <= 1e-5 * fd.abs().max(1e-4) + 1e-9);
        }
    }
}

#[test]
fn batch_norm_output_matches_scale_and_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = DenseNet::new(single(3, 2, Activation::Identity, true), &mut rng).unwrap();
    let g = net.offsets[0].bn.unwrap();
    net.params[g..g + 4].copy_from_slice(&[1.5, 0.7, -0.2, 3.0]);
    let x = random_input(&mut rng, 64, 3, 30.0);
    let (y, _) = net.forward_train(x.view(), &mut rng).unwrap();
    let mean = y.mean_axis(Axis(0)).unwrap();
    let std = y.std_axis(Axis(0), 0.0);
    assert!((mean[0] + 0.2).abs() < 1e-6 && (mean[1] - 3.0).abs() < 1e-6);
    assert!((std[0] - 1.5).abs() < 1e-6 && (std[1] - 0.7).abs() < 1e-6, "{std}");
    // running statistics moved by one momentum step towards the batch
    let stats = net.running[0].as_ref().unwrap();
    assert!(stats.mean.iter().any(|&m| m != 0.0));
}

#[test]
fn dropout_average_approaches_eval_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut net = DenseNet::new(Architecture::mlp(3, &[8], 1, false, 0.25), &mut rng).unwrap();
    let x = random_input(&mut rng, 1, 3, 1.0);
    let eval = net.predict(x.view()).unwrap()[[0, 0]];
    let n = 10_000;
    let samples: Vec<f64> = (0..n)
        .map(|_| net.forward_train(x.view(), &mut rng).unwrap().0[[0, 0]])
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - eval).abs() <= 3.0 * se, "mean {mean} eval {eval} se {se}");
}

#[test]
fn dimension_mismatch_is_a_config_error() {
    let net = DenseNet::zeros(Architecture::mlp(3, &[4], 1, false, 0.0)).unwrap();
    let x = Array2::zeros((2, 5));
    assert!(matches!(net.predict(x.view()), Err(HedgeError::Config(_))));
    let bad = Architecture {
        layers: vec![single(3, 4, Activation::Relu, false).layers[0], single(5, 1, Activation::Identity, false).layers[0]],
    };
    assert!(DenseNet::zeros(bad).is_err());
}

#[test]
fn tape_from_another_network_is_rejected() {
    let a = DenseNet::zeros(Architecture::mlp(2, &[3], 1, false, 0.0)).unwrap();
    let b = DenseNet::zeros(Architecture::mlp(2, &[4], 1, false, 0.0)).unwrap();
    let (_, tape) = a.forward_eval(Array2::zeros((1, 2)).view()).unwrap();
    assert!(matches!(b.backward(tape, Array2::zeros((1, 1)).view()), Err(HedgeError::Usage(_))));
}

#[test]
fn soft_update_blends() {
    let arch = single(1, 1, Activation::Identity, false);
    let mut target = DenseNet::zeros(arch.clone()).unwrap();
    let mut source = DenseNet::zeros(arch).unwrap();
    target.set_layer(0, &[2.0], &[1.0]).unwrap();
    source.set_layer(0, &[4.0], &[3.0]).unwrap();

    let mut t = target.clone();
    t.soft_update(&source, 1.0).unwrap();
    assert_eq!(t, target);
    let mut t = target.clone();
    t.soft_update(&source, 0.0).unwrap();
    assert_eq!(t.params(), source.params());
    let mut t = target.clone();
    t.soft_update(&source, 0.999).unwrap();
    assert!((t.params()[0] - 2.002).abs() < 1e-12);

    let other = DenseNet::zeros(single(2, 1, Activation::Identity, false)).unwrap();
    assert!(t.soft_update(&other, 0.5).is_err());
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut net = DenseNet::new(Architecture::mlp(5, &[10, 15, 10], 1, true, 0.25), &mut rng).unwrap();
    let x = random_input(&mut rng, 32, 5, 1.0);
    net.forward_train(x.view(), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    write_checkpoint(&net, serde_json::json!({"adam_step": 17}), &path).unwrap();
    let (back, header) = read_checkpoint(&path).unwrap();
    assert_eq!(header.meta["adam_step"], 17);
    assert_eq!(back.params().len(), net.params().len());
    assert!(back.params().iter().zip(net.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(back, net);
    assert!(matches!(
        read_checkpoint(&dir.path().join("missing.bin")),
        Err(HedgeError::MissingCheckpoint(_))
    ));
}

proptest! {
    #[test]
    fn soft_update_shrinks_distance_by_rho(rho in 0.0f64..1.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture::mlp(3, &[4], 2, false, 0.0);
        let mut target = DenseNet::new(arch.clone(), &mut rng).unwrap();
        let source = DenseNet::new(arch, &mut rng).unwrap();
        let before: Vec<f64> = target.params().iter().zip(source.params()).map(|(t, s)| t - s).collect();
        target.soft_update(&source, rho).unwrap();
        for (i, d) in before.iter().enumerate() {
            let after = target.params()[i] - source.params()[i];
            prop_assert!((after - rho * d).abs() <= 1e-12 * d.abs().max(1.0));
        }
    }

    #[test]
    fn adam_first_step_sign_is_scale_invariant(
        grads in proptest::collection::vec(-10.0f64..10.0, 1..20),
        scale in 1e-3f64..1e3,
    ) {
        let mut a = AdamState::new(grads.len(), 1e-3);
        let mut b = AdamState::new(grads.len(), 1e-3);
        let mut pa = vec![0.0; grads.len()];
        let mut pb = vec![0.0; grads.len()];
        let scaled: Vec<f64> = grads.iter().map(|g| g * scale).collect();
        a.step(&mut pa, &grads).unwrap();
        b.step(&mut pb, &scaled).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            prop_assert_eq!(x.signum() == 0.0, y.signum() == 0.0);
            if *x != 0.0 {
                prop_assert_eq!(x.signum(), y.signum());
            }
        }
    }
}
