use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values with |v| >= 0.05 so ReLU kinks stay outside the difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen() { m } else { -m }
        })
        .collect();
    t(shape, data)
}

#[test]
fn conv2d_ones_kernel_counts_neighbours() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, Conv2dParams::new(1, 1, 1)).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = rand_t(&[2, 1, 5, 7], &mut rng);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let w = g.input(t(&[1, 1, 3, 3], k));
    let y = g.conv2d(x, w, None, Conv2dParams::new(1, 1, 1)).unwrap();
    assert_eq!(g.value(y), &input);
}

#[test]
fn conv2d_channel_mismatch_reports_both_shapes() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.input(Tensor::zeros(&[3, 5, 3, 3]));
    let err = g.conv2d(x, w, None, Conv2dParams::default()).unwrap_err().to_string();
    assert!(err.contains("[1, 2, 4, 4]") && err.contains("[3, 5, 3, 3]"), "{err}");
}

#[test]
fn conv_transpose_gnet_configuration_doubles_size() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 4, 16, 16]));
    let w = g.input(Tensor::zeros(&[4, 2, 3, 3]));
    let y = g.conv_transpose2d(x, w, None, ConvTranspose2dParams::new(2, 2, 2, 1)).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 32, 32]);
}

#[test]
fn conv_transpose_unit_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = rand_t(&[1, 1, 4, 6], &mut rng);
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let w = g.input(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv_transpose2d(x, w, None, ConvTranspose2dParams::new(1, 0, 1, 0)).unwrap();
    assert_eq!(g.value(y), &input);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x; w), y> == <x, conv_transpose(y; w)> for tied weights.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (k, s, p, d) in [(3, 2, 2, 2), (2, 2, 0, 1), (3, 1, 1, 1), (3, 2, 1, 1)] {
        let x = rand_t(&[1, 3, 8, 10], &mut rng);
        let w = rand_t(&[2, 3, k, k], &mut rng); // conv: 3 -> 2
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let cx = g.conv2d(xv, wv, None, Conv2dParams::new(s, p, d)).unwrap();
        let (_, _, oh, ow) = g.value(cx).dims4().unwrap();
        let y = rand_t(&[1, 2, oh, ow], &mut rng);
        let yv = g.input(y.clone());
        // the transposed conv must land back on 8x10
        let op_h = 8 - ConvTranspose2dParams::new(s, p, d, 0).output_size(oh, k).unwrap();
        let op_w = 10 - ConvTranspose2dParams::new(s, p, d, 0).output_size(ow, k).unwrap();
        assert_eq!(op_h, op_w);
        let ty = g
            .conv_transpose2d(yv, wv, None, ConvTranspose2dParams::new(s, p, d, op_h))
            .unwrap();
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "k{k} s{s} p{p} d{d}: {lhs} vs {rhs}");

        // and pixelwise against the input gradient of conv2d
        let mut g2 = Graph::new();
        let xp = g2.param(x.clone());
        let wc = g2.input(w.clone());
        let c2 = g2.conv2d(xp, wc, None, Conv2dParams::new(s, p, d)).unwrap();
        let root = g2.weighted_sum(c2, y.data().to_vec()).unwrap();
        g2.backward(root).unwrap();
        let gx = g2.grad(xp).unwrap();
        assert!(gx.max_abs_diff(g.value(ty)) < 1e-10);
    }
}

#[test]
fn maxpool_single_window_and_ties() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let y = g.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[1, 1, 2, 4], 7.0));
    let y = g.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[7.0, 7.0]);
    let s = g.weighted_sum(y, vec![1.0, 1.0]).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn relu_and_sigmoid_values() {
    let mut g = Graph::new();
    let x = g.input(t(&[3], vec![-1.0, 2.0, 0.0]));
    let r = g.relu(x);
    let s = g.sigmoid(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
    assert_eq!(g.value(s).data()[2], 0.5);
}

#[test]
fn batchnorm_training_standardises_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = Tensor::uniform(&[3, 2, 5, 5], -10.0, 20.0, &mut rng);
    let mut stats = BatchNormStats::new(2);
    let mut g = Graph::new();
    let x = g.input(input);
    let gamma = g.input(Tensor::full(&[2], 1.0));
    let beta = g.input(Tensor::zeros(&[2]));
    let y = g.batch_norm2d(x, gamma, beta, &mut stats, true).unwrap();
    let v = g.value(y).data();
    for ch in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|i| v[(i * 2 + ch) * 25..(i * 2 + ch + 1) * 25].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6, "{var}");
    }
    assert!(stats.mean.iter().any(|&m| m != 0.0));
}

#[test]
fn batchnorm_eval_with_unit_stats_is_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let input = rand_t(&[1, 2, 3, 3], &mut rng);
    let mut stats = BatchNormStats::new(2);
    stats.eps = 0.0;
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let gamma = g.input(t(&[2], vec![2.0, -1.0]));
    let beta = g.input(t(&[2], vec![0.5, 3.0]));
    let y = g.batch_norm2d(x, gamma, beta, &mut stats, false).unwrap();
    for (i, (&o, &iv)) in g.value(y).data().iter().zip(input.data()).enumerate() {
        let expect = if i < 9 { 2.0 * iv + 0.5 } else { -iv + 3.0 };
        assert!((o - expect).abs() < 1e-12);
    }
    assert_eq!(stats, BatchNormStats { eps: 0.0, ..BatchNormStats::new(2) });
}

#[test]
fn concat_adds_channels_and_rejects_spatial_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::full(&[2, 1, 3, 3], 1.0));
    let b = g.input(Tensor::full(&[2, 2, 3, 3], 2.0));
    let c = g.concat_channels(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 3, 3, 3]);
    assert_eq!(g.value(c).data()[9], 2.0);
    assert_eq!(g.value(c).data()[27], 1.0);
    let d = g.input(Tensor::full(&[2, 1, 3, 4], 1.0));
    assert!(matches!(g.concat_channels(a, d), Err(crate::Error::Shape(_))));
}

#[test]
fn loss_reference_values() {
    let mut g = Graph::new();
    let y = t(&[4], vec![0.0, 1.0, 1.0, 0.0]);
    let p = g.input(y.clone());
    let target = g.input(y);
    let l = g.bce_loss(p, target).unwrap();
    assert!(g.value(l).data()[0] <= 1e-6);

    let half = g.input(Tensor::full(&[4], 0.5));
    let l = g.bce_loss(half, target).unwrap();
    assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

    let m = g.mse_loss(target, target).unwrap();
    assert_eq!(g.value(m).data()[0], 0.0);
    let shifted = g.input(t(&[4], vec![2.0, 3.0, 3.0, 2.0]));
    let m = g.mse_loss(shifted, target).unwrap();
    assert_eq!(g.value(m).data()[0], 4.0);

    let wrong = g.input(Tensor::zeros(&[5]));
    assert!(g.bce_loss(wrong, target).is_err());
    assert!(g.mse_loss(wrong, target).is_err());
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(Tensor::<f64>::zeros(&[2]));
    let r = g.relu(x);
    assert!(g.backward(r).is_err());
}

#[test]
fn shared_operand_gradients_accumulate() {
    // d/dx sum(concat(x, x) * w) == w_a + w_b
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 1, 2], vec![0.3, -0.2]));
    let c = g.concat_channels(x, x).unwrap();
    let s = g.weighted_sum(c, vec![1.0, 2.0, 10.0, 20.0]).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[11.0, 22.0]);
}

// --- finite-difference checks -------------------------------------------------

const H: f64 = 1e-4;

#[test]
fn gradcheck_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = [rand_t(&[2, 3, 8, 8], &mut rng), rand_t(&[4, 3, 3, 3], &mut rng), rand_t(&[4], &mut rng)];
    let err = finite_difference_check(
        |g: &mut Graph<f64>, v: &[Var]| g.conv2d(v[0], v[1], Some(v[2]), Conv2dParams::new(1, 1, 1)),
        &inputs,
        H,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_conv_transpose_dilated() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let inputs = [rand_t(&[2, 3, 4, 5], &mut rng), rand_t(&[3, 2, 3, 3], &mut rng), rand_t(&[2], &mut rng)];
    let err = finite_difference_check(
        |g: &mut Graph<f64>, v: &[Var]| g.conv_transpose2d(v[0], v[1], Some(v[2]), ConvTranspose2dParams::new(2, 2, 2, 1)),
        &inputs,
        H,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_maxpool_relu_sigmoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    // distinct values keep the argmax away from ties
    let mut vals: Vec<f64> = (0..2 * 2 * 6 * 6).map(|i| i as f64 * 0.01).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    let x = t(&[2, 2, 6, 6], vals);
    let err = finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| g.max_pool2d(v[0], 2, 2), &[x], H).unwrap();
    assert!(err < 1e-6, "{err}");

    let x = away_from_zero(&[1, 2, 4, 4], &mut rng);
    let err = finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| Ok(g.relu(v[0])), &[x.clone()], H).unwrap();
    assert!(err < 1e-6, "{err}");
    let err = finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| Ok(g.sigmoid(v[0])), &[x], H).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_batchnorm_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let inputs = [rand_t(&[2, 4, 6, 6], &mut rng), rand_t(&[4], &mut rng), rand_t(&[4], &mut rng)];
    for training in [true, false] {
        let err = finite_difference_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let mut stats = BatchNormStats::new(4);
                stats.mean = vec![0.1, -0.2, 0.3, 0.0];
                stats.var = vec![0.5, 1.5, 2.0, 1.0];
                g.batch_norm2d(v[0], v[1], v[2], &mut stats, training)
            },
            &inputs,
            H,
        )
        .unwrap();
        assert!(err < 1e-5, "training={training}: {err}");
    }
}

#[test]
fn gradcheck_concat_crop_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let inputs = [rand_t(&[2, 1, 3, 4], &mut rng), rand_t(&[2, 2, 3, 4], &mut rng)];
    let err = finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| g.concat_channels(v[0], v[1]), &inputs, H).unwrap();
    assert!(err < 1e-6, "{err}");
    let err = finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| g.crop2d(v[1], 1, 1, 2, 2), &inputs, H).unwrap();
    assert!(err < 1e-6, "{err}");
    let err = finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| g.upsample_nearest2x(v[0]), &inputs, H).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let pred = Tensor::uniform(&[1, 1, 4, 4], 0.15, 0.85, &mut rng);
    let target = Tensor::uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
    let err = finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| g.bce_loss(v[0], v[1]), &[pred.clone(), target.clone()], H).unwrap();
    assert!(err < 1e-6, "{err}");
    let err = finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| g.mse_loss(v[0], v[1]), &[pred, target], H).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_two_layer_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let inputs = [
        rand_t(&[1, 2, 6, 6], &mut rng),
        rand_t(&[3, 2, 3, 3], &mut rng),
        rand_t(&[1, 3, 1, 1], &mut rng),
        Tensor::uniform(&[1, 1, 6, 6], 0.0, 1.0, &mut rng),
    ];
    let err = finite_difference_check(
        |g: &mut Graph<f64>, v: &[Var]| {
            let h = g.conv2d(v[0], v[1], None, Conv2dParams::new(1, 1, 1))?;
            let h = g.sigmoid(h);
            let o = g.conv2d(h, v[2], None, Conv2dParams::default())?;
            let o = g.sigmoid(o);
            g.bce_loss(o, v[3])
        },
        &inputs,
        H,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn f32_and_f64_forward_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let x = rand_t(&[1, 3, 8, 8], &mut rng);
    let w = rand_t(&[2, 3, 3, 3], &mut rng);
    let run = |x: Tensor<f64>, w: Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.input(x);
        let wv = g.input(w);
        let y = g.conv2d(xv, wv, None, Conv2dParams::new(2, 1, 1)).unwrap();
        g.value(y).clone()
    };
    let y64 = run(x.clone(), w.clone());
    let mut g = Graph::<f32>::new();
    let xv = g.input(x.cast());
    let wv = g.input(w.cast());
    let y = g.conv2d(xv, wv, None, Conv2dParams::new(2, 1, 1)).unwrap();
    assert!(g.value(y).cast::<f64>().max_abs_diff(&y64) < 1e-5);
}

#[test]
fn pad_modes_index_correctly() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]));
    let none = PadSpec::none();
    let c = g.pad2d(x, none, PadSpec::new(2, 1, PadMode::Circular)).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0, 1.0]);
    let r = g.pad2d(x, none, PadSpec::new(2, 2, PadMode::Reflect)).unwrap();
    assert_eq!(g.value(r).data(), &[3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0]);
    let z = g.pad2d(x, PadSpec::new(1, 0, PadMode::Zero), PadSpec::new(1, 0, PadMode::Zero)).unwrap();
    assert_eq!(g.value(z).shape(), &[1, 1, 2, 5]);
    assert_eq!(g.value(z).data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn gradcheck_pad() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = rand_t(&[1, 2, 3, 5], &mut rng);
    for mode in [PadMode::Zero, PadMode::Circular, PadMode::Reflect] {
        let err = finite_difference_check(
            |g: &mut Graph<f64>, v: &[Var]| g.pad2d(v[0], PadSpec::new(1, 2, PadMode::Zero), PadSpec::new(2, 3, mode)),
            &[x.clone()],
            H,
        )
        .unwrap();
        assert!(err < 1e-6, "{mode:?}: {err}");
    }
}
