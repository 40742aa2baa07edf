use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spheremap::autodiff::{adam_step, AdamState, Graph, Tensor};
use spheremap::gnet::{build_model, GNetConfig, UpsampleMode};
use spheremap::Error;

fn cfg(width: usize, mode: UpsampleMode) -> GNetConfig {
    GNetConfig { base_width: width, upsample_mode: mode, ..GNetConfig::default() }
}

#[test]
fn output_size_matches_input_for_all_listed_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for mode in UpsampleMode::ALL {
        let mut m = build_model::<f32>(cfg(4, mode), 0).unwrap();
        for h in [64, 96, 192] {
            for w in [64, 320, 720] {
                let x = Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng);
                let y = m.infer(x).unwrap();
                assert_eq!(y.shape(), &[1, 1, h, w], "{mode:?} {h}x{w}");
                let (lo, hi) = y.data().iter().fold((1.0f32, 0.0f32), |(a, b), &v| (a.min(v), b.max(v)));
                assert!(lo > 0.0 && hi < 1.0);
            }
        }
    }
}

#[test]
fn desk_model_keeps_full_resolution_shape() {
    let mut m = build_model::<f32>(cfg(8, UpsampleMode::TransposeDilated), 3).unwrap();
    let y = m.infer(Tensor::full(&[1, 3, 192, 720], 0.5)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 192, 720]);
}

#[test]
fn indivisible_input_is_a_shape_error() {
    let mut m = build_model::<f32>(cfg(4, UpsampleMode::TransposeDilated), 0).unwrap();
    assert!(matches!(m.infer(Tensor::full(&[1, 3, 96, 360], 0.5)), Err(Error::Shape(_))));
}

#[test]
fn one_step_lowers_the_loss_on_its_sample() {
    let mut failures = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
        let t = Tensor::uniform(&[1, 1, 32, 32], 0.0, 1.0, &mut rng);
        let mut m = build_model::<f64>(cfg(4, UpsampleMode::TransposeDilated), seed).unwrap();
        let mut opt = AdamState::new(m.params(), 1e-3);
        let mut loss_of = |m: &mut spheremap::gnet::GNetModel<f64>, step: bool| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let ti = g.input(t.clone());
            let (y, b) = m.forward(&mut g, xi, true).unwrap();
            let l = g.bce_loss(y, ti).unwrap();
            let v = g.value(l).data()[0];
            if step {
                g.backward(l).unwrap();
                m.collect_grads(&mut g, &b);
                adam_step(m.params_mut(), &mut opt).unwrap();
            }
            v
        };
        let before = loss_of(&mut m, true);
        let after = loss_of(&mut m, false);
        if after >= before {
            failures += 1;
        }
    }
    assert!(failures <= 1, "{failures} seeds failed to decrease");
}

#[test]
fn weights_round_trip_through_named_tensors() {
    let a = build_model::<f32>(cfg(4, UpsampleMode::Transpose), 5).unwrap();
    let mut b = build_model::<f32>(cfg(4, UpsampleMode::Transpose), 6).unwrap();
    assert_ne!(a.named_tensors(), b.named_tensors());
    b.load_named_tensors(&a.named_tensors()).unwrap();
    assert_eq!(a.named_tensors(), b.named_tensors());
    let other = build_model::<f32>(cfg(4, UpsampleMode::NearestUpsample), 5).unwrap();
    assert!(b.load_named_tensors(&other.named_tensors()).is_err());
}
