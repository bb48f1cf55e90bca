use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn toy_config(k: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneProfile::Toy,
        input_size: (64, 32),
        k,
        reduction: 4,
        num_identities: 4,
        num_clothes: 8,
        t2mgs: true,
    }
}

/// One conv block: 12x8 input to an 8x6x4 map.
fn tiny_config(t2mgs: bool) -> ModelConfig {
    ModelConfig {
        backbone: BackboneProfile::Custom {
            blocks: vec![ConvSpec {
                in_channels: 3,
                out_channels: 8,
                kernel: (3, 3),
                stride: (2, 2),
                padding: (1, 1),
            }],
        },
        input_size: (12, 8),
        k: 3,
        reduction: 4,
        num_identities: 3,
        num_clothes: 5,
        t2mgs,
    }
}

fn images(n: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((n, 3, h, w), |_| rng.random_range(0.0..1.0))
}

#[test]
fn toy_backbone_shape() {
    let model = Model::new(toy_config(6), 0).unwrap();
    let f = model.extract_features(&images(3, 64, 32, 1)).unwrap();
    assert_eq!(f.dim(), (3, 64, 12, 4));
}

#[test]
fn indivisible_k_fails_at_construction() {
    assert!(matches!(Model::new(toy_config(5), 0), Err(Error::Config(_))));
    for k in [1, 2, 3, 4, 6, 12] {
        assert!(Model::new(toy_config(k), 0).is_ok());
    }
}

#[test]
fn wrong_image_size_rejected() {
    let model = Model::new(toy_config(6), 0).unwrap();
    assert!(matches!(model.extract_features(&images(1, 32, 32, 0)), Err(Error::Shape(_))));
}

#[test]
fn head_shapes() {
    let mut model = Model::new(toy_config(6), 0).unwrap();
    let (out, _) = model.forward_train(&images(8, 64, 32, 2)).unwrap();
    assert_eq!(out.id_logits_g.dim(), (8, 4));
    assert_eq!(out.id_logits_p.as_ref().unwrap().dim(), (8, 4));
    assert_eq!(out.clothes_logits.dim(), (8, 8));
    assert_eq!(out.parts.dim(), (8, 6, 64));
    let q = out.quality.as_ref().unwrap();
    assert!(q.iter().all(|&v| v > 0.0 && v < 1.0));
    let b = out.bundle(3).unwrap();
    assert_eq!(b.parts.len(), 6);
    assert_eq!(b.parts[0].dim(), (64, 2, 4));
    let fused = ops::fuse_global(&b.weighted_parts).unwrap();
    assert_eq!(Some(fused), b.global_weighted);
}

#[test]
fn frozen_eval_is_pure() {
    let model = Model::new(toy_config(6), 4).unwrap();
    let x = images(4, 64, 32, 3);
    let (a, _) = model.forward(&x, Mode::Eval).unwrap();
    let (b, _) = model.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a.id_logits_g, b.id_logits_g);
    assert_eq!(a.global_weighted, b.global_weighted);
    assert_eq!(model.embed(&x, 0.35).unwrap(), model.embed(&x, 0.35).unwrap());
}

#[test]
fn train_forward_updates_running_stats_only_when_asked() {
    let mut model = Model::new(toy_config(6), 4).unwrap();
    let before = model.clone();
    let x = images(4, 64, 32, 3);
    model.forward(&x, Mode::Train).unwrap();
    assert_eq!(model, before);
    model.forward_train(&x).unwrap();
    assert_ne!(model.quality[0].bn.running_mean, before.quality[0].bn.running_mean);
}

#[test]
fn zero_threshold_matches_unscreened_path() {
    let mut model = Model::new(toy_config(6), 5).unwrap();
    // move running stats away from their initial values
    for s in 0..3 {
        model.forward_train(&images(6, 64, 32, 10 + s)).unwrap();
    }
    let x = images(5, 64, 32, 20);
    let (out, _) = model.forward(&x, Mode::Eval).unwrap();
    let screened = model.embed(&x, 0.0).unwrap();
    assert_eq!(&screened, out.global_weighted.as_ref().unwrap());
    assert!(model.embed(&x, 1.0).unwrap().iter().all(|&v| v == 0.0));
    assert!(model.embed(&x, 1.5).is_err());
}

#[test]
fn baseline_embeds_pooled_feature() {
    let mut cfg = toy_config(6);
    cfg.t2mgs = false;
    let model = Model::new(cfg, 1).unwrap();
    assert!(model.quality.is_empty());
    let x = images(2, 64, 32, 1);
    let (out, _) = model.forward(&x, Mode::Eval).unwrap();
    assert!(out.id_logits_p.is_none() && out.global_weighted.is_none());
    assert_eq!(model.embed(&x, 0.35).unwrap(), out.global);
}

#[test]
fn non_finite_activation_names_partition() {
    let model = Model::new(tiny_config(true), 0).unwrap();
    let mut f = Array4::zeros((1, 8, 6, 4));
    f[[0, 2, 5, 1]] = f64::NAN;
    match model.forward_from_features(f, Mode::Eval) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("partition 2"), "{msg}"),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

struct Probes {
    logits_g: Array2<f64>,
    logits_p: Array2<f64>,
    clothes: Array2<f64>,
    parts: Array3<f64>,
}

fn probe_loss(out: &ForwardOutput, p: &Probes) -> f64 {
    let mut l = (&out.id_logits_g * &p.logits_g).sum() + (&out.clothes_logits * &p.clothes).sum() + (&out.parts * &p.parts).sum();
    if let Some(lp) = &out.id_logits_p {
        l += (lp * &p.logits_p).sum();
    }
    l
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    // biases feeding batch norm have an exactly zero gradient
    diff / na.max(nb).max(1e-6)
}

fn full_model_gradcheck(t2mgs: bool) {
    let mut model = Model::new(tiny_config(t2mgs), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for q in &mut model.quality {
        q.bn.gamma.mapv_inplace(|_| rng.random_range(0.5..2.0));
        q.bn.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    for (_, p) in model.params_mut() {
        if p.len() < 10 {
            continue;
        }
        // bigger head weights so the logit paths carry signal
        for v in p.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let x = images(4, 12, 8, 13);
    let n = 4;
    let probes = Probes {
        logits_g: Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0)),
        logits_p: Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0)),
        clothes: Array2::from_shape_fn((n, 5), |_| rng.random_range(-1.0..1.0)),
        parts: Array3::from_shape_fn((n, 3, 8), |_| rng.random_range(-1.0..1.0)),
    };
    let (out, cache) = model.forward(&x, Mode::Train).unwrap();
    let grads = model
        .backward(
            &out,
            &cache,
            &OutputGrads {
                parts: Some(probes.parts.clone()),
                id_logits_g: Some(probes.logits_g.clone()),
                id_logits_p: Some(probes.logits_p.clone()),
                clothes_head: Some(probes.clothes.clone()),
                clothes_features: Some(probes.clothes.clone()),
                ..Default::default()
            },
        )
        .unwrap();
    let analytic: Vec<Vec<f64>> = grads.flat().into_iter().map(<[f64]>::to_vec).collect();
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let h = 1e-5;
    for (j, name) in names.iter().enumerate() {
        let len = analytic[j].len();
        let mut numeric = vec![0.0; len];
        for e in 0..len {
            let mut plus = model.clone();
            plus.params_mut()[j].1[e] += h;
            let mut minus = model.clone();
            minus.params_mut()[j].1[e] -= h;
            let lp = probe_loss(&plus.forward(&x, Mode::Train).unwrap().0, &probes);
            let lm = probe_loss(&minus.forward(&x, Mode::Train).unwrap().0, &probes);
            numeric[e] = (lp - lm) / (2.0 * h);
        }
        let err = rel_err(&analytic[j], &numeric);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    full_model_gradcheck(true);
}

#[test]
fn baseline_gradients_match_finite_differences() {
    full_model_gradcheck(false);
}
