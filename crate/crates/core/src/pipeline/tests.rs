use super::*;
use crate::dataset::Case;
use crate::losses::{Interval, LossWeights};
use crate::model::{load_checkpoint, Model, ModelKind, ModelSpec, NetworkConfig};
use crate::nn::Tensor;
use crate::phantom::{generate_case, PhantomConfig};
use crate::proposal::{propose, VesselnessConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_network(f0: usize, n: usize) -> NetworkConfig {
    NetworkConfig {
        base_width: f0,
        chunk_size: [n; 3],
        ..Default::default()
    }
}

fn toy_samples(cases: u64, chunk: usize) -> Vec<Sample> {
    let cfg = PhantomConfig {
        grid_size: 32,
        lesion_burden: [0.1, 0.3],
        healthy_lobe_prob: 0.0,
        ..Default::default()
    };
    let mut out = Vec::new();
    for i in 0..cases {
        let case = Case::from_phantom(format!("c{i}"), generate_case(&cfg, i).unwrap());
        let prop = propose(&case.image, &case.lobe_map, &VesselnessConfig::default()).unwrap();
        out.extend(build_samples(&case, &prop, [chunk; 3]).unwrap());
    }
    out
}

fn random_sample(rng: &mut ChaCha8Rng, n: usize) -> Sample<f64> {
    let v = n * n * n;
    let mask: Vec<bool> = (0..v).map(|i| (i * 7) % 11 != 0).collect();
    Sample {
        case_id: "toy".into(),
        lobe_id: 1,
        image: Tensor::from_vec(
            1,
            [n; 3],
            mask.iter().map(|&m| if m { rng.gen_range(0.0..1.0) } else { 0.0 }).collect(),
        )
        .unwrap(),
        candidates: mask.iter().map(|&m| m && rng.gen_bool(0.5)).collect(),
        vessels: mask.iter().map(|&m| m && rng.gen_bool(0.2)).collect(),
        mask,
        // Far from anything the initial map produces, so the term is active.
        interval: Interval::new(0.9, 0.95).unwrap(),
        positive: true,
    }
}

/// Moves every pre-activation off the ReLU kink that zero biases and
/// zero-masked inputs would otherwise sit on.
fn jitter_biases(model: &mut Model<f64>, rng: &mut ChaCha8Rng) {
    for p in model.params_mut() {
        if p.name.ends_with("bias") {
            for v in &mut p.value {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
}

#[test]
fn samples_carry_calibrated_intervals_and_lobe_restricted_masks() {
    let samples = toy_samples(1, 16);
    assert!(!samples.is_empty());
    for s in &samples {
        assert_eq!(s.image.dims(), [16; 3]);
        assert!(s.interval.lower <= s.interval.upper);
        for i in 0..s.mask.len() {
            assert!(!s.candidates[i] || s.mask[i]);
            assert!(!s.vessels[i] || s.mask[i]);
            if !s.mask[i] {
                assert_eq!(s.image.data()[i], 0.0);
            }
        }
    }
}

#[test]
fn identity_transform_has_zero_equivariance_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..20 {
        let spec = ModelSpec {
            kind: ModelKind::Regression,
            attention: seed % 2 == 0,
        };
        let mut model: Model<f64> = Model::new(&toy_network(2, 8), spec, seed).unwrap();
        let s = random_sample(&mut rng, 8);
        let loss = regression_step(&mut model, &s, &LossWeights::default(), Some(&AffineTransform::identity()), false)
            .unwrap();
        assert!(loss.equivariance <= 1e-6, "{}", loss.equivariance);
    }
}

/// Forward-only total loss with the attention input built from `base`'s
/// encoder features: the function whose gradient training follows, since
/// those features are detached from back-propagation.
fn detached_total_loss(model: &Model<f64>, base: &Model<f64>, s: &Sample<f64>, t: &AffineTransform) -> f64 {
    let weights = LossWeights::default();
    let att = model.attention.as_ref().unwrap();
    let refined = |x: &Tensor<f64>| {
        let y = model.unet.forward(x).unwrap().dram.unwrap();
        let frozen = base.unet.forward(x).unwrap();
        att.forward(x, frozen.enc1(), frozen.enc2(), &y).unwrap().refined
    };
    let q = refined(&s.image);
    let p = crate::model::lobe_mean_pool(&q, &s.mask, crate::model::LESION).unwrap();
    let reg = crate::losses::interval_regression_loss(p, &s.interval).unwrap().0;
    let t_star = make_pseudo_labels(&q, &s.candidates, &s.vessels, &s.mask).unwrap();
    let refine = crate::losses::bootstrap_loss(&q, &t_star, weights.bootstrap_beta).unwrap();
    let moved = refined(&t.apply(&s.image, 8));
    let er = crate::losses::equivariance_loss(&crate::nn::resize_trilinear(&moved, t.rotated_dims(q.dims())), &t.rotate(&q))
        .unwrap();
    crate::losses::total_loss(reg, er, refine, &weights)
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = ModelSpec {
        kind: ModelKind::Regression,
        attention: true,
    };
    let mut model: Model<f64> = Model::new(&toy_network(2, 8), spec, 3).unwrap();
    jitter_biases(&mut model, &mut rng);
    let s = random_sample(&mut rng, 8);
    let weights = LossWeights::default();
    let t = AffineTransform {
        scale: [1.1, 0.9, 1.0],
        quarter_turns: 1,
        axes: [0, 2],
    };
    model.zero_grad();
    let base = regression_step(&mut model, &s, &weights, Some(&t), true).unwrap();
    assert!(base.regression > 0.0 && base.equivariance > 0.0 && base.refinement > 0.0);
    assert!((detached_total_loss(&model, &model, &s, &t) - base.total).abs() < 1e-12);

    let h = 1e-6;
    let count = model.params().len();
    for _ in 0..10 {
        let pi = rng.gen_range(0..count);
        let k = rng.gen_range(0..model.params()[pi].len());
        let analytic = model.params()[pi].grad[k];
        let mut plus = model.clone();
        plus.params_mut()[pi].value[k] += h;
        let mut minus = model.clone();
        minus.params_mut()[pi].value[k] -= h;
        let numeric = (detached_total_loss(&plus, &model, &s, &t) - detached_total_loss(&minus, &model, &s, &t)) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { (analytic - numeric).abs() / scale } else { 0.0 };
        assert!(
            rel < 1e-3,
            "{}[{k}]: {analytic} vs {numeric}",
            model.params()[pi].name
        );
    }
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let samples = toy_samples(1, 16);
    let net = toy_network(2, 16);
    let spec = ModelSpec {
        kind: ModelKind::Regression,
        attention: false,
    };
    let cfg = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let out = train(
        &samples,
        &net,
        spec,
        Variant::default(),
        &cfg,
        Some(RunOutput {
            dir: dir.path(),
            echo: "x",
        }),
    )
    .unwrap();
    let (loaded, _) = load_checkpoint(&checkpoint_path(dir.path(), 0)).unwrap();
    let init: Model<f32> = Model::new(&net, spec, cfg.seed).unwrap();
    assert_eq!(loaded, init);
    assert_eq!(out.model, init);
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log, "step,epoch,loss_total,loss_reg,loss_er,loss_ref\n");
}

#[test]
fn training_is_deterministic_and_wires_the_variant() {
    let samples = toy_samples(1, 16);
    let net = toy_network(2, 16);
    let spec = ModelSpec {
        kind: ModelKind::Regression,
        attention: true,
    };
    let variant = Variant {
        er: true,
        refine: true,
        attention: true,
    };
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let a = train(&samples, &net, spec, variant, &cfg, None).unwrap();
    let b = train(&samples, &net, spec, variant, &cfg, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    assert_eq!(a.log.len(), samples.len());
    assert!(a.log.iter().any(|r| r.loss_er > 0.0));
    assert!(a.log.iter().any(|r| r.loss_ref > 0.0));

    let plain = train(
        &samples,
        &net,
        ModelSpec {
            kind: ModelKind::Regression,
            attention: false,
        },
        Variant::default(),
        &cfg,
        None,
    )
    .unwrap();
    assert!(plain.log.iter().all(|r| r.loss_er == 0.0 && r.loss_ref == 0.0));
}

#[test]
fn equivariance_training_reduces_the_equivariance_term() {
    let samples: Vec<Sample> = toy_samples(1, 16).into_iter().take(1).collect();
    let net = toy_network(4, 16);
    let spec = ModelSpec {
        kind: ModelKind::Regression,
        attention: false,
    };
    let variant = Variant {
        er: true,
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: 50,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let out = train(&samples, &net, spec, variant, &cfg, None).unwrap();
    let er: Vec<f64> = out.log.iter().map(|r| r.loss_er).collect();
    assert_eq!(er.len(), 50);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&er[..10]), mean(&er[40..]));
    assert!(last < first, "running mean {first} -> {last}");
}

#[test]
fn divergence_is_reported_with_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let samples = toy_samples(1, 16);
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 1e30,
        ..Default::default()
    };
    let err = train(
        &samples,
        &toy_network(2, 16),
        ModelSpec {
            kind: ModelKind::Regression,
            attention: false,
        },
        Variant::default(),
        &cfg,
        Some(RunOutput {
            dir: dir.path(),
            echo: "",
        }),
    )
    .err()
    .expect("diverges");
    let crate::Error::Divergence { step, .. } = err else {
        panic!("unexpected error {err}");
    };
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), step + 1);
}

#[test]
fn classifier_training_runs_for_both_heads() {
    let samples = toy_samples(1, 16);
    for kind in [ModelKind::DenseClassifier, ModelKind::SlimClassifier] {
        let out = train(
            &samples,
            &toy_network(2, 16),
            ModelSpec { kind, attention: false },
            Variant::default(),
            &TrainConfig {
                epochs: 1,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        assert!(out.log.iter().all(|r| r.loss_reg > 0.0 && r.loss_er == 0.0));
    }
    assert!(train(
        &samples,
        &toy_network(2, 16),
        ModelSpec {
            kind: ModelKind::DenseClassifier,
            attention: false
        },
        Variant {
            er: true,
            ..Default::default()
        },
        &TrainConfig::default(),
        None
    )
    .is_err());
}

