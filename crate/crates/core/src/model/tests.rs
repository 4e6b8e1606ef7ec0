use super::*;
use crate::objectives::{batch_loss, category_weights, ContLoss, LossConfig};
use rand::Rng;

fn small_config() -> ModelConfig {
    let bb = BackboneConfig {
        n_conv_layers: 4,
        kernel_length: 3,
        channel_schedule: vec![3, 4, 4, 5],
        downsample_layers: [1].into(),
        input_size: (8, 6),
    };
    ModelConfig { body: bb.clone(), context: BackboneConfig { input_size: (7, 9), channel_schedule: vec![4, 3, 5, 6], ..bb } }
}

fn random_inputs(cfg: &BackboneConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..cfg.input_len()).map(|_| rng.random_range(-0.5..0.5)).collect()).collect()
}

fn randomize(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
    for a in params.arrays_mut() {
        match a.kind {
            ArrayKind::RunningVar => a.data.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0)),
            ArrayKind::BnScale => a.data.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5)),
            _ => a.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5)),
        }
    }
}

struct Batch {
    body: Vec<Vec<f64>>,
    context: Vec<Vec<f64>>,
    disc: Vec<[f64; NUM_CATEGORIES]>,
    cont: Vec<[f64; NUM_DIMS]>,
}

fn loss_of(params: &ModelParams, b: &Batch, mode: Mode, cfg: &LossConfig, w: &[f64; NUM_CATEGORIES]) -> f64 {
    let (preds, _) = forward_train(params, b.body.clone(), b.context.clone(), mode).unwrap();
    let s: Vec<_> = preds.iter().map(|p| p.scores).collect();
    let d: Vec<_> = preds.iter().map(|p| p.dims).collect();
    batch_loss(&s, &d, &b.disc, &b.cont, cfg, w).parts.total
}

/// Worst norm-based relative error between the analytic gradient and
/// central differences, per trainable array.
fn gradient_errors(mode: Mode, cont_loss: ContLoss) -> Vec<(String, f64)> {
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut params = ModelParams::init(&config, 1).unwrap();
    randomize(&mut params, &mut rng);
    let b = Batch {
        body: random_inputs(&config.body, 2, &mut rng),
        context: random_inputs(&config.context, 2, &mut rng),
        disc: (0..2).map(|_| [(); NUM_CATEGORIES].map(|_| (rng.random::<f64>() < 0.3) as u8 as f64)).collect(),
        cont: (0..2).map(|_| [(); NUM_DIMS].map(|_| rng.random::<f64>())).collect(),
    };
    let cfg = LossConfig { cont_loss, lambda_cont: 0.7, ..Default::default() };
    let w = category_weights(&b.disc, cfg.c).unwrap();

    let (preds, cache) = forward_train(&params, b.body.clone(), b.context.clone(), mode).unwrap();
    let s: Vec<_> = preds.iter().map(|p| p.scores).collect();
    let d: Vec<_> = preds.iter().map(|p| p.dims).collect();
    let bl = batch_loss(&s, &d, &b.disc, &b.cont, &cfg, &w);
    let grads = backward(&params, &cache, &bl.grad_scores, &bl.grad_dims);

    let h = 1e-5;
    let names: Vec<(String, usize)> = params.arrays().iter().filter(|a| a.kind.trainable()).map(|a| (a.name.clone(), a.data.len())).collect();
    let analytic: BTreeMap<String, Vec<f64>> = grads.arrays().into_iter().map(|a| (a.name, a.data.to_vec())).collect();
    let mut out = Vec::new();
    for (name, len) in names {
        if mode == Mode::Body && name.starts_with("context.") {
            continue;
        }
        let mut numeric = vec![0.0; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let probe = |delta: f64| {
                let mut p = params.clone();
                p.arrays_mut().into_iter().find(|a| a.name == name).unwrap().data[i] += delta;
                loss_of(&p, &b, mode, &cfg, &w)
            };
            *slot = (probe(h) - probe(-h)) / (2.0 * h);
        }
        let a = &analytic[&name];
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push((name, if scale < 1e-10 { diff } else { diff / scale }));
    }
    out
}

#[test]
fn gradients_match_finite_differences() {
    for (mode, loss) in [(Mode::BodyImage, ContLoss::L2Margin), (Mode::Body, ContLoss::SmoothL1)] {
        for (name, err) in gradient_errors(mode, loss) {
            assert!(err <= 1e-3, "{mode} {name}: {err}");
        }
    }
}

#[test]
fn zero_weights_give_bias_scores() {
    let config = small_config();
    let mut p = ModelParams::zeros(&config).unwrap();
    for (i, b) in p.head_disc.bias.iter_mut().enumerate() {
        *b = i as f64 * 0.1 - 1.0;
    }
    p.head_cont.bias = vec![0.2, 0.5, 0.9];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3 {
        let body = random_inputs(&config.body, 1, &mut rng).remove(0);
        let ctx = random_inputs(&config.context, 1, &mut rng).remove(0);
        let pred = forward(&p, &body, &ctx, Mode::BodyImage).unwrap();
        assert_eq!(pred.scores.to_vec(), p.head_disc.bias);
        assert_eq!(pred.dims.to_vec(), p.head_cont.bias);
    }
}

#[test]
fn body_mode_ignores_context() {
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = ModelParams::init(&config, 9).unwrap();
    let body = random_inputs(&config.body, 1, &mut rng).remove(0);
    let ctx = random_inputs(&config.context, 1, &mut rng).remove(0);
    let a = forward(&p, &body, &ctx, Mode::Body).unwrap();
    for layer in p.context.iter_mut() {
        layer.weight.iter_mut().for_each(|w| *w = rng.random_range(-3.0..3.0));
    }
    let other = random_inputs(&config.context, 1, &mut rng).remove(0);
    assert_eq!(a, forward(&p, &body, &other, Mode::Body).unwrap());
    // masked features equal zero features: same result without a context input
    assert_eq!(a, forward(&p, &body, &[], Mode::Body).unwrap());
    assert_ne!(a, forward(&p, &body, &other, Mode::BodyImage).unwrap());
}

#[test]
fn inference_is_bit_stable() {
    let config = small_config();
    let p = ModelParams::init(&config, 5).unwrap();
    let q = ModelParams::init(&config, 5).unwrap();
    assert_eq!(p, q);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let body = random_inputs(&config.body, 1, &mut rng).remove(0);
    let ctx = random_inputs(&config.context, 1, &mut rng).remove(0);
    let a = forward(&p, &body, &ctx, Mode::BodyImage).unwrap();
    let b = forward(&q, &body, &ctx, Mode::BodyImage).unwrap();
    assert_eq!(a.scores.map(f64::to_bits), b.scores.map(f64::to_bits));
}

#[test]
fn constant_input_identity_conv_gives_constant_features() {
    let cfg = BackboneConfig {
        n_conv_layers: 4,
        kernel_length: 3,
        channel_schedule: vec![3, 6, 6, 4],
        downsample_layers: [0, 3].into(),
        input_size: (9, 7),
    };
    let mut layers = conv_layers_zero(&cfg);
    for (layer, g) in layers.iter_mut().zip(cfg.geometries()) {
        for co in 0..g.cout {
            layer.weight[(co * g.cin + co % g.cin) * g.k + g.k / 2] = 1.0;
        }
    }
    let x = vec![0.3; cfg.input_len()];
    let f = backbone(&cfg, &layers, &x, "body").unwrap();
    assert_eq!(f.len(), 4);
    let expect = 0.3 / (1.0 + BN_EPS).powf(2.0);
    for v in f {
        assert!((v - expect).abs() < 1e-12);
    }
}

#[test]
fn feature_length_is_last_channel_count() {
    for (w, h) in [(16, 16), (17, 9), (5, 31), (1, 1)] {
        let mut cfg = ModelConfig::profile("tiny").unwrap().body;
        cfg.input_size = (w, h);
        let layers = conv_layers_zero(&cfg);
        let f = backbone(&cfg, &layers, &vec![0.1; cfg.input_len()], "body").unwrap();
        assert_eq!(f.len(), cfg.out_channels());
    }
}

#[test]
fn shape_and_config_errors() {
    let config = small_config();
    let p = ModelParams::zeros(&config).unwrap();
    let err = forward(&p, &[0.0; 5], &[], Mode::Body).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    let mut bad = config.clone();
    bad.body.n_conv_layers = 3;
    assert!(ModelParams::zeros(&bad).is_err());
    let mut bad = config;
    bad.body.channel_schedule.pop();
    assert!(ModelParams::zeros(&bad).is_err());
}

#[test]
fn non_finite_activation_names_the_layer() {
    let config = small_config();
    let mut p = ModelParams::init(&config, 2).unwrap();
    p.body[2].gamma[0] = f64::INFINITY;
    let x = vec![0.2; config.body.input_len()];
    match forward(&p, &x, &[], Mode::Body) {
        Err(Error::NonFinite { layer }) => assert_eq!(layer, "body.conv02"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn parameter_count_matches_registry() {
    for cfg in [small_config(), ModelConfig::profile("tiny").unwrap(), ModelConfig::profile("desk").unwrap()] {
        let p = ModelParams::zeros(&cfg).unwrap();
        assert_eq!(p.num_parameters(), cfg.num_parameters());
        let names: BTreeSet<String> = p.arrays().into_iter().map(|a| a.name).collect();
        assert_eq!(names.len(), p.arrays().len());
        for a in p.arrays() {
            assert_eq!(a.shape.iter().product::<usize>(), a.data.len(), "{}", a.name);
        }
    }
    let p = ModelParams::zeros(&ModelConfig::default()).unwrap();
    let shape = |n: &str| p.arrays().into_iter().find(|a| a.name == n).unwrap().shape;
    assert_eq!(shape("fusion.fc1.weight"), vec![256, 256]);
    assert_eq!(shape("fusion.head_disc.weight"), vec![26, 256]);
    assert_eq!(shape("fusion.head_cont.weight"), vec![3, 256]);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let config = small_config();
    let mut p = ModelParams::init(&config, 8).unwrap();
    p.body[0].running_var[1] = 1.0 / 3.0;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &p, 4, 77, serde_json::json!({"mode": "B+I"})).unwrap();
    let (q, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(meta.epoch, 4);
    assert_eq!(meta.seed, 77);
    for (a, b) in p.arrays().iter().zip(q.arrays().iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.data.iter().zip(b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    std::fs::write(dir.path().join("junk"), b"not a checkpoint").unwrap();
    assert!(matches!(load_checkpoint(&dir.path().join("junk")), Err(Error::Checkpoint { .. })));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(dir.path().join("cut"), &bytes[..bytes.len() - 8]).unwrap();
    assert!(load_checkpoint(&dir.path().join("cut")).is_err());
}

#[test]
fn import_pretrained_contract() {
    let config = small_config();
    let p = ModelParams::init(&config, 1).unwrap();
    let src_model = ModelParams::init(&config, 2).unwrap();
    let source: BTreeMap<String, (Vec<usize>, Vec<f64>)> =
        src_model.arrays().into_iter().map(|a| (a.name, (a.shape, a.data.to_vec()))).collect();

    let (same, report) = import_pretrained(&p, &source, &BTreeMap::new()).unwrap();
    assert_eq!(same, p);
    assert!(report.matched.is_empty());

    let full: BTreeMap<String, String> = source.keys().map(|k| (k.clone(), k.clone())).collect();
    let (copied, report) = import_pretrained(&p, &source, &full).unwrap();
    assert_eq!(copied, src_model);
    assert!(report.unmatched.is_empty());

    let partial = BTreeMap::from([("body.conv00.weight".to_string(), "body.conv00.weight".to_string())]);
    let (mixed, report) = import_pretrained(&p, &source, &partial).unwrap();
    assert_eq!(mixed.body[0].weight, src_model.body[0].weight);
    assert_eq!(mixed.body[1], p.body[1]);
    assert_eq!(report.matched, vec!["body.conv00.weight"]);

    let mut conflict = partial.clone();
    conflict.insert("body.conv01.weight".into(), "context.conv01.weight".into());
    match import_pretrained(&p, &source, &conflict) {
        Err(Error::Shape(m)) => assert!(m.contains("body.conv01.weight") && m.contains("context.conv01.weight"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn running_stats_move_toward_batch() {
    let config = small_config();
    let mut p = ModelParams::init(&config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let body = random_inputs(&config.body, 4, &mut rng);
    let ctx = random_inputs(&config.context, 4, &mut rng);
    let (_, cache) = forward_train(&p, body, ctx, Mode::Body).unwrap();
    let before = p.clone();
    update_running_stats(&mut p, &cache);
    assert_ne!(p.body[0].running_mean, before.body[0].running_mean);
    // the context branch did not run in body-only mode
    assert_eq!(p.context, before.context);
    assert!(p.check_finite().is_ok());
}
