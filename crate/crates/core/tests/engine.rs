use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emoctx::engine::{self, BenchConfig, Features, Grid, ImageSource, RunConfig, SplitData};
use emoctx::model::{self, ArrayKind, Mode, ModelConfig, ModelParams, Prediction};
use emoctx::synthgen::{generate_in_memory, SynthOutput, SynthSpec};
use emoctx::{metrics, AggregationPolicy, Error, Split, NUM_CATEGORIES};

fn corpus(n: usize, seed: u64) -> SynthOutput {
    generate_in_memory(&SynthSpec { n_images: n, seed, ..Default::default() }).unwrap()
}

fn small_run() -> RunConfig {
    RunConfig { model: ModelConfig::profile("tiny").unwrap(), epochs: 2, batch_size: 16, ..Default::default() }
}

fn data(out: &SynthOutput, cfg: &RunConfig) -> SplitData {
    SplitData::prepare(&out.corpus, &ImageSource::Memory(&out.images), &cfg.model, AggregationPolicy::Union).unwrap()
}

fn bits(p: &ModelParams, trainable_only: bool) -> Vec<(String, Vec<u64>)> {
    p.arrays()
        .into_iter()
        .filter(|a| !trainable_only || a.kind.trainable())
        .map(|a| (a.name, a.data.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn zero_learning_rate_keeps_trainable_parameters() {
    let out = corpus(60, 1);
    let mut cfg = small_run();
    cfg.optimizer.learning_rate = 0.0;
    let d = data(&out, &cfg);
    let o = engine::train(&cfg, &d, None).unwrap();
    let init = ModelParams::init(&cfg.model, cfg.seed).unwrap();
    assert_eq!(bits(&o.params, true), bits(&init, true));
    // batch-norm running statistics are buffers, not parameters
    let running = |p: &ModelParams| p.arrays().iter().filter(|a| a.kind == ArrayKind::RunningMean).flat_map(|a| a.data.to_vec()).collect::<Vec<_>>();
    assert_ne!(running(&o.params), running(&init));
}

#[test]
fn fixed_seed_runs_match_to_the_bit() {
    let out = corpus(60, 2);
    let cfg = small_run();
    let d = data(&out, &cfg);
    let a = engine::train(&cfg, &d, None).unwrap();
    let b = engine::train(&cfg, &d, None).unwrap();
    assert_eq!(a.log[0].train_loss.total.to_bits(), b.log[0].train_loss.total.to_bits());
    assert_eq!(bits(&a.params, false), bits(&b.params, false));
    assert!(a.log.iter().all(|l| l.train_loss.total.is_finite()));
    assert_eq!(a.log.len(), cfg.epochs);
}

#[test]
fn checkpoints_and_log_are_written_every_epoch() {
    let out = corpus(60, 3);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run();
    cfg.epochs = 3;
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    let d = data(&out, &cfg);
    let o = engine::train(&cfg, &d, None).unwrap();
    let log = std::fs::read_to_string(dir.path().join(engine::LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1 + cfg.epochs);
    let (last, meta) = model::load_checkpoint(&dir.path().join(engine::LAST_CHECKPOINT)).unwrap();
    assert_eq!(meta.epoch, 3);
    assert_eq!(bits(&last, false), bits(&o.params, false));
    let (best, meta) = model::load_checkpoint(&dir.path().join(engine::BEST_CHECKPOINT)).unwrap();
    assert_eq!(meta.epoch, o.best_epoch);
    assert_eq!(bits(&best, false), bits(&o.best, false));

    let th = engine::calibrate_thresholds(&o.params, &d.val, cfg.mode).unwrap();
    let direct = engine::evaluate(&o.params, &d.test, cfg.mode, &th).unwrap();
    let reloaded = engine::evaluate(&last, &d.test, cfg.mode, &th).unwrap();
    assert_eq!(format!("{direct:?}"), format!("{reloaded:?}"));
}

#[test]
fn unwritable_checkpoint_dir_is_an_error() {
    let out = corpus(30, 3);
    let file = tempfile::NamedTempFile::new().unwrap();
    let mut cfg = small_run();
    cfg.checkpoint_dir = Some(file.path().join("sub"));
    assert!(engine::train(&cfg, &data(&out, &cfg), None).is_err());
}

#[test]
fn divergence_reports_epoch_and_batch() {
    let out = corpus(40, 4);
    let mut cfg = small_run();
    cfg.optimizer.learning_rate = 1e12;
    match engine::train(&cfg, &data(&out, &cfg), None) {
        Err(Error::NonFiniteLoss { epoch, .. }) => assert!(epoch >= 1),
        Err(Error::NonFinite { .. }) => {}
        other => panic!("expected a non-finite error, got {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn batch_weights_follow_batch_content() {
    let out = corpus(60, 5);
    let cfg = small_run();
    let d = data(&out, &cfg);
    let mut absent = 0;
    let mut seen = 0;
    let mut obs = |b: &engine::BatchInfo| {
        seen += 1;
        assert!(b.size >= 2);
        for w in b.weights {
            assert!(w <= 1.0 / cfg.loss.c.ln() && w >= 1.0 / (cfg.loss.c + 1.0).ln());
        }
        absent += b.weights.iter().filter(|&&w| w == 1.0 / cfg.loss.c.ln()).count();
    };
    engine::train(&cfg, &d, Some(&mut obs)).unwrap();
    let n = d.train.len();
    assert_eq!(seen, cfg.epochs * n.div_ceil(cfg.batch_size));
    // synthgen uses 8 of 26 categories, so most are absent from every batch
    assert!(absent >= seen * 18);
}

#[test]
fn oracle_predictions_score_perfectly() {
    let out = corpus(60, 6);
    let cfg = small_run();
    let d = data(&out, &cfg);
    let preds: Vec<Prediction> = d.test.disc.iter().zip(&d.test.cont).map(|(s, c)| Prediction { scores: *s, dims: *c }).collect();
    let th = [0.5; NUM_CATEGORIES];
    let r = engine::evaluate_predictions(&preds, &d.test, &th).unwrap();
    assert_eq!(r.ap.mean, 1.0);
    assert_eq!(r.aae.mean, 0.0);
    assert_eq!(r.median_jaccard, 1.0);
}

#[test]
fn body_mode_ignores_context_pixels() {
    let out = corpus(60, 7);
    let mut cfg = small_run();
    cfg.epochs = 1;
    let d = data(&out, &cfg);
    let trained = engine::train(&cfg, &d, None).unwrap().params;
    let mut scrambled = d.test.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for c in &mut scrambled.context {
        c.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let th = [0.0; NUM_CATEGORIES];
    let a = engine::evaluate(&trained, &d.test, Mode::Body, &th).unwrap();
    let b = engine::evaluate(&trained, &scrambled, Mode::Body, &th).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    let a = engine::predict(&trained, &d.test, Mode::BodyImage).unwrap();
    let b = engine::predict(&trained, &scrambled, Mode::BodyImage).unwrap();
    assert_ne!(a, b);
}

#[test]
fn compare_runs_body_mode_like_a_plain_run() {
    let out = corpus(60, 8);
    let mut cfg = small_run();
    let d = data(&out, &cfg);
    let cmp = engine::compare_context_modes(&cfg, &d).unwrap();
    cfg.mode = Mode::Body;
    let plain = engine::train(&cfg, &d, None).unwrap();
    assert_eq!(format!("{:?}", cmp.body_log), format!("{:?}", plain.log));
    let th = engine::calibrate_thresholds(&plain.best, &d.val, Mode::Body).unwrap();
    let r = engine::evaluate(&plain.best, &d.test, Mode::Body, &th).unwrap();
    assert_eq!(format!("{:?}", cmp.body), format!("{r:?}"));
    let delta = cmp.ap_delta();
    for i in 0..NUM_CATEGORIES {
        let want = cmp.body_image.ap.per_category[i] - cmp.body.ap.per_category[i];
        assert!(delta[i].to_bits() == want.to_bits() || (delta[i].is_nan() && want.is_nan()));
    }
    let dir = tempfile::tempdir().unwrap();
    cmp.write(dir.path()).unwrap();
    assert!(std::fs::read_dir(dir.path()).unwrap().count() > 0);
}

#[test]
fn grid_search_scores_every_point() {
    let out = corpus(60, 9);
    let mut cfg = small_run();
    cfg.epochs = 1;
    let d = data(&out, &cfg);
    let grid = Grid { lambda_cont: vec![0.5, 1.0], theta: vec![0.1], c: vec![1.2, 1.5] };
    let (results, best) = engine::grid_search(&cfg, &grid, &d).unwrap();
    assert_eq!(results.len(), 4);
    for r in &results {
        assert!((r.score - (r.val_map - r.val_aae)).abs() < 1e-15);
        assert!(r.score <= results[best].score);
    }
    let points: BTreeSet<(u64, u64)> = results.iter().map(|r| (r.lambda_cont.to_bits(), r.c.to_bits())).collect();
    assert_eq!(points.len(), 4);
    let dir = tempfile::tempdir().unwrap();
    engine::write_grid(&results, &dir.path().join("grid.csv")).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("grid.csv")).unwrap().lines().count(), 5);
}

fn one_hot(out: &SynthOutput) -> Features {
    out.corpus
        .persons
        .values()
        .map(|p| {
            let l = p.label(AggregationPolicy::Union).unwrap();
            (p.person_id.clone(), l.discrete.iter().chain(&l.continuous).copied().collect())
        })
        .collect()
}

fn noise(out: &SynthOutput, dim: usize, seed: u64) -> Features {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.corpus.persons.keys().map(|id| (id.clone(), (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())).collect()
}

#[test]
fn feature_bench_on_label_copies_is_perfect() {
    let out = corpus(200, 10);
    let r = engine::feature_bench(&one_hot(&out), &out.corpus, AggregationPolicy::Union, Split::Test, &BenchConfig::default()).unwrap();
    assert_eq!(r.ap.mean, 1.0);
    assert!(r.aae.mean < 1e-3, "{}", r.aae.mean);
}

#[test]
fn feature_bench_on_noise_is_at_prevalence() {
    let out = corpus(1500, 11);
    let r = engine::feature_bench(&noise(&out, 8, 0), &out.corpus, AggregationPolicy::Union, Split::Test, &BenchConfig::default()).unwrap();
    let labels = out.corpus.labels(Some(Split::Test), AggregationPolicy::Union).unwrap();
    let prevalence: Vec<f64> = (0..NUM_CATEGORIES)
        .filter(|&i| !r.ap.per_category[i].is_nan())
        .map(|i| labels.iter().filter(|l| l.discrete[i] >= 0.5).count() as f64 / labels.len() as f64)
        .collect();
    let baseline = prevalence.iter().sum::<f64>() / prevalence.len() as f64;
    assert!((r.ap.mean - baseline).abs() <= 0.05, "AP {} vs baseline {baseline}", r.ap.mean);
    let random = metrics::random_ranking_ap(labels.len(), labels.len() / 2);
    assert!((random - 0.5).abs() < 0.05);
}

#[test]
fn informative_block_never_lowers_training_ap() {
    let out = corpus(200, 12);
    let cfg = BenchConfig { iterations: 2000, ..Default::default() };
    let n = noise(&out, 6, 1);
    let both = engine::concat_features(&[&n, &one_hot(&out)]).unwrap();
    let policy = AggregationPolicy::Union;
    let alone = engine::feature_bench(&n, &out.corpus, policy, Split::Train, &cfg).unwrap();
    let joined = engine::feature_bench(&both, &out.corpus, policy, Split::Train, &cfg).unwrap();
    for i in 0..NUM_CATEGORIES {
        let (a, j) = (alone.ap.per_category[i], joined.ap.per_category[i]);
        assert!(a.is_nan() || j >= a, "category {i}: {j} < {a}");
    }
    assert_eq!(joined.dim, 6 + NUM_CATEGORIES + 3);
}

#[test]
fn feature_bench_rejects_bad_inputs() {
    let out = corpus(40, 13);
    let mut f = noise(&out, 3, 2);
    let policy = AggregationPolicy::Union;
    let first = f.keys().next().unwrap().clone();
    f.get_mut(&first).unwrap().push(0.0);
    assert!(engine::feature_bench(&f, &out.corpus, policy, Split::Test, &BenchConfig::default()).is_err());
    let mut f = noise(&out, 3, 2);
    let trainee = out.corpus.persons_in(Split::Train).next().unwrap().person_id.clone();
    f.remove(&trainee);
    assert!(engine::feature_bench(&f, &out.corpus, policy, Split::Test, &BenchConfig::default()).is_err());
}
