use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::data::{Dataset, SplitData};
use crate::error::{Error, Result};
use crate::metrics::{self, AaeReport, ApReport, SampleResult};
use crate::model::{self, save_checkpoint, ArrayKind, Mode, ModelParams, Prediction};
use crate::objectives::{batch_loss, category_weights, LossParts};
use crate::taxonomy::{CategoryId, NUM_CATEGORIES};

pub const LOG_FILE: &str = "log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
const LOG_HEADER: &str = "epoch,train_loss_disc,train_loss_cont,val_mAP,val_AAE";

/// What the loss saw for one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInfo {
    pub epoch: usize,
    pub batch: usize,
    pub size: usize,
    pub weights: [f64; NUM_CATEGORIES],
    pub loss: LossParts,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: LossParts,
    pub val_map: f64,
    pub val_aae: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Parameters of the epoch with the highest validation mean AP; the
    /// final parameters when there is no validation data.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Batches of `order`, merging a trailing single person into the previous
/// batch since batch norm needs two.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().unwrap().len() == 1 {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One SGD-with-momentum step: `v = μ v + (g + λ p)`, `p -= lr · v`.
fn sgd_step(params: &mut ModelParams, grads: &ModelParams, velocity: &mut ModelParams, cfg: &RunConfig) {
    let o = &cfg.optimizer;
    let grads = grads.arrays();
    for ((p, g), v) in params.arrays_mut().into_iter().zip(grads).zip(velocity.arrays_mut()) {
        if p.kind == ArrayKind::RunningMean || p.kind == ArrayKind::RunningVar {
            continue;
        }
        for ((pv, gv), vv) in p.data.iter_mut().zip(g.data).zip(v.data.iter_mut()) {
            *vv = o.momentum * *vv + gv + o.weight_decay * *pv;
            *pv -= o.learning_rate * *vv;
        }
    }
}

fn append_log(path: &Path, row: &EpochLog) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let fmt = |v: f64| if v.is_nan() { "NaN".to_string() } else { format!("{v}") };
    let mut text = String::new();
    if fresh {
        text.push_str(LOG_HEADER);
        text.push('\n');
    }
    text.push_str(&format!(
        "{},{},{},{},{}\n",
        row.epoch,
        fmt(row.train_loss.disc),
        fmt(row.train_loss.cont),
        fmt(row.val_map),
        fmt(row.val_aae)
    ));
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn checkpoint_extra(cfg: &RunConfig, row: &EpochLog) -> serde_json::Value {
    serde_json::json!({
        "mode": cfg.mode,
        "loss": cfg.loss,
        "val_mAP": if row.val_map.is_nan() { None } else { Some(row.val_map) },
        "val_AAE": if row.val_aae.is_nan() { None } else { Some(row.val_aae) },
    })
}

/// Trains from a seeded initialization. `observer` sees every batch.
pub fn train(cfg: &RunConfig, data: &SplitData, observer: Option<&mut dyn FnMut(&BatchInfo)>) -> Result<TrainOutcome> {
    let params = ModelParams::init(&cfg.model, cfg.seed)?;
    train_from(cfg, params, data, observer)
}

pub fn train_from(
    cfg: &RunConfig,
    mut params: ModelParams,
    data: &SplitData,
    mut observer: Option<&mut dyn FnMut(&BatchInfo)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.config != cfg.model {
        return Err(Error::Config("initial parameters do not match the configured model".into()));
    }
    let train = &data.train;
    if train.len() < 2 {
        return Err(Error::invalid(format!("training split has {} persons; at least 2 are needed", train.len())));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut velocity = params.zeros_like();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_map = f64::NEG_INFINITY;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let (mut disc, mut cont) = (0.0, 0.0);
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let targets_d: Vec<_> = idx.iter().map(|&i| train.disc[i]).collect();
            let targets_c: Vec<_> = idx.iter().map(|&i| train.cont[i]).collect();
            let weights = category_weights(&targets_d, cfg.loss.c)?;
            let body = idx.iter().map(|&i| train.body[i].clone()).collect();
            let context = match cfg.mode {
                Mode::Body => Vec::new(),
                Mode::BodyImage => idx.iter().map(|&i| train.context[i].clone()).collect(),
            };
            let (preds, cache) = model::forward_train(&params, body, context, cfg.mode)?;
            let scores: Vec<_> = preds.iter().map(|p| p.scores).collect();
            let dims: Vec<_> = preds.iter().map(|p| p.dims).collect();
            let bl = batch_loss(&scores, &dims, &targets_d, &targets_c, &cfg.loss, &weights);
            if !bl.parts.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            if let Some(obs) = observer.as_deref_mut() {
                obs(&BatchInfo { epoch, batch: b, size: idx.len(), weights, loss: bl.parts });
            }
            let grads = model::backward(&params, &cache, &bl.grad_scores, &bl.grad_dims);
            sgd_step(&mut params, &grads, &mut velocity, cfg);
            model::update_running_stats(&mut params, &cache);
            disc += bl.parts.disc * idx.len() as f64;
            cont += bl.parts.cont * idx.len() as f64;
        }
        params.check_finite()?;
        let n = train.len() as f64;
        let train_loss = LossParts {
            total: cfg.loss.lambda_disc * disc / n + cfg.loss.lambda_cont * cont / n,
            disc: disc / n,
            cont: cont / n,
        };
        let (val_map, val_aae) = if data.val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let preds = predict(&params, &data.val, cfg.mode)?;
            (score_ap(&preds, &data.val)?.mean, score_aae(&preds, &data.val)?.mean)
        };
        let row = EpochLog { epoch, train_loss, val_map, val_aae };
        log::info!("epoch {epoch}: loss {:.5} (disc {:.5}, cont {:.5}) val mAP {val_map:.4} AAE {val_aae:.4}", train_loss.total, train_loss.disc, train_loss.cont);
        let improved = data.val.is_empty() || val_map > best_map || (best_map.is_nan() && !val_map.is_nan());
        if improved {
            best_map = val_map;
            best = params.clone();
            best_epoch = epoch;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            append_log(&dir.join(LOG_FILE), &row)?;
            save_checkpoint(&dir.join(LAST_CHECKPOINT), &params, epoch, cfg.seed, checkpoint_extra(cfg, &row))?;
            if improved {
                save_checkpoint(&dir.join(BEST_CHECKPOINT), &params, epoch, cfg.seed, checkpoint_extra(cfg, &row))?;
            }
        }
        log.push(row);
    }
    if cfg.epochs == 0 {
        best = params.clone();
    }
    Ok(TrainOutcome { params, best, best_epoch, log })
}

pub fn predict(params: &ModelParams, data: &Dataset, mode: Mode) -> Result<Vec<Prediction>> {
    model::predict_batch(params, &data.inputs(), mode)
}

fn score_ap(preds: &[Prediction], data: &Dataset) -> Result<ApReport> {
    let scores: Vec<_> = preds.iter().map(|p| p.scores).collect();
    metrics::mean_ap(&scores, &data.disc)
}

fn score_aae(preds: &[Prediction], data: &Dataset) -> Result<AaeReport> {
    let dims: Vec<_> = preds.iter().map(|p| p.dims).collect();
    metrics::average_absolute_error(&dims, &data.cont)
}

/// Precision = recall thresholds of `params` on a calibration set.
pub fn calibrate_thresholds(params: &ModelParams, data: &Dataset, mode: Mode) -> Result<[f64; NUM_CATEGORIES]> {
    let preds = predict(params, data, mode)?;
    let scores: Vec<_> = preds.iter().map(|p| p.scores).collect();
    metrics::pr_equal_thresholds(&scores, &data.disc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ap: ApReport,
    pub aae: AaeReport,
    pub samples: Vec<SampleResult>,
    pub median_jaccard: f64,
    pub thresholds: [f64; NUM_CATEGORIES],
}

impl EvalReport {
    /// `ap.csv`, `aae.csv` and `samples.csv` under `dir`.
    pub fn write(&self, dir: &Path, column: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        metrics::write_ap_table(&dir.join("ap.csv"), &[(column, &self.ap)])?;
        metrics::write_aae_table(&dir.join("aae.csv"), &[(column, &self.aae)])?;
        metrics::write_sample_table(&dir.join("samples.csv"), &self.samples)
    }
}

/// Scores precomputed predictions against a dataset's labels.
pub fn evaluate_predictions(preds: &[Prediction], data: &Dataset, thresholds: &[f64; NUM_CATEGORIES]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    if preds.len() != data.len() {
        return Err(Error::Shape(format!("{} predictions for {} persons", preds.len(), data.len())));
    }
    let ap = score_ap(preds, data)?;
    let aae = score_aae(preds, data)?;
    let samples: Vec<SampleResult> = preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let truth = (0..NUM_CATEGORIES).filter(|&c| data.disc[i][c] >= 0.5).map(CategoryId::from_index).collect();
            let detected = metrics::detections(&p.scores, thresholds);
            let err: f64 = p.dims.iter().zip(&data.cont[i]).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.dims.len() as f64;
            SampleResult { person_id: data.person_ids[i].clone(), jaccard: metrics::jaccard(&detected, &truth), aae: err }
        })
        .collect();
    let jc: Vec<f64> = samples.iter().map(|s| s.jaccard).collect();
    Ok(EvalReport { ap, aae, median_jaccard: metrics::median(&jc), samples, thresholds: *thresholds })
}

pub fn evaluate(params: &ModelParams, data: &Dataset, mode: Mode, thresholds: &[f64; NUM_CATEGORIES]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    evaluate_predictions(&predict(params, data, mode)?, data, thresholds)
}

/// B and B+I trained with the same data, seed and schedule, evaluated on
/// the test split with thresholds calibrated on validation.
#[derive(Debug, Clone)]
pub struct ContextComparison {
    pub body: EvalReport,
    pub body_image: EvalReport,
    pub body_log: Vec<EpochLog>,
    pub body_image_log: Vec<EpochLog>,
}

impl ContextComparison {
    pub fn ap_delta(&self) -> [f64; NUM_CATEGORIES] {
        let mut d = [0.0; NUM_CATEGORIES];
        for (i, v) in d.iter_mut().enumerate() {
            *v = self.body_image.ap.per_category[i] - self.body.ap.per_category[i];
        }
        d
    }

    /// `ap.csv` and `aae.csv` with B, B+I and delta columns, plus each
    /// model's per-sample listing.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let delta = ApReport {
            per_category: self.ap_delta(),
            mean: self.body_image.ap.mean - self.body.ap.mean,
            defined: self.body.ap.defined.min(self.body_image.ap.defined),
        };
        metrics::write_ap_table(&dir.join("ap.csv"), &[("B", &self.body.ap), ("B+I", &self.body_image.ap), ("delta", &delta)])?;
        let mut aae_delta = self.body_image.aae;
        for k in 0..aae_delta.per_dim.len() {
            aae_delta.per_dim[k] -= self.body.aae.per_dim[k];
        }
        aae_delta.mean -= self.body.aae.mean;
        metrics::write_aae_table(&dir.join("aae.csv"), &[("B", &self.body.aae), ("B+I", &self.body_image.aae), ("delta", &aae_delta)])?;
        metrics::write_sample_table(&dir.join("samples_B.csv"), &self.body.samples)?;
        metrics::write_sample_table(&dir.join("samples_B+I.csv"), &self.body_image.samples)
    }
}

fn run_mode(cfg: &RunConfig, mode: Mode, data: &SplitData) -> Result<(EvalReport, Vec<EpochLog>)> {
    let mut c = cfg.clone();
    c.mode = mode;
    c.checkpoint_dir = cfg.checkpoint_dir.as_ref().map(|d| d.join(mode.to_string()));
    let out = train(&c, data, None)?;
    let thresholds = if data.val.is_empty() { [f64::NAN; NUM_CATEGORIES] } else { calibrate_thresholds(&out.best, &data.val, mode)? };
    Ok((evaluate(&out.best, &data.test, mode, &thresholds)?, out.log))
}

pub fn compare_context_modes(cfg: &RunConfig, data: &SplitData) -> Result<ContextComparison> {
    let (body, body_log) = run_mode(cfg, Mode::Body, data)?;
    let (body_image, body_image_log) = run_mode(cfg, Mode::BodyImage, data)?;
    Ok(ContextComparison { body, body_image, body_log, body_image_log })
}

/// Axes of the loss-parameter grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub lambda_cont: Vec<f64>,
    pub theta: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridResult {
    pub lambda_cont: f64,
    pub theta: f64,
    pub c: f64,
    pub val_map: f64,
    pub val_aae: f64,
    /// `val_map - val_aae`; higher is better.
    pub score: f64,
}

/// Trains every grid point and scores its best parameters on validation.
/// Results follow grid order; the first maximum wins ties.
pub fn grid_search(base: &RunConfig, grid: &Grid, data: &SplitData) -> Result<(Vec<GridResult>, usize)> {
    if data.val.is_empty() {
        return Err(Error::invalid("grid search needs a validation split"));
    }
    let mut results = Vec::new();
    for &lambda_cont in &grid.lambda_cont {
        for &theta in &grid.theta {
            for &c in &grid.c {
                let mut cfg = base.clone();
                cfg.loss.lambda_cont = lambda_cont;
                cfg.loss.theta = theta;
                cfg.loss.c = c;
                cfg.checkpoint_dir = None;
                let out = train(&cfg, data, None)?;
                let preds = predict(&out.best, &data.val, cfg.mode)?;
                let val_map = score_ap(&preds, &data.val)?.mean;
                let val_aae = score_aae(&preds, &data.val)?.mean;
                results.push(GridResult { lambda_cont, theta, c, val_map, val_aae, score: val_map - val_aae });
            }
        }
    }
    if results.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if r.score > results[best].score {
            best = i;
        }
    }
    Ok((results, best))
}

pub fn write_grid(results: &[GridResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lambda_cont", "theta", "c", "val_mAP", "val_AAE", "score"])?;
    for r in results {
        w.write_record([r.lambda_cont, r.theta, r.c, r.val_map, r.val_aae, r.score].map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
