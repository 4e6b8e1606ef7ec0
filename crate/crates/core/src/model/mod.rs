//! Two-branch network: a body backbone over the person crop, a context
//! backbone over the whole image, and a fusion network with a 26-score head
//! and a 3-value head.
//!
//! Each backbone stacks 1-D convolutions alternating between `1 × k` and
//! `k × 1` kernels, each followed by batch normalization and a rectifier,
//! and ends in global average pooling. The fusion network concatenates the
//! two feature vectors, applies a 256-unit rectified layer, then two
//! parallel linear heads. In body-only mode the context features are
//! replaced by zeros.

mod checkpoint;
pub mod layers;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_arrays, save_checkpoint, CheckpointMeta};
use layers::{conv_backward, conv_forward, linear_backward, linear_forward, ConvGeometry};

use crate::error::{Error, Result};
use crate::taxonomy::{NUM_CATEGORIES, NUM_DIMS};

pub const FC1_WIDTH: usize = 256;
pub const INPUT_CHANNELS: usize = 3;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
const HEAD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Body features only; context features masked to zero.
    #[serde(rename = "B")]
    Body,
    #[serde(rename = "B+I")]
    BodyImage,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" | "b" | "body" => Ok(Mode::Body),
            "B+I" | "b+i" | "BI" | "bi" | "body+image" => Ok(Mode::BodyImage),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected B or B+I)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Body => "B",
            Mode::BodyImage => "B+I",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_conv_layers: usize,
    pub kernel_length: usize,
    /// Output channels of each layer.
    pub channel_schedule: Vec<usize>,
    /// Layers that subsample rows and columns by 2.
    pub downsample_layers: BTreeSet<usize>,
    /// `(width, height)` in pixels.
    pub input_size: (usize, usize),
}

impl BackboneConfig {
    /// `n` layers whose width starts at `base` and doubles every 4 layers,
    /// halving resolution on the first layer of each group of 4.
    pub fn doubling(n: usize, base: usize, kernel_length: usize, input: usize) -> Self {
        BackboneConfig {
            n_conv_layers: n,
            kernel_length,
            channel_schedule: (0..n).map(|l| base << (l / 4)).collect(),
            downsample_layers: (0..n).step_by(4).collect(),
            input_size: (input, input),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_conv_layers == 0 || self.n_conv_layers % 2 != 0 {
            return bad(format!("n_conv_layers must be even and positive, got {}", self.n_conv_layers));
        }
        if self.channel_schedule.len() != self.n_conv_layers {
            return bad(format!("channel schedule has {} entries for {} layers", self.channel_schedule.len(), self.n_conv_layers));
        }
        if self.channel_schedule.contains(&0) {
            return bad("zero channels in schedule".into());
        }
        if self.kernel_length == 0 || self.kernel_length % 2 == 0 {
            return bad(format!("kernel_length must be odd, got {}", self.kernel_length));
        }
        if let Some(&l) = self.downsample_layers.iter().find(|&&l| l >= self.n_conv_layers) {
            return bad(format!("downsample layer {l} out of range"));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return bad("empty input size".into());
        }
        Ok(())
    }

    pub fn geometries(&self) -> Vec<ConvGeometry> {
        let (mut w, mut h) = self.input_size;
        let mut cin = INPUT_CHANNELS;
        (0..self.n_conv_layers)
            .map(|l| {
                let g = ConvGeometry {
                    cin,
                    cout: self.channel_schedule[l],
                    h,
                    w,
                    k: self.kernel_length,
                    stride: if self.downsample_layers.contains(&l) { 2 } else { 1 },
                    horizontal: l % 2 == 0,
                };
                cin = g.cout;
                h = g.out_h();
                w = g.out_w();
                g
            })
            .collect()
    }

    pub fn out_channels(&self) -> usize {
        *self.channel_schedule.last().unwrap()
    }

    pub fn input_len(&self) -> usize {
        INPUT_CHANNELS * self.input_size.0 * self.input_size.1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub body: BackboneConfig,
    pub context: BackboneConfig,
}

impl ModelConfig {
    pub const PROFILES: [&'static str; 3] = ["desk", "full", "tiny"];

    /// - `desk`: 64×64 inputs, 16 layers, 16 channels doubling every 4 layers.
    /// - `full`: 224×224 inputs, 16 layers, 64 channels doubling every 4 layers.
    /// - `tiny`: 16×16 inputs, 4 layers of 8, 8, 16, 16 channels; for tests.
    pub fn profile(name: &str) -> Result<Self> {
        let bb = match name {
            "desk" => BackboneConfig::doubling(16, 16, 3, 64),
            "full" => BackboneConfig::doubling(16, 64, 3, 224),
            "tiny" => BackboneConfig {
                n_conv_layers: 4,
                kernel_length: 3,
                channel_schedule: vec![8, 8, 16, 16],
                downsample_layers: [2].into(),
                input_size: (16, 16),
            },
            _ => return Err(Error::Config(format!("unknown profile {name:?} (expected one of {:?})", Self::PROFILES))),
        };
        Ok(ModelConfig { body: bb.clone(), context: bb })
    }

    pub fn validate(&self) -> Result<()> {
        self.body.validate()?;
        self.context.validate()
    }

    pub fn fusion_inputs(&self) -> usize {
        self.body.out_channels() + self.context.out_channels()
    }

    /// Parameter count derived from the configuration alone.
    pub fn num_parameters(&self) -> usize {
        let backbone = |b: &BackboneConfig| -> usize {
            b.geometries().iter().map(|g| g.weight_len() + 4 * g.cout).sum()
        };
        let d = self.fusion_inputs();
        backbone(&self.body) + backbone(&self.context) + FC1_WIDTH * (d + 1) + (NUM_CATEGORIES + NUM_DIMS) * (FC1_WIDTH + 1)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::profile("desk").unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayKind {
    ConvWeight,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
    Weight,
    Bias,
}

impl ArrayKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ArrayKind::RunningMean | ArrayKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[out][in][k]`
    pub weight: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out][in]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub n_in: usize,
}

impl Linear {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear { weight: vec![0.0; n_in * n_out], bias: vec![0.0; n_out], n_in }
    }

}

/// All network state. Every array is reachable through [`ModelParams::arrays`]
/// under a hierarchical name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub body: Vec<ConvLayer>,
    pub context: Vec<ConvLayer>,
    pub fc1: Linear,
    pub head_disc: Linear,
    pub head_cont: Linear,
}

/// A named view of one array.
pub struct NamedArray<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ArrayKind,
    pub data: &'a [f64],
}

pub struct NamedArrayMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ArrayKind,
    pub data: &'a mut Vec<f64>,
}

fn conv_layers_zero(cfg: &BackboneConfig) -> Vec<ConvLayer> {
    cfg.geometries()
        .iter()
        .map(|g| ConvLayer {
            weight: vec![0.0; g.weight_len()],
            gamma: vec![1.0; g.cout],
            beta: vec![0.0; g.cout],
            running_mean: vec![0.0; g.cout],
            running_var: vec![1.0; g.cout],
        })
        .collect()
}

macro_rules! array_list {
    ($self:ident, $slice:ident, $view:ident, $($mutability:tt)*) => {{
        let mut out = Vec::new();
        for (prefix, layers, cfg) in [("body", &$($mutability)* $self.body, &$self.config.body), ("context", &$($mutability)* $self.context, &$self.config.context)] {
            let geos = cfg.geometries();
            for (l, layer) in layers.$slice().enumerate() {
                let g = geos[l];
                let c = vec![g.cout];
                out.push($view { name: format!("{prefix}.conv{l:02}.weight"), shape: vec![g.cout, g.cin, g.k], kind: ArrayKind::ConvWeight, data: &$($mutability)* layer.weight });
                out.push($view { name: format!("{prefix}.bn{l:02}.gamma"), shape: c.clone(), kind: ArrayKind::BnScale, data: &$($mutability)* layer.gamma });
                out.push($view { name: format!("{prefix}.bn{l:02}.beta"), shape: c.clone(), kind: ArrayKind::BnShift, data: &$($mutability)* layer.beta });
                out.push($view { name: format!("{prefix}.bn{l:02}.running_mean"), shape: c.clone(), kind: ArrayKind::RunningMean, data: &$($mutability)* layer.running_mean });
                out.push($view { name: format!("{prefix}.bn{l:02}.running_var"), shape: c, kind: ArrayKind::RunningVar, data: &$($mutability)* layer.running_var });
            }
        }
        for (name, lin) in [("fc1", &$($mutability)* $self.fc1), ("head_disc", &$($mutability)* $self.head_disc), ("head_cont", &$($mutability)* $self.head_cont)] {
            let shape = vec![lin.bias.len(), lin.n_in];
            let n_out = lin.bias.len();
            out.push($view { name: format!("fusion.{name}.weight"), shape, kind: ArrayKind::Weight, data: &$($mutability)* lin.weight });
            out.push($view { name: format!("fusion.{name}.bias"), shape: vec![n_out], kind: ArrayKind::Bias, data: &$($mutability)* lin.bias });
        }
        out
    }};
}

impl ModelParams {
    /// Batch-norm scale 1, every other array 0.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(ModelParams {
            config: config.clone(),
            body: conv_layers_zero(&config.body),
            context: conv_layers_zero(&config.context),
            fc1: Linear::zeros(config.fusion_inputs(), FC1_WIDTH),
            head_disc: Linear::zeros(FC1_WIDTH, NUM_CATEGORIES),
            head_cont: Linear::zeros(FC1_WIDTH, NUM_DIMS),
        })
    }

    /// He-normal convolution and FC1 weights, `N(0, 0.01²)` head weights,
    /// zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |v: &mut [f64], std: f64| {
            let d = Normal::new(0.0, std).unwrap();
            v.iter_mut().for_each(|x| *x = d.sample(&mut rng));
        };
        for (layers, cfg) in [(&mut p.body, &config.body), (&mut p.context, &config.context)] {
            for (layer, g) in layers.iter_mut().zip(cfg.geometries()) {
                fill(&mut layer.weight, (2.0 / (g.cin * g.k) as f64).sqrt());
            }
        }
        let d = config.fusion_inputs();
        fill(&mut p.fc1.weight, (2.0 / d as f64).sqrt());
        fill(&mut p.head_disc.weight, HEAD_INIT_STD);
        fill(&mut p.head_cont.weight, HEAD_INIT_STD);
        Ok(p)
    }

    /// Same shapes, all zeros: the layout used for gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for a in z.arrays_mut() {
            a.data.fill(0.0);
        }
        z
    }

    pub fn arrays(&self) -> Vec<NamedArray<'_>> {
        array_list!(self, iter, NamedArray,)
    }

    pub fn arrays_mut(&mut self) -> Vec<NamedArrayMut<'_>> {
        array_list!(self, iter_mut, NamedArrayMut, mut)
    }

    pub fn num_parameters(&self) -> usize {
        self.arrays().iter().map(|a| a.data.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for a in self.arrays() {
            if a.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: a.name });
            }
            if a.kind == ArrayKind::RunningVar && a.data.iter().any(|&v| v <= 0.0) {
                return Err(Error::Shape(format!("{}: non-positive variance", a.name)));
            }
        }
        Ok(())
    }
}

/// Per-person network output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub scores: [f64; NUM_CATEGORIES],
    /// Normalized VAD, intended in `[0, 1]`.
    pub dims: [f64; NUM_DIMS],
}

/// Converts an RGB raster to the `[channel][row][column]` input layout,
/// scaled to `[-0.5, 0.5]`.
pub fn image_tensor(img: &image::RgbImage) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; INPUT_CHANNELS * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..INPUT_CHANNELS {
            out[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0 - 0.5;
        }
    }
    out
}

fn check_input(cfg: &BackboneConfig, x: &[f64], what: &str) -> Result<()> {
    if x.len() != cfg.input_len() {
        return Err(Error::Shape(format!(
            "{what} input has {} values, expected 3x{}x{} = {}",
            x.len(),
            cfg.input_size.1,
            cfg.input_size.0,
            cfg.input_len()
        )));
    }
    Ok(())
}

fn check_finite(v: &[f64], layer: impl FnOnce() -> String) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: layer() })
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn global_average(x: &[f64], channels: usize) -> Vec<f64> {
    let n = x.len() / channels;
    x.chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect()
}

/// Inference-mode backbone: batch norm uses the stored statistics.
pub fn backbone(cfg: &BackboneConfig, layers: &[ConvLayer], input: &[f64], name: &str) -> Result<Vec<f64>> {
    check_input(cfg, input, name)?;
    if layers.len() != cfg.n_conv_layers {
        return Err(Error::Shape(format!("{name}: {} layers for a {}-layer config", layers.len(), cfg.n_conv_layers)));
    }
    let mut x = input.to_vec();
    for (l, (g, layer)) in cfg.geometries().iter().zip(layers).enumerate() {
        let mut y = vec![0.0; g.out_len()];
        conv_forward(g, &layer.weight, &x, &mut y);
        let plane = g.out_h() * g.out_w();
        for c in 0..g.cout {
            let scale = layer.gamma[c] / (layer.running_var[c] + BN_EPS).sqrt();
            let shift = layer.beta[c] - layer.running_mean[c] * scale;
            for v in &mut y[c * plane..(c + 1) * plane] {
                *v = *v * scale + shift;
            }
        }
        relu(&mut y);
        check_finite(&y, || format!("{name}.conv{l:02}"))?;
        x = y;
    }
    Ok(global_average(&x, cfg.out_channels()))
}

fn fusion(params: &ModelParams, body: &[f64], context: Option<&[f64]>) -> (Vec<f64>, Vec<f64>, Prediction) {
    let mut z = body.to_vec();
    match context {
        Some(c) => z.extend_from_slice(c),
        None => z.resize(params.config.fusion_inputs(), 0.0),
    }
    let mut h = vec![0.0; FC1_WIDTH];
    linear_forward(&params.fc1.weight, &params.fc1.bias, &z, &mut h);
    relu(&mut h);
    let mut scores = [0.0; NUM_CATEGORIES];
    let mut dims = [0.0; NUM_DIMS];
    linear_forward(&params.head_disc.weight, &params.head_disc.bias, &h, &mut scores);
    linear_forward(&params.head_cont.weight, &params.head_cont.bias, &h, &mut dims);
    (z, h, Prediction { scores, dims })
}

/// Inference for one person. In [`Mode::Body`] the context input is not
/// read.
pub fn forward(params: &ModelParams, body: &[f64], context: &[f64], mode: Mode) -> Result<Prediction> {
    let fb = backbone(&params.config.body, &params.body, body, "body")?;
    let fc = match mode {
        Mode::Body => None,
        Mode::BodyImage => Some(backbone(&params.config.context, &params.context, context, "context")?),
    };
    let (_, h, pred) = fusion(params, &fb, fc.as_deref());
    check_finite(&h, || "fusion.fc1".into())?;
    check_finite(&pred.scores, || "fusion.head_disc".into())?;
    check_finite(&pred.dims, || "fusion.head_cont".into())?;
    Ok(pred)
}

/// Inference from rasters already resized to the configured input sizes.
pub fn forward_images(params: &ModelParams, body: &image::RgbImage, whole: &image::RgbImage, mode: Mode) -> Result<Prediction> {
    forward(params, &image_tensor(body), &image_tensor(whole), mode)
}

/// Inference over many persons, in parallel; output order follows input.
pub fn predict_batch(params: &ModelParams, inputs: &[(&[f64], &[f64])], mode: Mode) -> Result<Vec<Prediction>> {
    inputs.par_iter().map(|(b, c)| forward(params, b, c, mode)).collect()
}

struct LayerCache {
    geometry: ConvGeometry,
    /// Per-sample normalized pre-activation.
    xhat: Vec<Vec<f64>>,
    mean: Vec<f64>,
    /// Biased batch variance.
    var: Vec<f64>,
}

struct BackboneCache {
    /// `acts[0]` is the input; `acts[l + 1]` the rectified output of layer `l`.
    acts: Vec<Vec<Vec<f64>>>,
    layers: Vec<LayerCache>,
}

/// Training-mode backbone over a batch: batch norm normalizes with the
/// batch's own statistics. Reductions over samples run in sample order.
fn backbone_train(cfg: &BackboneConfig, layers: &[ConvLayer], inputs: Vec<Vec<f64>>, name: &str) -> Result<(Vec<Vec<f64>>, BackboneCache)> {
    for x in &inputs {
        check_input(cfg, x, name)?;
    }
    let n = inputs.len();
    let mut acts = vec![inputs];
    let mut caches = Vec::with_capacity(layers.len());
    for (l, (g, layer)) in cfg.geometries().into_iter().zip(layers).enumerate() {
        let conv: Vec<Vec<f64>> = acts[l]
            .par_iter()
            .map(|x| {
                let mut y = vec![0.0; g.out_len()];
                conv_forward(&g, &layer.weight, x, &mut y);
                y
            })
            .collect();
        let plane = g.out_h() * g.out_w();
        let m = (n * plane) as f64;
        let mut mean = vec![0.0; g.cout];
        let mut var = vec![0.0; g.cout];
        for c in 0..g.cout {
            let s: f64 = conv.iter().map(|y| y[c * plane..(c + 1) * plane].iter().sum::<f64>()).sum();
            mean[c] = s / m;
            let q: f64 = conv
                .iter()
                .map(|y| y[c * plane..(c + 1) * plane].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>())
                .sum();
            var[c] = q / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = conv;
        let mut out = Vec::with_capacity(n);
        for xh in xhat.iter_mut() {
            let mut o = vec![0.0; xh.len()];
            for c in 0..g.cout {
                for i in c * plane..(c + 1) * plane {
                    xh[i] = (xh[i] - mean[c]) * inv_std[c];
                    o[i] = (layer.gamma[c] * xh[i] + layer.beta[c]).max(0.0);
                }
            }
            check_finite(&o, || format!("{name}.conv{l:02}"))?;
            out.push(o);
        }
        acts.push(out);
        caches.push(LayerCache { geometry: g, xhat, mean, var });
    }
    let feats = acts.last().unwrap().iter().map(|x| global_average(x, cfg.out_channels())).collect();
    Ok((feats, BackboneCache { acts, layers: caches }))
}

fn backbone_backward(layers: &[ConvLayer], cache: &BackboneCache, dfeats: &[Vec<f64>], grads: &mut [ConvLayer]) {
    let n = dfeats.len();
    let last = cache.layers.last().unwrap().geometry;
    let plane = last.out_h() * last.out_w();
    let mut dout: Vec<Vec<f64>> = dfeats
        .iter()
        .map(|df| df.iter().flat_map(|&d| std::iter::repeat_n(d / plane as f64, plane)).collect())
        .collect();
    for l in (0..layers.len()).rev() {
        let lc = &cache.layers[l];
        let g = lc.geometry;
        let plane = g.out_h() * g.out_w();
        let m = (n * plane) as f64;
        let layer = &layers[l];
        // through the rectifier, then the affine part of batch norm
        for (d, a) in dout.iter_mut().zip(&cache.acts[l + 1]) {
            for (dv, &av) in d.iter_mut().zip(a) {
                if av <= 0.0 {
                    *dv = 0.0;
                }
            }
        }
        let mut dxhat_sum = vec![0.0; g.cout];
        let mut dxhat_xhat = vec![0.0; g.cout];
        for c in 0..g.cout {
            let (mut sd, mut sdx) = (0.0, 0.0);
            for (d, xh) in dout.iter().zip(&lc.xhat) {
                for i in c * plane..(c + 1) * plane {
                    sd += d[i];
                    sdx += d[i] * xh[i];
                }
            }
            grads[l].beta[c] += sd;
            grads[l].gamma[c] += sdx;
            dxhat_sum[c] = sd * layer.gamma[c];
            dxhat_xhat[c] = sdx * layer.gamma[c];
        }
        let dconv: Vec<Vec<f64>> = dout
            .iter()
            .zip(&lc.xhat)
            .map(|(d, xh)| {
                let mut o = vec![0.0; d.len()];
                for c in 0..g.cout {
                    let inv_std = 1.0 / (lc.var[c] + BN_EPS).sqrt();
                    for i in c * plane..(c + 1) * plane {
                        let dxh = d[i] * layer.gamma[c];
                        o[i] = inv_std * (dxh - dxhat_sum[c] / m - xh[i] * dxhat_xhat[c] / m);
                    }
                }
                o
            })
            .collect();
        let need_dx = l > 0;
        let per_sample: Vec<(Vec<f64>, Vec<f64>)> = dconv
            .par_iter()
            .zip(&cache.acts[l])
            .map(|(dy, x)| {
                let mut dw = vec![0.0; g.weight_len()];
                let mut dx = if need_dx { vec![0.0; g.in_len()] } else { Vec::new() };
                conv_backward(&g, &layer.weight, x, dy, need_dx.then_some(dx.as_mut_slice()), &mut dw);
                (dx, dw)
            })
            .collect();
        let mut next = Vec::with_capacity(n);
        for (dx, dw) in per_sample {
            for (a, b) in grads[l].weight.iter_mut().zip(&dw) {
                *a += b;
            }
            next.push(dx);
        }
        dout = next;
    }
}

/// Forward state kept for the backward pass of a training batch.
pub struct TrainCache {
    mode: Mode,
    body: BackboneCache,
    context: Option<BackboneCache>,
    fused: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
}

impl TrainCache {
    /// `(mean, biased variance)` per layer of each backbone, for the
    /// running-statistics update.
    fn batch_stats(&self) -> [Option<Vec<(&[f64], &[f64])>>; 2] {
        fn stats(c: &BackboneCache) -> Vec<(&[f64], &[f64])> {
            c.layers.iter().map(|l| (l.mean.as_slice(), l.var.as_slice())).collect()
        }
        [Some(stats(&self.body)), self.context.as_ref().map(stats)]
    }
}

/// Training-mode forward over a batch (at least two persons).
pub fn forward_train(params: &ModelParams, body: Vec<Vec<f64>>, context: Vec<Vec<f64>>, mode: Mode) -> Result<(Vec<Prediction>, TrainCache)> {
    let n = body.len();
    if n < 2 {
        return Err(Error::Shape(format!("training batch of {n}: batch norm needs at least 2")));
    }
    let (fb, body_cache) = backbone_train(&params.config.body, &params.body, body, "body")?;
    let (fc, context_cache) = match mode {
        Mode::Body => (None, None),
        Mode::BodyImage => {
            if context.len() != n {
                return Err(Error::Shape(format!("{} context inputs for {n} body inputs", context.len())));
            }
            let (f, c) = backbone_train(&params.config.context, &params.context, context, "context")?;
            (Some(f), Some(c))
        }
    };
    let mut preds = Vec::with_capacity(n);
    let mut fused = Vec::with_capacity(n);
    let mut hidden = Vec::with_capacity(n);
    for i in 0..n {
        let (z, h, p) = fusion(params, &fb[i], fc.as_ref().map(|f| f[i].as_slice()));
        check_finite(&h, || "fusion.fc1".into())?;
        check_finite(&p.scores, || "fusion.head_disc".into())?;
        check_finite(&p.dims, || "fusion.head_cont".into())?;
        fused.push(z);
        hidden.push(h);
        preds.push(p);
    }
    Ok((preds, TrainCache { mode, body: body_cache, context: context_cache, fused, hidden }))
}

/// Gradient of the batch loss given its gradient with respect to each
/// prediction. Per-sample contributions are summed in sample order.
pub fn backward(params: &ModelParams, cache: &TrainCache, grad_scores: &[[f64; NUM_CATEGORIES]], grad_dims: &[[f64; NUM_DIMS]]) -> ModelParams {
    let mut grads = params.zeros_like();
    let d = params.config.fusion_inputs();
    let nb = params.config.body.out_channels();
    let mut dfb = Vec::with_capacity(cache.fused.len());
    let mut dfc = Vec::with_capacity(cache.fused.len());
    for i in 0..cache.fused.len() {
        let h = &cache.hidden[i];
        let mut dh = vec![0.0; FC1_WIDTH];
        linear_backward(&params.head_disc.weight, h, &grad_scores[i], &mut dh, &mut grads.head_disc.weight, &mut grads.head_disc.bias);
        linear_backward(&params.head_cont.weight, h, &grad_dims[i], &mut dh, &mut grads.head_cont.weight, &mut grads.head_cont.bias);
        for (g, &hv) in dh.iter_mut().zip(h) {
            if hv <= 0.0 {
                *g = 0.0;
            }
        }
        let mut dz = vec![0.0; d];
        linear_backward(&params.fc1.weight, &cache.fused[i], &dh, &mut dz, &mut grads.fc1.weight, &mut grads.fc1.bias);
        dfc.push(dz.split_off(nb));
        dfb.push(dz);
    }
    backbone_backward(&params.body, &cache.body, &dfb, &mut grads.body);
    if let (Mode::BodyImage, Some(c)) = (cache.mode, &cache.context) {
        backbone_backward(&params.context, c, &dfc, &mut grads.context);
    }
    grads
}

/// Moves the running statistics toward the batch statistics of `cache`,
/// keeping `BN_MOMENTUM` of the old value. The stored variance is the
/// unbiased batch estimate.
pub fn update_running_stats(params: &mut ModelParams, cache: &TrainCache) {
    let [body, context] = cache.batch_stats();
    let n = cache.fused.len();
    for (layers, cfg, stats) in [(&mut params.body, &params.config.body, body), (&mut params.context, &params.config.context, context)] {
        let Some(stats) = stats else { continue };
        for ((layer, g), (mean, var)) in layers.iter_mut().zip(cfg.geometries()).zip(stats) {
            let m = (n * g.out_h() * g.out_w()) as f64;
            for c in 0..g.cout {
                layer.running_mean[c] = BN_MOMENTUM * layer.running_mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
                let unbiased = var[c] * m / (m - 1.0);
                layer.running_var[c] = BN_MOMENTUM * layer.running_var[c] + (1.0 - BN_MOMENTUM) * unbiased;
            }
        }
    }
}

/// Which arrays an import touched.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImportReport {
    pub matched: Vec<String>,
    /// Model arrays not named in the mapping; left as they were.
    pub unmatched: Vec<String>,
}

/// Copies `source[mapping[name]]` into each mapped model array. All shapes
/// are checked before anything is written.
pub fn import_pretrained(
    params: &ModelParams,
    source: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    mapping: &BTreeMap<String, String>,
) -> Result<(ModelParams, ImportReport)> {
    let mut out = params.clone();
    let mut report = ImportReport::default();
    {
        let arrays = out.arrays();
        let known: BTreeMap<&str, &NamedArray> = arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        for (dst, src) in mapping {
            let a = known.get(dst.as_str()).ok_or_else(|| Error::Shape(format!("mapping targets unknown array {dst}")))?;
            let (shape, data) = source.get(src).ok_or_else(|| Error::Shape(format!("mapping source {src} not in container")))?;
            if *shape != a.shape || data.len() != a.data.len() {
                return Err(Error::Shape(format!("{dst} has shape {:?} but source {src} has shape {shape:?}", a.shape)));
            }
        }
    }
    for a in out.arrays_mut() {
        match mapping.get(&a.name) {
            Some(src) => {
                a.data.copy_from_slice(&source[src].1);
                report.matched.push(a.name);
            }
            None => report.unmatched.push(a.name),
        }
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests;
