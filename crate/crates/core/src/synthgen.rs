//! Synthetic images in which some emotion categories are drawn on the person
//! and others only in the surroundings.
//!
//! Layout of an image with one person:
//!
//! - The bounding box is split into vertical slices, one per body category.
//!   An active category fills its slice with the category color; inactive
//!   slices are mid gray.
//! - The image is split into horizontal bands, one per context category.
//!   Outside the box, an active category fills its band with its color;
//!   inactive bands stay dark.
//!
//! Box pixels depend only on the body categories (and noise), so a crop of
//! the box carries no information about context categories. Continuous
//! dimensions are `base + Σ coefficient[c]` over active categories, rounded
//! and clamped to 1..=10; base and coefficients are written to the manifest
//! header under `synth`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{AgeGroup, AnnotatorResponse, BBox, Gender, PersonAnnotation};
use crate::dataset::{self, Corpus, ImageEntry, SplitProportions};
use crate::error::{Error, Result};
use crate::taxonomy::{CategoryId, NUM_DIMS, RAW_MAX, RAW_MIN};

pub const IMAGE_DIR: &str = "images";
pub const INACTIVE_BODY: [u8; 3] = [128, 128, 128];
pub const INACTIVE_CONTEXT: [u8; 3] = [24, 24, 24];
const VAD_BASE: [f64; NUM_DIMS] = [5.5, 5.5, 5.5];
const MAX_COEFFICIENT: f64 = 1.5;
/// Share of the image width and height a box may take at most.
const MAX_BOX_SIDE: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_images: usize,
    pub image_size: (u32, u32),
    /// Box area over image area.
    pub body_fraction: f64,
    pub body_categories: BTreeSet<CategoryId>,
    pub context_categories: BTreeSet<CategoryId>,
    /// Probability that a category is active for a person.
    pub prevalence: f64,
    /// Uniform additive pixel noise amplitude, as a share of the 0..255 range.
    pub noise_level: f64,
    pub n_annotators: usize,
    /// Probability that an annotator flips each category of the person.
    pub annotator_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let ids = |v: &[u8]| v.iter().map(|&i| CategoryId::new(i).unwrap()).collect();
        SynthSpec {
            n_images: 600,
            image_size: (48, 48),
            body_fraction: 0.3,
            // Happiness, Sadness, Anger, Fear
            body_categories: ids(&[17, 21, 3, 12]),
            // Engagement, Anticipation, Peace, Confidence
            context_categories: ids(&[13, 4, 19, 8]),
            prevalence: 0.5,
            noise_level: 0.05,
            n_annotators: 1,
            annotator_noise: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_images == 0 {
            return bad("n_images must be positive");
        }
        if !(self.body_fraction > 0.0 && self.body_fraction < 1.0) {
            return bad("body_fraction must be in (0, 1)");
        }
        if !self.body_categories.is_disjoint(&self.context_categories) {
            return bad("body and context categories overlap");
        }
        if self.body_categories.is_empty() && self.context_categories.is_empty() {
            return bad("no categories to draw");
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return bad("prevalence must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return bad("noise_level must be in [0, 1)");
        }
        if self.n_annotators == 0 {
            return bad("n_annotators must be positive");
        }
        if !(0.0..1.0).contains(&self.annotator_noise) {
            return bad("annotator_noise must be in [0, 1)");
        }
        let (w, h) = self.image_size;
        let side = (self.body_fraction.sqrt() * w.min(h) as f64).round() as u32;
        if w < 8 || h < 8 || side < self.body_categories.len().max(1) as u32 || self.context_categories.len() as u32 > h {
            return bad("image too small for the requested layout");
        }
        if self.body_fraction.sqrt() > MAX_BOX_SIDE {
            return bad("body_fraction too large: the box must leave room for context");
        }
        Ok(())
    }

    /// Drawn categories in id order.
    pub fn all_categories(&self) -> Vec<CategoryId> {
        self.body_categories.union(&self.context_categories).copied().collect()
    }

    /// Fully saturated hues spread evenly over the drawn categories.
    pub fn palette(&self) -> BTreeMap<CategoryId, [u8; 3]> {
        let cats = self.all_categories();
        let n = cats.len() as f64;
        cats.iter().enumerate().map(|(i, &c)| (c, hue_rgb(i as f64 / n))).collect()
    }

    /// Per-category additive VAD coefficients, drawn from the seed.
    pub fn vad_coefficients(&self) -> BTreeMap<CategoryId, [f64; NUM_DIMS]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        self.all_categories()
            .into_iter()
            .map(|c| {
                let v = [(); NUM_DIMS].map(|_| ((rng.random_range(-MAX_COEFFICIENT..MAX_COEFFICIENT)) * 4.0).round() / 4.0);
                (c, v)
            })
            .collect()
    }

    pub fn raw_dims(&self, active: &BTreeSet<CategoryId>, coefficients: &BTreeMap<CategoryId, [f64; NUM_DIMS]>) -> [u8; NUM_DIMS] {
        let mut v = VAD_BASE;
        for c in active {
            for (k, x) in v.iter_mut().enumerate() {
                *x += coefficients[c][k];
            }
        }
        v.map(|x| x.round().clamp(RAW_MIN as f64, RAW_MAX as f64) as u8)
    }
}

fn hue_rgb(h: f64) -> [u8; 3] {
    let x = h * 6.0;
    let f = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let r = (x - 3.0).abs() - 1.0;
    let g = 2.0 - (x - 2.0).abs();
    let b = 2.0 - (x - 4.0).abs();
    [f(r), f(g), f(b)]
}

/// Column range `[start, end)` of slice `j` of `n` across `width` pixels.
pub fn slice_range(start: u32, width: u32, j: usize, n: usize) -> (u32, u32) {
    let a = start + (width as u64 * j as u64 / n as u64) as u32;
    let b = start + (width as u64 * (j as u64 + 1) / n as u64) as u32;
    (a, b)
}

/// Ground truth for one generated person.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image_id: String,
    pub bbox: BBox,
    pub categories: BTreeSet<CategoryId>,
    pub raw_dims: [u8; NUM_DIMS],
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_categories(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> BTreeSet<CategoryId> {
    // redraw the rare empty set so every person has a label
    loop {
        let s: BTreeSet<CategoryId> = spec.all_categories().into_iter().filter(|_| rng.random::<f64>() < spec.prevalence).collect();
        if !s.is_empty() {
            return s;
        }
    }
}

fn render(
    spec: &SynthSpec,
    index: usize,
    palette: &BTreeMap<CategoryId, [u8; 3]>,
    coefficients: &BTreeMap<CategoryId, [f64; NUM_DIMS]>,
) -> (SynthSample, Vec<AnnotatorResponse>, Gender, AgeGroup, RgbImage) {
    let mut rng = sample_rng(spec.seed, index);
    let categories = draw_categories(spec, &mut rng);
    let (w, h) = spec.image_size;
    let aspect = rng.random_range(0.8..1.25f64);
    let area = spec.body_fraction * (w * h) as f64;
    let bw = ((area * aspect).sqrt().round() as u32).clamp(spec.body_categories.len().max(1) as u32, (w as f64 * MAX_BOX_SIDE) as u32);
    let bh = ((area / aspect).sqrt().round() as u32).clamp(1, (h as f64 * MAX_BOX_SIDE) as u32);
    let bbox = BBox::new(rng.random_range(0..=w - bw), rng.random_range(0..=h - bh), bw, bh);

    let mut img = RgbImage::from_pixel(w, h, Rgb(INACTIVE_CONTEXT));
    let ctx: Vec<CategoryId> = spec.context_categories.iter().copied().collect();
    for (j, c) in ctx.iter().enumerate() {
        if !categories.contains(c) {
            continue;
        }
        let (r0, r1) = slice_range(0, h, j, ctx.len());
        for y in r0..r1 {
            for x in 0..w {
                if !bbox.contains(x, y) {
                    img.put_pixel(x, y, Rgb(palette[c]));
                }
            }
        }
    }
    let body: Vec<CategoryId> = spec.body_categories.iter().copied().collect();
    for y in bbox.y..bbox.y + bbox.height {
        for x in bbox.x..bbox.x + bbox.width {
            img.put_pixel(x, y, Rgb(INACTIVE_BODY));
        }
    }
    for (j, c) in body.iter().enumerate() {
        if !categories.contains(c) {
            continue;
        }
        let (c0, c1) = slice_range(bbox.x, bbox.width, j, body.len());
        for y in bbox.y..bbox.y + bbox.height {
            for x in c0..c1 {
                img.put_pixel(x, y, Rgb(palette[c]));
            }
        }
    }
    if spec.noise_level > 0.0 {
        let amp = spec.noise_level * 255.0;
        for p in img.pixels_mut() {
            for ch in p.0.iter_mut() {
                *ch = (*ch as f64 + rng.random_range(-amp..=amp)).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    let raw_dims = spec.raw_dims(&categories, coefficients);
    let all = spec.all_categories();
    let responses = (0..spec.n_annotators)
        .map(|a| {
            let mut seen: BTreeSet<CategoryId> = all
                .iter()
                .copied()
                .filter(|c| categories.contains(c) != (rng.random::<f64>() < spec.annotator_noise))
                .collect();
            if seen.is_empty() {
                seen = categories.clone();
            }
            AnnotatorResponse::new(format!("synth{a}"), seen, Some(raw_dims))
        })
        .collect();
    let gender = [Gender::Male, Gender::Female][rng.random_range(0..2)];
    let age = [AgeGroup::Child, AgeGroup::Teenager, AgeGroup::Adult][rng.random_range(0..3)];
    let sample = SynthSample { image_id: image_id(index), bbox, categories, raw_dims };
    (sample, responses, gender, age, img)
}

pub fn image_id(index: usize) -> String {
    format!("img{index:06}")
}

pub fn person_id(index: usize) -> String {
    format!("p{index:06}")
}

/// Corpus, one image per person keyed by image id, and the ground truth.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub corpus: Corpus,
    pub images: BTreeMap<String, RgbImage>,
    pub samples: Vec<SynthSample>,
}

/// Builds the corpus and images in memory. Images are produced in parallel;
/// each draws from its own stream of the seed so the result does not depend
/// on scheduling.
pub fn generate_in_memory(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let palette = spec.palette();
    let coefficients = spec.vad_coefficients();
    let rendered: Vec<_> = (0..spec.n_images).into_par_iter().map(|i| render(spec, i, &palette, &coefficients)).collect();

    let mut corpus = Corpus::default();
    let mut images = BTreeMap::new();
    let mut samples = Vec::with_capacity(rendered.len());
    for (i, (sample, responses, gender, age_group, img)) in rendered.into_iter().enumerate() {
        let (w, h) = img.dimensions();
        corpus.images.insert(
            sample.image_id.clone(),
            ImageEntry { path: format!("{IMAGE_DIR}/{}.png", sample.image_id), width: w, height: h },
        );
        corpus.persons.insert(
            person_id(i),
            PersonAnnotation {
                person_id: person_id(i),
                image_id: sample.image_id.clone(),
                bbox: sample.bbox,
                responses,
                gender,
                age_group,
            },
        );
        images.insert(sample.image_id.clone(), img);
        samples.push(sample);
    }
    corpus.meta.insert("synth".into(), synth_meta(spec, &palette, &coefficients));
    let corpus = dataset::make_splits(&corpus, SplitProportions::default(), spec.seed)?;
    corpus.validate()?;
    Ok(SynthOutput { corpus, images, samples })
}

fn synth_meta(
    spec: &SynthSpec,
    palette: &BTreeMap<CategoryId, [u8; 3]>,
    coefficients: &BTreeMap<CategoryId, [f64; NUM_DIMS]>,
) -> serde_json::Value {
    let key = |c: &CategoryId| c.get().to_string();
    serde_json::json!({
        "spec": spec,
        "vad_base": VAD_BASE,
        "vad_coefficients": coefficients.iter().map(|(c, v)| (key(c), serde_json::json!(v))).collect::<serde_json::Map<_, _>>(),
        "palette": palette.iter().map(|(c, v)| (key(c), serde_json::json!(v))).collect::<serde_json::Map<_, _>>(),
        "inactive_body": INACTIVE_BODY,
        "inactive_context": INACTIVE_CONTEXT,
    })
}

/// Writes the manifest and PNG images under `out`.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<SynthOutput> {
    let output = generate_in_memory(spec)?;
    let dir = out.join(IMAGE_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    output.images.par_iter().try_for_each(|(id, img)| {
        let path = dir.join(format!("{id}.png"));
        img.save_with_format(&path, image::ImageFormat::Png).map_err(|source| Error::Image { path, source })
    })?;
    dataset::save_corpus(&output.corpus, out)?;
    Ok(output)
}
