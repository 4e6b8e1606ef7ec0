//! Turns corpus persons into network inputs: the box crop and the whole
//! image, each resized bilinearly to its branch's input size.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rayon::prelude::*;

use crate::annotation::AggregationPolicy;
use crate::dataset::{corpus_root, load_corpus, Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{image_tensor, ModelConfig};
use crate::taxonomy::{NUM_CATEGORIES, NUM_DIMS};

/// Where image pixels come from.
pub enum ImageSource<'a> {
    /// Files named by the corpus, relative to this directory.
    Files(PathBuf),
    Memory(&'a BTreeMap<String, RgbImage>),
}

impl ImageSource<'_> {
    fn load(&self, corpus: &Corpus, image_id: &str) -> Result<RgbImage> {
        match self {
            ImageSource::Memory(m) => m
                .get(image_id)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("no pixels for image {image_id}"))),
            ImageSource::Files(root) => {
                let entry = &corpus.images[image_id];
                let path = root.join(&entry.path);
                let img = image::open(&path).map_err(|source| Error::Image { path: path.clone(), source })?.to_rgb8();
                if img.dimensions() != (entry.width, entry.height) {
                    return Err(Error::invalid(format!(
                        "{}: {}x{} pixels, manifest says {}x{}",
                        path.display(),
                        img.width(),
                        img.height(),
                        entry.width,
                        entry.height
                    )));
                }
                Ok(img)
            }
        }
    }
}

/// Network-ready persons of one split, in person-id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub person_ids: Vec<String>,
    pub body: Vec<Vec<f64>>,
    pub context: Vec<Vec<f64>>,
    pub disc: Vec<[f64; NUM_CATEGORIES]>,
    /// Normalized VAD targets.
    pub cont: Vec<[f64; NUM_DIMS]>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.person_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.person_ids.is_empty()
    }

    pub fn inputs(&self) -> Vec<(&[f64], &[f64])> {
        self.body.iter().zip(&self.context).map(|(b, c)| (b.as_slice(), c.as_slice())).collect()
    }
}

fn resize(img: &RgbImage, (w, h): (usize, usize)) -> RgbImage {
    if img.dimensions() == (w as u32, h as u32) {
        img.clone()
    } else {
        imageops::resize(img, w as u32, h as u32, FilterType::Triangle)
    }
}

pub fn prepare(corpus: &Corpus, split: Option<Split>, source: &ImageSource, model: &ModelConfig, policy: AggregationPolicy) -> Result<Dataset> {
    let persons = corpus.select(split);
    let rows: Vec<_> = persons
        .par_iter()
        .map(|p| -> Result<_> {
            let label = p.label(policy)?;
            let img = source.load(corpus, &p.image_id)?;
            let b = p.bbox;
            let crop = imageops::crop_imm(&img, b.x, b.y, b.width, b.height).to_image();
            let body = image_tensor(&resize(&crop, model.body.input_size));
            let context = image_tensor(&resize(&img, model.context.input_size));
            Ok((p.person_id.clone(), body, context, label.discrete, label.continuous))
        })
        .collect::<Result<_>>()?;
    let mut d = Dataset::default();
    for (id, b, c, disc, cont) in rows {
        d.person_ids.push(id);
        d.body.push(b);
        d.context.push(c);
        d.disc.push(disc);
        d.cont.push(cont);
    }
    Ok(d)
}

/// Train, validation and test sets of one corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SplitData {
    pub fn prepare(corpus: &Corpus, source: &ImageSource, model: &ModelConfig, policy: AggregationPolicy) -> Result<Self> {
        let get = |s| prepare(corpus, Some(s), source, model, policy);
        Ok(SplitData { train: get(Split::Train)?, val: get(Split::Val)?, test: get(Split::Test)? })
    }

    /// Loads the corpus at `path` with its images from disk.
    pub fn load(path: &Path, model: &ModelConfig, policy: AggregationPolicy) -> Result<(Corpus, Self)> {
        let corpus = load_corpus(path)?;
        let data = Self::prepare(&corpus, &ImageSource::Files(corpus_root(path)), model, policy)?;
        Ok((corpus, data))
    }

    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}
