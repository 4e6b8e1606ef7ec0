//! Annotation records and the aggregation of several annotators into one
//! ground-truth label.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{normalize, CategoryId, ContinuousDims, NUM_CATEGORIES, NUM_DIMS, RAW_MAX, RAW_MIN};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorResponse {
    pub annotator_id: String,
    pub categories: BTreeSet<CategoryId>,
    /// Raw valence, arousal, dominance in `1..=10`; absent when the annotator
    /// did not take the continuous-dimension task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<[u8; NUM_DIMS]>,
    #[serde(default = "default_true")]
    pub valid: bool,
}

fn default_true() -> bool {
    true
}

impl AnnotatorResponse {
    pub fn new(annotator_id: impl Into<String>, categories: impl IntoIterator<Item = CategoryId>, dims: Option<[u8; NUM_DIMS]>) -> Self {
        AnnotatorResponse {
            annotator_id: annotator_id.into(),
            categories: categories.into_iter().collect(),
            dims,
            valid: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.valid && self.categories.is_empty() {
            return Err(Error::invalid(format!(
                "annotator {}: valid response without categories",
                self.annotator_id
            )));
        }
        if let Some(d) = self.dims {
            if d.iter().any(|v| !(RAW_MIN..=RAW_MAX).contains(v)) {
                return Err(Error::invalid(format!(
                    "annotator {}: dims {:?} outside {RAW_MIN}..={RAW_MAX}",
                    self.annotator_id, d
                )));
            }
        }
        Ok(())
    }

    pub fn raw_dims(&self) -> Option<ContinuousDims> {
        self.dims
            .map(|d| ContinuousDims::new(d[0] as f64, d[1] as f64, d[2] as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgeGroup {
    Child,
    Teenager,
    Adult,
    #[default]
    Unknown,
}

impl Gender {
    pub const ALL: [Gender; 3] = [Gender::Male, Gender::Female, Gender::Unknown];

    pub fn name(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Unknown => "unknown",
        }
    }
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 4] = [AgeGroup::Child, AgeGroup::Teenager, AgeGroup::Adult, AgeGroup::Unknown];

    pub fn name(self) -> &'static str {
        match self {
            AgeGroup::Child => "child",
            AgeGroup::Teenager => "teenager",
            AgeGroup::Adult => "adult",
            AgeGroup::Unknown => "unknown",
        }
    }
}

/// Axis-aligned box in pixels: `(x, y, width, height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl BBox {
    pub fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        BBox { x, y, width, height }
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.width > 0
            && self.height > 0
            && self.x as u64 + self.width as u64 <= width as u64
            && self.y as u64 + self.height as u64 <= height as u64
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && py >= self.y && px < self.x + self.width && py < self.y + self.height
    }
}

impl From<[u32; 4]> for BBox {
    fn from(a: [u32; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.width, b.height]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonAnnotation {
    pub person_id: String,
    pub image_id: String,
    pub bbox: BBox,
    pub responses: Vec<AnnotatorResponse>,
    pub gender: Gender,
    pub age_group: AgeGroup,
}

impl PersonAnnotation {
    pub fn valid_responses(&self) -> impl Iterator<Item = &AnnotatorResponse> {
        self.responses.iter().filter(|r| r.valid)
    }

    pub fn num_valid(&self) -> usize {
        self.valid_responses().count()
    }

    pub fn label(&self, policy: AggregationPolicy) -> Result<EmotionLabel> {
        aggregate_responses(&self.responses, policy).map_err(|e| match e {
            Error::MissingDims(_) => Error::MissingDims(self.person_id.clone()),
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationPolicy {
    /// A category is set when at least one annotator chose it.
    #[default]
    Union,
    /// A category is set when more than half of the annotators chose it.
    Majority,
    /// Each category holds the fraction of annotators that chose it.
    Fraction,
}

impl FromStr for AggregationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "union" => Ok(AggregationPolicy::Union),
            "majority" => Ok(AggregationPolicy::Majority),
            "fraction" => Ok(AggregationPolicy::Fraction),
            _ => Err(Error::Config(format!(
                "unknown aggregation policy '{s}' (expected union, majority or fraction)"
            ))),
        }
    }
}

impl fmt::Display for AggregationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationPolicy::Union => "union",
            AggregationPolicy::Majority => "majority",
            AggregationPolicy::Fraction => "fraction",
        })
    }
}

/// Aggregated ground truth for one person. `continuous` is on the
/// normalized `[0, 1]` scale.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionLabel {
    pub discrete: [f64; NUM_CATEGORIES],
    pub continuous: [f64; NUM_DIMS],
}

impl EmotionLabel {
    /// A label counts as containing a category when its value is at least 0.5.
    pub fn has(&self, category: CategoryId) -> bool {
        self.discrete[category.index()] >= 0.5
    }

    pub fn categories(&self) -> BTreeSet<CategoryId> {
        CategoryId::all().filter(|&c| self.has(c)).collect()
    }

    pub fn raw_continuous(&self) -> ContinuousDims {
        ContinuousDims::from_array(self.continuous).denormalized()
    }
}

pub fn aggregate_responses(responses: &[AnnotatorResponse], policy: AggregationPolicy) -> Result<EmotionLabel> {
    let discrete = aggregate_categories(responses, policy)?;
    let raw = mean_raw_dims(responses).ok_or_else(|| Error::MissingDims(String::new()))?;
    Ok(EmotionLabel {
        discrete,
        continuous: raw.map(normalize),
    })
}

/// Discrete half of [`aggregate_responses`].
pub fn aggregate_categories(responses: &[AnnotatorResponse], policy: AggregationPolicy) -> Result<[f64; NUM_CATEGORIES]> {
    let mut counts = [0usize; NUM_CATEGORIES];
    let mut n = 0usize;
    for r in responses.iter().filter(|r| r.valid) {
        n += 1;
        for c in &r.categories {
            counts[c.index()] += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyAnnotation);
    }
    Ok(counts.map(|k| match policy {
        AggregationPolicy::Union => (k >= 1) as u8 as f64,
        AggregationPolicy::Majority => (2 * k > n) as u8 as f64,
        AggregationPolicy::Fraction => k as f64 / n as f64,
    }))
}

/// Mean raw dims over valid responses that carry them.
pub fn mean_raw_dims(responses: &[AnnotatorResponse]) -> Option<[f64; NUM_DIMS]> {
    let mut sum = [0.0; NUM_DIMS];
    let mut n = 0usize;
    for d in responses.iter().filter(|r| r.valid).filter_map(|r| r.dims) {
        for (s, &v) in sum.iter_mut().zip(&d) {
            *s += v as f64;
        }
        n += 1;
    }
    (n > 0).then(|| sum.map(|s| s / n as f64))
}
