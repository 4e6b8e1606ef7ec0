//! The annotation corpus: manifest I/O, splits and annotator filtering.
//!
//! A manifest is UTF-8 JSON Lines, one record per line, discriminated by a
//! `kind` field:
//!
//! ```text
//! {"kind":"header","format":"emoctx-manifest","version":1,"meta":{...}}
//! {"kind":"image","image_id":"img0","path":"images/img0.png","width":64,"height":48}
//! {"kind":"person","person_id":"p0","image_id":"img0","bbox":[4,6,20,30],"gender":"female","age_group":"adult"}
//! {"kind":"response","person_id":"p0","annotator_id":"a1","categories":[17,20],"dims":[8,5,6],"valid":true}
//! {"kind":"split","person_id":"p0","split":"train"}
//! ```
//!
//! Categories are integer ids 1..=26, dims raw integers 1..=10 in
//! valence, arousal, dominance order. `dims` is omitted for responses that did
//! not cover the continuous task. The header is optional; its `meta` object is
//! free-form and preserved verbatim.
//!
//! Mapping from the official release: every annotated person becomes one
//! `person` record (bbox converted from corner form `[x1,y1,x2,y2]` to
//! `[x1,y1,x2-x1,y2-y1]`), every annotator's category list and VAD triple one
//! `response` record, and the release's train/val/test membership `split`
//! records.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{AgeGroup, AggregationPolicy, AnnotatorResponse, BBox, EmotionLabel, Gender, PersonAnnotation};
use crate::error::{Error, Result};
use crate::taxonomy::{CategoryId, NUM_CATEGORIES, NUM_DIMS};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_FORMAT: &str = "emoctx-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split '{s}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub images: BTreeMap<String, ImageEntry>,
    pub persons: BTreeMap<String, PersonAnnotation>,
    pub splits: BTreeMap<String, Split>,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        for p in self.persons.values() {
            validate_person(p, &self.images)?;
        }
        for id in self.splits.keys() {
            if !self.persons.contains_key(id) {
                return Err(Error::invalid(format!("split references unknown person {id}")));
            }
        }
        Ok(())
    }

    pub fn persons_in(&self, split: Split) -> impl Iterator<Item = &PersonAnnotation> {
        self.persons
            .values()
            .filter(move |p| self.splits.get(&p.person_id) == Some(&split))
    }

    /// Persons of `split`, or all persons when `split` is `None`.
    pub fn select(&self, split: Option<Split>) -> Vec<&PersonAnnotation> {
        match split {
            Some(s) => self.persons_in(s).collect(),
            None => self.persons.values().collect(),
        }
    }

    pub fn labels(&self, split: Option<Split>, policy: AggregationPolicy) -> Result<Vec<EmotionLabel>> {
        self.select(split).into_iter().map(|p| p.label(policy)).collect()
    }
}

fn validate_person(p: &PersonAnnotation, images: &BTreeMap<String, ImageEntry>) -> Result<()> {
    let img = images
        .get(&p.image_id)
        .ok_or_else(|| Error::invalid(format!("person {} references unknown image {}", p.person_id, p.image_id)))?;
    if !p.bbox.fits_in(img.width, img.height) {
        return Err(Error::BboxOutOfBounds {
            person_id: p.person_id.clone(),
            bbox: p.bbox.into(),
            width: img.width,
            height: img.height,
        });
    }
    for r in &p.responses {
        r.validate()
            .map_err(|e| Error::invalid(format!("person {}: {e}", p.person_id)))?;
    }
    if p.num_valid() == 0 {
        return Err(Error::invalid(format!("person {} has no valid response", p.person_id)));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Header {
        format: String,
        version: u32,
        #[serde(default)]
        meta: serde_json::Map<String, serde_json::Value>,
    },
    Image {
        image_id: String,
        path: String,
        width: u32,
        height: u32,
    },
    Person {
        person_id: String,
        image_id: String,
        bbox: BBox,
        #[serde(default)]
        gender: Gender,
        #[serde(default)]
        age_group: AgeGroup,
    },
    Response {
        person_id: String,
        annotator_id: String,
        categories: BTreeSet<CategoryId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dims: Option<[u8; NUM_DIMS]>,
        #[serde(default = "yes")]
        valid: bool,
    },
    Split {
        person_id: String,
        split: Split,
    },
}

fn yes() -> bool {
    true
}

/// Resolves a corpus location: a directory means its `manifest.jsonl`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() || path.extension().is_none() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Directory against which the corpus' relative image paths resolve.
pub fn corpus_root(path: &Path) -> PathBuf {
    manifest_path(path)
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = manifest_path(path);
    let reader = BufReader::new(fs::File::open(&file).map_err(|e| Error::io(&file, e))?);
    let schema = |line: usize, record: &str, message: String| Error::Schema {
        file: file.clone(),
        line,
        record: record.to_string(),
        message,
    };

    let mut corpus = Corpus::default();
    let mut person_lines = BTreeMap::new();
    let mut responses: Vec<(usize, String, AnnotatorResponse)> = Vec::new();
    let mut split_lines = Vec::new();

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(&file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| schema(lineno, "record", e.to_string()))?;
        match record {
            Record::Header { format, version, meta } => {
                if format != MANIFEST_FORMAT || version != MANIFEST_VERSION {
                    return Err(schema(lineno, "header", format!("unsupported format {format} v{version}")));
                }
                corpus.meta = meta;
            }
            Record::Image { image_id, path, width, height } => {
                if width == 0 || height == 0 {
                    return Err(schema(lineno, &format!("image {image_id}"), "zero-sized image".into()));
                }
                if corpus.images.insert(image_id.clone(), ImageEntry { path, width, height }).is_some() {
                    return Err(schema(lineno, &format!("image {image_id}"), "duplicate image id".into()));
                }
            }
            Record::Person { person_id, image_id, bbox, gender, age_group } => {
                let p = PersonAnnotation {
                    person_id: person_id.clone(),
                    image_id,
                    bbox,
                    responses: Vec::new(),
                    gender,
                    age_group,
                };
                if corpus.persons.insert(person_id.clone(), p).is_some() {
                    return Err(schema(lineno, &format!("person {person_id}"), "duplicate person id".into()));
                }
                person_lines.insert(person_id, lineno);
            }
            Record::Response { person_id, annotator_id, categories, dims, valid } => {
                let r = AnnotatorResponse { annotator_id, categories, dims, valid };
                responses.push((lineno, person_id, r));
            }
            Record::Split { person_id, split } => split_lines.push((lineno, person_id, split)),
        }
    }

    for (lineno, person_id, r) in responses {
        let rec = format!("response {person_id}/{}", r.annotator_id);
        r.validate().map_err(|e| schema(lineno, &rec, e.to_string()))?;
        let person = corpus
            .persons
            .get_mut(&person_id)
            .ok_or_else(|| schema(lineno, &rec, format!("unknown person {person_id}")))?;
        person.responses.push(r);
    }
    for (lineno, person_id, split) in split_lines {
        if !corpus.persons.contains_key(&person_id) {
            return Err(schema(lineno, &format!("split {person_id}"), "unknown person".into()));
        }
        if corpus.splits.insert(person_id.clone(), split).is_some() {
            return Err(schema(lineno, &format!("split {person_id}"), "duplicate split".into()));
        }
    }
    for p in corpus.persons.values() {
        let line = person_lines[&p.person_id];
        validate_person(p, &corpus.images).map_err(|e| match e {
            e @ Error::BboxOutOfBounds { .. } => e,
            other => schema(line, &format!("person {}", p.person_id), other.to_string()),
        })?;
    }
    Ok(corpus)
}

/// Writes `corpus` in canonical order: images, then each person followed by
/// its responses, then splits, all keyed lexicographically.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<PathBuf> {
    let file = if path.extension().is_some() && !path.is_dir() {
        path.to_path_buf()
    } else {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        path.join(MANIFEST_FILE)
    };
    let mut out = BufWriter::new(fs::File::create(&file).map_err(|e| Error::io(&file, e))?);
    let mut emit = |r: &Record| -> Result<()> {
        let line = serde_json::to_string(r).expect("manifest records serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(&file, e))
    };

    emit(&Record::Header {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        meta: corpus.meta.clone(),
    })?;
    for (id, img) in &corpus.images {
        emit(&Record::Image {
            image_id: id.clone(),
            path: img.path.clone(),
            width: img.width,
            height: img.height,
        })?;
    }
    for p in corpus.persons.values() {
        emit(&Record::Person {
            person_id: p.person_id.clone(),
            image_id: p.image_id.clone(),
            bbox: p.bbox,
            gender: p.gender,
            age_group: p.age_group,
        })?;
        for r in &p.responses {
            emit(&Record::Response {
                person_id: p.person_id.clone(),
                annotator_id: r.annotator_id.clone(),
                categories: r.categories.clone(),
                dims: r.dims,
                valid: r.valid,
            })?;
        }
    }
    for (id, split) in &corpus.splits {
        emit(&Record::Split {
            person_id: id.clone(),
            split: *split,
        })?;
    }
    drop(emit);
    out.flush().map_err(|e| Error::io(&file, e))?;
    Ok(file)
}

/// Invalidates every response of any annotator who labeled a control person
/// outside that person's acceptable set, then drops persons left without a
/// valid response. Unknown control ids are ignored.
pub fn filter_control_failures(corpus: &Corpus, controls: &BTreeMap<String, BTreeSet<CategoryId>>) -> Corpus {
    let mut failed: HashSet<&str> = HashSet::new();
    for (pid, acceptable) in controls {
        let Some(person) = corpus.persons.get(pid) else {
            log::warn!("control person {pid} not in corpus");
            continue;
        };
        for r in person.valid_responses() {
            if !r.categories.is_subset(acceptable) {
                failed.insert(r.annotator_id.as_str());
            }
        }
    }

    let mut out = corpus.clone();
    if failed.is_empty() {
        return out;
    }
    for p in out.persons.values_mut() {
        for r in &mut p.responses {
            if failed.contains(r.annotator_id.as_str()) {
                r.valid = false;
            }
        }
    }
    out.persons.retain(|_, p| p.num_valid() > 0);
    let persons = &out.persons;
    out.splits.retain(|id, _| persons.contains_key(id));
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitProportions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitProportions {
    fn default() -> Self {
        SplitProportions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitProportions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let p = SplitProportions { train, val, test };
        let a = p.as_array();
        if a.iter().any(|v| !v.is_finite() || *v < 0.0) || (a.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split proportions {train}/{val}/{test} must be non-negative and sum to 1"
            )));
        }
        Ok(p)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    /// Split sizes for `n` persons by largest remainder.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let exact = self.as_array().map(|p| p * n as f64);
        let mut sizes = exact.map(|e| e.floor() as usize);
        let mut left = n - sizes.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &s in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[s] += 1;
            left -= 1;
        }
        sizes
    }
}

/// Assigns every person to train/val/test, stratified by category.
///
/// Iterative stratification: repeatedly take the category with the fewest
/// unassigned persons and place each of them (seeded order) in the split,
/// among those with room, whose demand for the person's categories per
/// remaining slot is largest.
pub fn make_splits(corpus: &Corpus, proportions: SplitProportions, seed: u64) -> Result<Corpus> {
    let proportions = SplitProportions::new(proportions.train, proportions.val, proportions.test)?;
    let mut ids: Vec<&String> = corpus.persons.keys().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let cats: Vec<Vec<usize>> = ids
        .iter()
        .map(|id| {
            let set: BTreeSet<usize> = corpus.persons[*id]
                .valid_responses()
                .flat_map(|r| r.categories.iter().map(|c| c.index()))
                .collect();
            set.into_iter().collect()
        })
        .collect();

    let props = proportions.as_array();
    let mut room = proportions.sizes(ids.len()).map(|v| v as i64);
    let mut demand = [[0.0f64; NUM_CATEGORIES]; 3];
    for cs in &cats {
        for &c in cs {
            for (s, row) in demand.iter_mut().enumerate() {
                row[c] += props[s];
            }
        }
    }

    let mut assigned: Vec<Option<usize>> = vec![None; ids.len()];
    let mut left = ids.len();
    while left > 0 {
        let mut remaining = [0usize; NUM_CATEGORIES];
        for (i, cs) in cats.iter().enumerate() {
            if assigned[i].is_none() {
                for &c in cs {
                    remaining[c] += 1;
                }
            }
        }
        let rarest = (0..NUM_CATEGORIES)
            .filter(|&c| remaining[c] > 0)
            .min_by_key(|&c| (remaining[c], c));

        for i in 0..ids.len() {
            if assigned[i].is_some() || rarest.is_some_and(|c| !cats[i].contains(&c)) {
                continue;
            }
            // Outstanding demand per remaining slot, summed over the person's
            // categories.
            let need = |s: usize| -> f64 { cats[i].iter().map(|&c| demand[s][c]).sum::<f64>() / room[s] as f64 };
            let best = (0..3)
                .filter(|&s| room[s] > 0)
                .max_by(|&a, &b| need(a).total_cmp(&need(b)).then(room[a].cmp(&room[b])).then(b.cmp(&a)))
                .expect("split sizes cover every person");
            assigned[i] = Some(best);
            room[best] -= 1;
            left -= 1;
            for &c in &cats[i] {
                demand[best][c] -= 1.0;
            }
        }
    }

    let mut out = corpus.clone();
    out.splits = ids
        .into_iter()
        .zip(assigned)
        .map(|(id, s)| (id.clone(), Split::ALL[s.expect("every person assigned")]))
        .collect();
    Ok(out)
}
