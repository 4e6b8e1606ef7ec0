//! Dataset statistics: category co-occurrence, per-category dimension
//! profiles, corpus counts and cross-tabulation against external image tags.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::annotation::{aggregate_categories, mean_raw_dims, AgeGroup, AggregationPolicy, EmotionLabel, Gender, PersonAnnotation};
use crate::dataset::Corpus;
use crate::error::{Error, Result};
use crate::taxonomy::{CategoryId, Dimension, NUM_CATEGORIES, NUM_DIMS, RAW_MAX};

/// `values[r][c] = P(r | c)` in percent. Columns of categories that never
/// occur are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceMatrix {
    pub values: [[f64; NUM_CATEGORIES]; NUM_CATEGORIES],
}

impl CooccurrenceMatrix {
    pub fn get(&self, row: CategoryId, col: CategoryId) -> f64 {
        self.values[row.index()][col.index()]
    }

    /// Row-major with a header row and a first column of category names.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["row|col".to_string()];
        header.extend(CategoryId::all().map(|c| c.name().to_string()));
        w.write_record(&header)?;
        for r in CategoryId::all() {
            let mut row = vec![r.name().to_string()];
            row.extend(self.values[r.index()].iter().map(|v| if v.is_nan() { "NaN".into() } else { format!("{v:.4}") }));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub fn cooccurrence(labels: &[EmotionLabel]) -> CooccurrenceMatrix {
    let mut joint = [[0usize; NUM_CATEGORIES]; NUM_CATEGORIES];
    for l in labels {
        let cats: Vec<usize> = l.categories().into_iter().map(|c| c.index()).collect();
        for &r in &cats {
            for &c in &cats {
                joint[r][c] += 1;
            }
        }
    }
    let mut values = [[f64::NAN; NUM_CATEGORIES]; NUM_CATEGORIES];
    for c in 0..NUM_CATEGORIES {
        let col = joint[c][c];
        if col == 0 {
            continue;
        }
        for r in 0..NUM_CATEGORIES {
            values[r][c] = 100.0 * joint[r][c] as f64 / col as f64;
        }
    }
    CooccurrenceMatrix { values }
}

/// For each dimension, `(category, mean raw value)` over labels containing
/// the category, ascending by mean (ties by category id). Categories that
/// never occur are omitted.
pub fn dimension_by_category(labels: &[EmotionLabel]) -> [Vec<(CategoryId, f64)>; NUM_DIMS] {
    let mut sums = [[0.0; NUM_DIMS]; NUM_CATEGORIES];
    let mut counts = [0usize; NUM_CATEGORIES];
    for l in labels {
        let raw = l.raw_continuous().to_array();
        for c in l.categories() {
            counts[c.index()] += 1;
            for k in 0..NUM_DIMS {
                sums[c.index()][k] += raw[k];
            }
        }
    }
    let missing: Vec<&str> = CategoryId::all().filter(|c| counts[c.index()] == 0).map(|c| c.name()).collect();
    if !missing.is_empty() {
        log::warn!("no labels for categories: {}", missing.join(", "));
    }
    Dimension::ALL.map(|d| {
        let mut v: Vec<(CategoryId, f64)> = CategoryId::all()
            .filter(|c| counts[c.index()] > 0)
            .map(|c| (c, sums[c.index()][d.index()] / counts[c.index()] as f64))
            .collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1));
        v
    })
}

pub fn write_dimension_profiles(profiles: &[Vec<(CategoryId, f64)>; NUM_DIMS], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dimension", "rank", "category", "mean"])?;
    for d in Dimension::ALL {
        for (i, (c, m)) in profiles[d.index()].iter().enumerate() {
            w.write_record([d.name().to_string(), (i + 1).to_string(), c.name().to_string(), format!("{m:.6}")])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStatistics {
    pub persons: usize,
    pub images: usize,
    pub category_counts: [usize; NUM_CATEGORIES],
    /// `[dimension][value - 1]`: persons whose mean raw value rounds to `value`.
    pub dim_value_counts: [[usize; RAW_MAX as usize]; NUM_DIMS],
    pub gender: BTreeMap<Gender, f64>,
    pub age: BTreeMap<AgeGroup, f64>,
}

/// Exact counts over every person of the corpus. Dimension counts use each
/// person's mean raw value rounded half away from zero.
pub fn corpus_statistics(corpus: &Corpus, policy: AggregationPolicy) -> Result<CorpusStatistics> {
    let mut category_counts = [0usize; NUM_CATEGORIES];
    let mut dim_value_counts = [[0usize; RAW_MAX as usize]; NUM_DIMS];
    let mut gender: BTreeMap<Gender, f64> = Gender::ALL.iter().map(|&g| (g, 0.0)).collect();
    let mut age: BTreeMap<AgeGroup, f64> = AgeGroup::ALL.iter().map(|&a| (a, 0.0)).collect();
    for p in corpus.persons.values() {
        let disc = aggregate_categories(&p.responses, policy)?;
        for (i, &v) in disc.iter().enumerate() {
            if v >= 0.5 {
                category_counts[i] += 1;
            }
        }
        if let Some(d) = mean_raw_dims(&p.responses) {
            for k in 0..NUM_DIMS {
                dim_value_counts[k][d[k].round() as usize - 1] += 1;
            }
        }
        *gender.get_mut(&p.gender).unwrap() += 1.0;
        *age.get_mut(&p.age_group).unwrap() += 1.0;
    }
    let n = corpus.persons.len();
    if n > 0 {
        gender.values_mut().for_each(|v| *v /= n as f64);
        age.values_mut().for_each(|v| *v /= n as f64);
    }
    Ok(CorpusStatistics {
        persons: n,
        images: corpus.images.len(),
        category_counts,
        dim_value_counts,
        gender,
        age,
    })
}

impl CorpusStatistics {
    /// Writes `category_counts.csv`, `dimension_counts.csv` and
    /// `demographics.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = csv::Writer::from_path(dir.join("category_counts.csv"))?;
        w.write_record(["category_id", "category", "persons"])?;
        for c in CategoryId::all() {
            w.write_record([c.get().to_string(), c.name().to_string(), self.category_counts[c.index()].to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("dimension_counts.csv"))?;
        w.write_record(["value", "valence", "arousal", "dominance"])?;
        for v in 0..RAW_MAX as usize {
            w.write_record([
                (v + 1).to_string(),
                self.dim_value_counts[0][v].to_string(),
                self.dim_value_counts[1][v].to_string(),
                self.dim_value_counts[2][v].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("demographics.csv"))?;
        w.write_record(["attribute", "value", "proportion"])?;
        w.write_record(["total", "persons", &self.persons.to_string()])?;
        w.write_record(["total", "images", &self.images.to_string()])?;
        for (g, p) in &self.gender {
            w.write_record(["gender", g.name(), &format!("{p:.6}")])?;
        }
        for (a, p) in &self.age {
            w.write_record(["age_group", a.name(), &format!("{p:.6}")])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossTabRow {
    pub tag: String,
    pub persons: usize,
    /// Share of the tag's persons labeled with each category.
    pub category_freq: [f64; NUM_CATEGORIES],
    /// Mean raw dims over the tag's persons that have them.
    pub mean_dims: [f64; NUM_DIMS],
    pub persons_with_dims: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossTab {
    pub rows: Vec<CrossTabRow>,
    /// Same statistics over every person of the corpus.
    pub global: CrossTabRow,
}

fn tabulate(tag: &str, persons: &[&PersonAnnotation], policy: AggregationPolicy) -> Result<CrossTabRow> {
    let mut freq = [0.0; NUM_CATEGORIES];
    let mut dims = [0.0; NUM_DIMS];
    let mut with_dims = 0usize;
    for p in persons {
        let disc = aggregate_categories(&p.responses, policy)?;
        for (f, v) in freq.iter_mut().zip(disc) {
            if v >= 0.5 {
                *f += 1.0;
            }
        }
        if let Some(d) = mean_raw_dims(&p.responses) {
            with_dims += 1;
            for k in 0..NUM_DIMS {
                dims[k] += d[k];
            }
        }
    }
    let n = persons.len();
    Ok(CrossTabRow {
        tag: tag.to_string(),
        persons: n,
        category_freq: freq.map(|f| if n == 0 { f64::NAN } else { f / n as f64 }),
        mean_dims: dims.map(|d| if with_dims == 0 { f64::NAN } else { d / with_dims as f64 }),
        persons_with_dims: with_dims,
    })
}

/// Emotion statistics of the persons in images carrying each external tag
/// (a scene category, an attribute, a detected concept...).
pub fn cross_tabulate(
    corpus: &Corpus,
    tags: &BTreeMap<String, BTreeSet<String>>,
    policy: AggregationPolicy,
) -> Result<CrossTab> {
    let mut by_tag: BTreeMap<&str, Vec<&PersonAnnotation>> = BTreeMap::new();
    for (image, set) in tags {
        if !corpus.images.contains_key(image) {
            log::warn!("external tags reference unknown image {image}");
        }
        for t in set {
            by_tag.entry(t.as_str()).or_default();
        }
    }
    for p in corpus.persons.values() {
        if let Some(set) = tags.get(&p.image_id) {
            for t in set {
                by_tag.get_mut(t.as_str()).unwrap().push(p);
            }
        }
    }
    let rows = by_tag
        .iter()
        .map(|(t, ps)| tabulate(t, ps, policy))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<&PersonAnnotation> = corpus.persons.values().collect();
    Ok(CrossTab {
        rows,
        global: tabulate("*", &all, policy)?,
    })
}

/// One row per tag (and a final `*` row over all persons): person count,
/// per-category frequency, mean raw dims.
pub fn write_cross_tab(tab: &CrossTab, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["tag".to_string(), "persons".to_string()];
    header.extend(CategoryId::all().map(|c| c.name().to_string()));
    header.extend(Dimension::ALL.iter().map(|d| format!("mean_{}", d.name())));
    w.write_record(&header)?;
    for r in tab.rows.iter().chain(std::iter::once(&tab.global)) {
        let mut row = vec![r.tag.clone(), r.persons.to_string()];
        row.extend(r.category_freq.iter().map(|v| format!("{v:.6}")));
        row.extend(r.mean_dims.iter().map(|v| format!("{v:.6}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{AnnotatorResponse, BBox};
    use crate::dataset::ImageEntry;
    use crate::taxonomy::normalize;

    fn cat(id: u8) -> CategoryId {
        CategoryId::new(id).unwrap()
    }

    fn label(cats: &[u8], v: f64) -> EmotionLabel {
        let mut discrete = [0.0; NUM_CATEGORIES];
        for &c in cats {
            discrete[c as usize - 1] = 1.0;
        }
        EmotionLabel { discrete, continuous: [normalize(v), normalize(5.0), normalize(5.0)] }
    }

    #[test]
    fn cooccurrence_examples() {
        let m = cooccurrence(&vec![label(&[1, 2], 5.0); 3]);
        assert_eq!(m.get(cat(1), cat(2)), 100.0);
        assert_eq!(m.get(cat(2), cat(1)), 100.0);
        assert!(m.get(cat(3), cat(3)).is_nan());

        // A in 4 labels, A and B together in 2, B alone in 1
        let labels = vec![label(&[1, 2], 5.0), label(&[1, 2], 5.0), label(&[1], 5.0), label(&[1], 5.0), label(&[2], 5.0)];
        let m = cooccurrence(&labels);
        assert_eq!(m.get(cat(2), cat(1)), 50.0);
        // asymmetric: P(A|B) = 2/3
        assert!((m.get(cat(1), cat(2)) - 200.0 / 3.0).abs() < 1e-12);
        for c in [cat(1), cat(2)] {
            assert_eq!(m.get(c, c), 100.0);
        }
        for row in &m.values {
            for v in row.iter().filter(|v| !v.is_nan()) {
                assert!((0.0..=100.0).contains(v));
            }
        }
    }

    #[test]
    fn dimension_profiles() {
        let same = vec![label(&[3, 1], 5.0), label(&[2], 5.0)];
        let p = dimension_by_category(&same);
        assert_eq!(p[0].iter().map(|x| x.0.get()).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(p[0].iter().all(|x| (x.1 - 5.0).abs() < 1e-12));

        let suffering = cat(23);
        let happiness = cat(17);
        let labels = vec![label(&[23], 2.0), label(&[23], 3.0), label(&[17], 8.0), label(&[17], 9.0)];
        let p = dimension_by_category(&labels);
        assert_eq!(p[0][0].0, suffering);
        assert!((p[0][0].1 - 2.5).abs() < 1e-12);
        assert_eq!(p[0][1].0, happiness);
        assert!((p[0][1].1 - 8.5).abs() < 1e-12);

        let mut doubled = labels.clone();
        doubled.extend(labels.iter().cloned());
        let q = dimension_by_category(&doubled);
        for d in 0..3 {
            let a: Vec<_> = p[d].iter().map(|x| x.0).collect();
            let b: Vec<_> = q[d].iter().map(|x| x.0).collect();
            assert_eq!(a, b);
        }
    }

    fn fixture() -> Corpus {
        let mut c = Corpus::default();
        for i in 0..3 {
            c.images.insert(format!("img{i}"), ImageEntry { path: format!("img{i}.png"), width: 20, height: 20 });
        }
        let mk = |pid: &str, img: &str, sets: &[(&[u8], [u8; 3])], g: Gender, a: AgeGroup| PersonAnnotation {
            person_id: pid.into(),
            image_id: img.into(),
            bbox: BBox::new(0, 0, 5, 5),
            responses: sets
                .iter()
                .enumerate()
                .map(|(i, (cs, d))| AnnotatorResponse::new(format!("a{i}"), cs.iter().map(|&x| cat(x)), Some(*d)))
                .collect(),
            gender: g,
            age_group: a,
        };
        c.persons.insert("p0".into(), mk("p0", "img0", &[(&[14], [7, 9, 8]), (&[14, 4], [8, 8, 8])], Gender::Male, AgeGroup::Adult));
        c.persons.insert("p1".into(), mk("p1", "img1", &[(&[21], [2, 3, 3])], Gender::Female, AgeGroup::Child));
        c.persons.insert("p2".into(), mk("p2", "img2", &[(&[14], [6, 7, 6]), (&[21], [5, 4, 6])], Gender::Male, AgeGroup::Adult));
        c
    }

    #[test]
    fn corpus_statistics_counts() {
        let s = corpus_statistics(&Corpus::default(), AggregationPolicy::Union).unwrap();
        assert_eq!(s.persons, 0);
        assert!(s.category_counts.iter().all(|&v| v == 0));
        assert!(s.gender.values().all(|&v| v == 0.0));

        let s = corpus_statistics(&fixture(), AggregationPolicy::Union).unwrap();
        assert_eq!(s.persons, 3);
        assert_eq!(s.category_counts[13], 2); // Excitement
        assert_eq!(s.category_counts[3], 1); // Anticipation
        assert_eq!(s.category_counts[20], 2); // Sadness
        // valence means: 7.5 -> 8, 2 -> 2, 5.5 -> 6
        assert_eq!(s.dim_value_counts[0][7], 1);
        assert_eq!(s.dim_value_counts[0][1], 1);
        assert_eq!(s.dim_value_counts[0][5], 1);
        assert!((s.gender[&Gender::Male] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.gender.values().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((s.age.values().sum::<f64>() - 1.0).abs() < 1e-9);
        let dir = tempfile::tempdir().unwrap();
        s.write_csv(dir.path()).unwrap();
        assert!(dir.path().join("demographics.csv").exists());
    }

    #[test]
    fn cross_tab_examples() {
        let c = fixture();
        let everywhere: BTreeMap<String, BTreeSet<String>> =
            c.images.keys().map(|k| (k.clone(), BTreeSet::from(["all".to_string()]))).collect();
        let t = cross_tabulate(&c, &everywhere, AggregationPolicy::Union).unwrap();
        assert_eq!(t.rows[0].category_freq, t.global.category_freq);

        let sport = BTreeMap::from([("img0".to_string(), BTreeSet::from(["sport".to_string()]))]);
        let t = cross_tabulate(&c, &sport, AggregationPolicy::Union).unwrap();
        assert_eq!(t.rows[0].category_freq[13], 1.0);
        assert_eq!(t.rows[0].persons, 1);

        let partition = BTreeMap::from([
            ("img0".to_string(), BTreeSet::from(["a".to_string()])),
            ("img1".to_string(), BTreeSet::from(["b".to_string()])),
            ("img2".to_string(), BTreeSet::from(["b".to_string()])),
        ]);
        let t = cross_tabulate(&c, &partition, AggregationPolicy::Union).unwrap();
        for i in 0..NUM_CATEGORIES {
            let weighted: f64 = t.rows.iter().map(|r| r.persons as f64 / 3.0 * r.category_freq[i]).sum();
            assert!((weighted - t.global.category_freq[i]).abs() < 1e-9);
        }
        let dir = tempfile::tempdir().unwrap();
        write_cross_tab(&t, &dir.path().join("x.csv")).unwrap();
    }
}
