//! Inter-annotator agreement: Fleiss' kappa, per-person category agreement
//! and the spread of the continuous dimensions.

use std::collections::BTreeMap;
use std::path::Path;

use crate::annotation::PersonAnnotation;
use crate::error::{Error, Result};
use crate::taxonomy::{CategoryId, ContinuousDims, Dimension, NUM_CATEGORIES, NUM_DIMS};

/// Fleiss' kappa of an items x categories count table where every row sums
/// to `raters`.
pub fn fleiss_kappa(table: &[Vec<usize>], raters: usize) -> Result<f64> {
    if table.len() < 2 {
        return Err(Error::invalid("fleiss kappa needs at least 2 items"));
    }
    if raters < 2 {
        return Err(Error::invalid("fleiss kappa needs at least 2 raters"));
    }
    let k = table[0].len();
    for (i, row) in table.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Shape(format!("item {i} has {} categories, expected {k}", row.len())));
        }
        let sum: usize = row.iter().sum();
        if sum != raters {
            return Err(Error::invalid(format!("item {i} counts sum to {sum}, expected {raters}")));
        }
    }

    let n = raters as f64;
    let items = table.len() as f64;
    let observed = table
        .iter()
        .map(|row| {
            let sq: usize = row.iter().map(|&c| c * c).sum();
            (sq as f64 - n) / (n * (n - 1.0))
        })
        .sum::<f64>()
        / items;
    let chance: f64 = (0..k)
        .map(|j| {
            let p = table.iter().map(|row| row[j]).sum::<usize>() as f64 / (items * n);
            p * p
        })
        .sum();

    if chance >= 1.0 {
        return Err(Error::UndefinedKappa);
    }
    if observed == 1.0 {
        return Ok(1.0);
    }
    Ok((observed - chance) / (1.0 - chance))
}

/// Share of valid responses selecting each category, over a set of persons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryPrevalence(pub [f64; NUM_CATEGORIES]);

impl CategoryPrevalence {
    pub fn from_persons<'a>(persons: impl IntoIterator<Item = &'a PersonAnnotation>) -> Self {
        let mut counts = [0usize; NUM_CATEGORIES];
        let mut n = 0usize;
        for p in persons {
            for r in p.valid_responses() {
                n += 1;
                for c in &r.categories {
                    counts[c.index()] += 1;
                }
            }
        }
        CategoryPrevalence(counts.map(|k| if n == 0 { 0.0 } else { k as f64 / n as f64 }))
    }
}

/// Mean over the 26 categories of a per-category kappa for one person.
///
/// A single person is a single rated item, so chance agreement cannot come
/// from the person alone: each category's binary chance agreement is
/// `π² + (1-π)²` with `π` the category's prevalence over the split.
pub fn person_agreement(person: &PersonAnnotation, prevalence: &CategoryPrevalence) -> Result<f64> {
    let valid: Vec<_> = person.valid_responses().collect();
    let n = valid.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "person {}: agreement needs at least 2 valid responses, found {n}",
            person.person_id
        )));
    }
    let nf = n as f64;
    let mut total = 0.0;
    for c in CategoryId::all() {
        let yes = valid.iter().filter(|r| r.categories.contains(&c)).count();
        let no = n - yes;
        let observed = ((yes * yes + no * no) as f64 - nf) / (nf * (nf - 1.0));
        let pi = prevalence.0[c.index()];
        let chance = pi * pi + (1.0 - pi) * (1.0 - pi);
        total += if observed == 1.0 || chance >= 1.0 {
            1.0
        } else {
            (observed - chance) / (1.0 - chance)
        };
    }
    Ok(total / NUM_CATEGORIES as f64)
}

/// Population standard deviation of each raw dimension across annotators.
pub fn dimension_sd(person: &PersonAnnotation) -> Result<ContinuousDims> {
    let dims: Vec<[u8; NUM_DIMS]> = person.valid_responses().filter_map(|r| r.dims).collect();
    if dims.len() < 2 {
        return Err(Error::invalid(format!(
            "person {}: dimension SD needs at least 2 responses with dims, found {}",
            person.person_id,
            dims.len()
        )));
    }
    let n = dims.len() as f64;
    let mut sd = [0.0; NUM_DIMS];
    for (k, out) in sd.iter_mut().enumerate() {
        let mean = dims.iter().map(|d| d[k] as f64).sum::<f64>() / n;
        let var = dims.iter().map(|d| (d[k] as f64 - mean).powi(2)).sum::<f64>() / n;
        *out = var.sqrt();
    }
    Ok(ContinuousDims::from_array(sd))
}

pub const AGREEMENT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    pub per_person_kappa: BTreeMap<String, f64>,
    /// For each category, the fraction of a person's annotators that chose it,
    /// over every person where at least one did.
    pub per_category_agreement: Vec<Vec<f64>>,
    pub per_dim_sd: BTreeMap<String, ContinuousDims>,
    pub mean_kappa: f64,
    pub mean_sd: ContinuousDims,
    /// Persons with fewer than two valid responses, excluded throughout.
    pub skipped: usize,
}

impl AgreementReport {
    /// Histogram of agreement fractions in equal-width bins over `(0, 1]`.
    pub fn category_histogram(&self, category: CategoryId) -> [usize; AGREEMENT_BINS] {
        let mut bins = [0usize; AGREEMENT_BINS];
        for &f in &self.per_category_agreement[category.index()] {
            let b = ((f * AGREEMENT_BINS as f64).ceil() as usize).clamp(1, AGREEMENT_BINS) - 1;
            bins[b] += 1;
        }
        bins
    }

    pub fn share_above(&self, kappa: f64) -> f64 {
        if self.per_person_kappa.is_empty() {
            return f64::NAN;
        }
        self.per_person_kappa.values().filter(|&&k| k > kappa).count() as f64 / self.per_person_kappa.len() as f64
    }
}

/// Agreement statistics over `persons`; chance agreement uses the prevalence
/// over the same persons.
pub fn agreement_report(persons: &[&PersonAnnotation]) -> Result<AgreementReport> {
    let prevalence = CategoryPrevalence::from_persons(persons.iter().copied());
    let mut per_person_kappa = BTreeMap::new();
    let mut per_category_agreement = vec![Vec::new(); NUM_CATEGORIES];
    let mut per_dim_sd = BTreeMap::new();
    let mut skipped = 0;

    for p in persons {
        let n = p.num_valid();
        if n < 2 {
            skipped += 1;
            continue;
        }
        per_person_kappa.insert(p.person_id.clone(), person_agreement(p, &prevalence)?);
        for c in CategoryId::all() {
            let yes = p.valid_responses().filter(|r| r.categories.contains(&c)).count();
            if yes > 0 {
                per_category_agreement[c.index()].push(yes as f64 / n as f64);
            }
        }
        if p.valid_responses().filter(|r| r.dims.is_some()).count() >= 2 {
            per_dim_sd.insert(p.person_id.clone(), dimension_sd(p)?);
        }
    }

    let mean_kappa = crate::metrics::nan_mean(per_person_kappa.values().copied());
    let mut mean_sd = [0.0; NUM_DIMS];
    for d in Dimension::ALL {
        mean_sd[d.index()] = crate::metrics::nan_mean(per_dim_sd.values().map(|s| s.get(d)));
    }
    Ok(AgreementReport {
        per_person_kappa,
        per_category_agreement,
        per_dim_sd,
        mean_kappa,
        mean_sd: ContinuousDims::from_array(mean_sd),
        skipped,
    })
}

/// Writes `kappa.csv` (persons by decreasing kappa), `category_agreement.csv`
/// (histogram per category), `dimension_sd.csv` and `agreement_summary.csv`.
pub fn write_agreement_report(report: &AgreementReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut kappas: Vec<(&String, &f64)> = report.per_person_kappa.iter().collect();
    kappas.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
    let mut w = csv::Writer::from_path(dir.join("kappa.csv"))?;
    w.write_record(["rank", "person_id", "kappa"])?;
    for (i, (id, k)) in kappas.iter().enumerate() {
        w.write_record([(i + 1).to_string(), id.to_string(), format!("{k:.6}")])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let mut w = csv::Writer::from_path(dir.join("category_agreement.csv"))?;
    let mut header = vec!["category".to_string(), "persons".to_string(), "mean_fraction".to_string()];
    header.extend((1..=AGREEMENT_BINS).map(|b| format!("le_{:.1}", b as f64 / AGREEMENT_BINS as f64)));
    w.write_record(&header)?;
    for c in CategoryId::all() {
        let fr = &report.per_category_agreement[c.index()];
        let mut row = vec![
            c.name().to_string(),
            fr.len().to_string(),
            format!("{:.6}", crate::metrics::nan_mean(fr.iter().copied())),
        ];
        row.extend(report.category_histogram(c).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let mut w = csv::Writer::from_path(dir.join("dimension_sd.csv"))?;
    w.write_record(["person_id", "valence_sd", "arousal_sd", "dominance_sd"])?;
    for (id, sd) in &report.per_dim_sd {
        w.write_record([
            id.clone(),
            format!("{:.6}", sd.valence),
            format!("{:.6}", sd.arousal),
            format!("{:.6}", sd.dominance),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let mut w = csv::Writer::from_path(dir.join("agreement_summary.csv"))?;
    w.write_record(["statistic", "value"])?;
    let rows = [
        ("persons", report.per_person_kappa.len() as f64),
        ("skipped", report.skipped as f64),
        ("mean_kappa", report.mean_kappa),
        ("share_kappa_above_0.30", report.share_above(0.30)),
        ("mean_valence_sd", report.mean_sd.valence),
        ("mean_arousal_sd", report.mean_sd.arousal),
        ("mean_dominance_sd", report.mean_sd.dominance),
    ];
    for (k, v) in rows {
        w.write_record([k.to_string(), format!("{v:.6}")])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    Ok(())
}
