//! Evaluation metrics: per-category average precision, average absolute
//! error of the continuous dimensions, and per-sample Jaccard coefficient of
//! thresholded detections.
//!
//! Undefined values (a category without positives, a degenerate threshold)
//! are reported as NaN and excluded from means; the number of defined entries
//! is always reported next to a mean.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::taxonomy::{CategoryId, Dimension, NUM_CATEGORIES, NUM_DIMS};

/// Indices ordered by descending score; equal scores keep index order.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Non-interpolated average precision: mean of the precision at the rank of
/// every positive. NaN when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "average precision: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        log::warn!("average precision undefined: no positive labels");
        return Ok(f64::NAN);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in rank_descending(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Expected average precision of a uniformly random ranking of `n` items of
/// which `m` are positive.
pub fn random_ranking_ap(n: usize, m: usize) -> f64 {
    if m == 0 || n == 0 {
        return f64::NAN;
    }
    if n == 1 {
        return 1.0;
    }
    let harmonic: f64 = (1..=n).map(|r| 1.0 / r as f64).sum();
    let others = (m - 1) as f64 / (n - 1) as f64;
    (harmonic + others * (n as f64 - harmonic)) / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApReport {
    pub per_category: [f64; NUM_CATEGORIES],
    /// Mean over categories with a defined AP.
    pub mean: f64,
    pub defined: usize,
}

impl ApReport {
    pub fn mean_over(&self, categories: &[CategoryId]) -> f64 {
        nan_mean(categories.iter().map(|c| self.per_category[c.index()]))
    }
}

pub(crate) fn nan_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .filter(|v| !v.is_nan())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn mean_ap(scores: &[[f64; NUM_CATEGORIES]], targets: &[[f64; NUM_CATEGORIES]]) -> Result<ApReport> {
    if scores.len() != targets.len() {
        return Err(Error::Shape(format!("mean AP: {} predictions vs {} labels", scores.len(), targets.len())));
    }
    let mut per_category = [f64::NAN; NUM_CATEGORIES];
    for (i, ap) in per_category.iter_mut().enumerate() {
        let s: Vec<f64> = scores.iter().map(|r| r[i]).collect();
        let l: Vec<bool> = targets.iter().map(|r| r[i] >= 0.5).collect();
        if l.iter().any(|&x| x) {
            *ap = average_precision(&s, &l)?;
        }
    }
    let defined = per_category.iter().filter(|v| !v.is_nan()).count();
    Ok(ApReport {
        per_category,
        mean: nan_mean(per_category),
        defined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AaeReport {
    pub per_dim: [f64; NUM_DIMS],
    pub mean: f64,
}

pub fn average_absolute_error(pred: &[[f64; NUM_DIMS]], target: &[[f64; NUM_DIMS]]) -> Result<AaeReport> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("AAE: {} predictions vs {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Ok(AaeReport {
            per_dim: [f64::NAN; NUM_DIMS],
            mean: f64::NAN,
        });
    }
    let mut per_dim = [0.0; NUM_DIMS];
    for (p, t) in pred.iter().zip(target) {
        for k in 0..NUM_DIMS {
            per_dim[k] += (p[k] - t[k]).abs();
        }
    }
    let n = pred.len() as f64;
    let per_dim = per_dim.map(|s| s / n);
    Ok(AaeReport {
        per_dim,
        mean: per_dim.iter().sum::<f64>() / NUM_DIMS as f64,
    })
}

/// Threshold `t` (detections are `score >= t`) among the distinct scores that
/// minimizes `|precision - recall|`, preferring the larger threshold on ties.
/// NaN unless there is at least one positive and one negative.
pub fn pr_equal_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("threshold: {} scores vs {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        log::debug!("precision=recall threshold undefined: need positives and negatives");
        return Ok(f64::NAN);
    }
    let order = rank_descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    // gap = tp * |positives - detected| / (detected * positives), kept as an
    // exact fraction so that equal gaps compare equal
    let mut best: Option<(u128, u128, f64)> = None;
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        while k < order.len() && scores[order[k]] == t {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let detected = tp + fp;
        let num = tp as u128 * positives.abs_diff(detected) as u128;
        let den = detected as u128 * positives as u128;
        // descending scan: strict improvement keeps the larger threshold on ties
        if best.is_none_or(|(bn, bd, _)| num * bd < bn * den) {
            best = Some((num, den, t));
        }
    }
    Ok(best.map_or(f64::NAN, |b| b.2))
}

pub fn pr_equal_thresholds(
    scores: &[[f64; NUM_CATEGORIES]],
    targets: &[[f64; NUM_CATEGORIES]],
) -> Result<[f64; NUM_CATEGORIES]> {
    if scores.len() != targets.len() {
        return Err(Error::Shape(format!("thresholds: {} predictions vs {} labels", scores.len(), targets.len())));
    }
    let mut out = [f64::NAN; NUM_CATEGORIES];
    for (i, t) in out.iter_mut().enumerate() {
        let s: Vec<f64> = scores.iter().map(|r| r[i]).collect();
        let l: Vec<bool> = targets.iter().map(|r| r[i] >= 0.5).collect();
        *t = pr_equal_threshold(&s, &l)?;
    }
    let undefined: Vec<&str> = (0..NUM_CATEGORIES).filter(|&i| out[i].is_nan()).map(|i| CategoryId::from_index(i).name()).collect();
    if !undefined.is_empty() {
        log::warn!("no precision=recall threshold (needs positives and negatives) for: {}", undefined.join(", "));
    }
    Ok(out)
}

/// Categories whose score reaches their threshold. NaN thresholds never fire.
pub fn detections(scores: &[f64; NUM_CATEGORIES], thresholds: &[f64; NUM_CATEGORIES]) -> BTreeSet<CategoryId> {
    (0..NUM_CATEGORIES)
        .filter(|&i| scores[i] >= thresholds[i])
        .map(CategoryId::from_index)
        .collect()
}

/// `|pred ∩ truth| / |pred ∪ truth|`. With an empty ground truth the value is
/// 1 for an empty prediction and 0 otherwise.
pub fn jaccard(pred: &BTreeSet<CategoryId>, truth: &BTreeSet<CategoryId>) -> f64 {
    let union = pred.union(truth).count();
    if union == 0 {
        return 1.0;
    }
    pred.intersection(truth).count() as f64 / union as f64
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Category rows by model columns, followed by a `Mean` row.
pub fn write_ap_table(path: &Path, columns: &[(&str, &ApReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["category".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    for c in CategoryId::all() {
        let mut row = vec![c.name().to_string()];
        row.extend(columns.iter().map(|(_, r)| fmt_value(r.per_category[c.index()])));
        w.write_record(&row)?;
    }
    let mut row = vec!["Mean".to_string()];
    row.extend(columns.iter().map(|(_, r)| fmt_value(r.mean)));
    w.write_record(&row)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Dimension rows by model columns, followed by a `Mean` row.
pub fn write_aae_table(path: &Path, columns: &[(&str, &AaeReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["dimension".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    for d in Dimension::ALL {
        let mut row = vec![d.name().to_string()];
        row.extend(columns.iter().map(|(_, r)| fmt_value(r.per_dim[d.index()])));
        w.write_record(&row)?;
    }
    let mut row = vec!["Mean".to_string()];
    row.extend(columns.iter().map(|(_, r)| fmt_value(r.mean)));
    w.write_record(&row)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One row per sample, sorted by decreasing Jaccard coefficient.
pub fn write_sample_table(path: &Path, rows: &[SampleResult]) -> Result<()> {
    let mut sorted: Vec<&SampleResult> = rows.iter().collect();
    sorted.sort_by(|a, b| b.jaccard.total_cmp(&a.jaccard).then(a.person_id.cmp(&b.person_id)));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rank", "person_id", "jaccard", "aae"])?;
    for (i, r) in sorted.iter().enumerate() {
        w.write_record([(i + 1).to_string(), r.person_id.clone(), fmt_value(r.jaccard), fmt_value(r.aae)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub person_id: String,
    pub jaccard: f64,
    /// Mean absolute error over the three dimensions.
    pub aae: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cat(id: u8) -> CategoryId {
        CategoryId::new(id).unwrap()
    }

    /// Sums (R_k - R_{k-1}) P_k over every rank of the full PR curve.
    fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let m = labels.iter().filter(|&&l| l).count() as f64;
        let mut prev_recall = 0.0;
        let mut total = 0.0;
        for k in 1..=idx.len() {
            let tp = idx[..k].iter().filter(|&&i| labels[i]).count() as f64;
            let precision = tp / k as f64;
            let recall = tp / m;
            total += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        total
    }

    /// Tries every distinct score as a threshold and recounts from scratch.
    fn threshold_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut cands: Vec<f64> = scores.to_vec();
        cands.sort_by(|a, b| b.partial_cmp(a).unwrap());
        cands.dedup();
        let m = labels.iter().filter(|&&l| l).count() as f64;
        let mut best_gap = f64::INFINITY;
        let mut best = f64::NAN;
        for t in cands {
            let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l).count() as f64;
            let det = scores.iter().filter(|s| **s >= t).count() as f64;
            let gap = (tp / det - tp / m).abs();
            if gap < best_gap - 1e-12 {
                best_gap = gap;
                best = t;
            }
        }
        best
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.5, 0.3], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(average_precision(&[0.1, 0.2], &[false, false]).unwrap().is_nan());
        assert!(average_precision(&[0.1], &[true, false]).is_err());
        // ties resolved by original index
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
    }

    #[test]
    fn ap_matches_exhaustive_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.random_range(1..=10);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..6) as f64) / 5.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[rng.random_range(0..n)] = true;
            let a = average_precision(&scores, &labels).unwrap();
            assert!((a - ap_oracle(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn random_ranking_expectation_matches_enumeration() {
        // all 5!/(2!3!) placements of 2 positives among 5 ranks
        let n = 5;
        let mut total = 0.0;
        let mut count = 0;
        for a in 0..n {
            for b in a + 1..n {
                let labels: Vec<bool> = (0..n).map(|i| i == a || i == b).collect();
                let scores: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
                total += average_precision(&scores, &labels).unwrap();
                count += 1;
            }
        }
        assert!((random_ranking_ap(n, 2) - total / count as f64).abs() < 1e-12);
        assert_eq!(random_ranking_ap(4, 4), 1.0);
    }

    #[test]
    fn mean_ap_examples() {
        let mut targets = vec![[0.0; NUM_CATEGORIES]; 4];
        targets[0][0] = 1.0;
        targets[1][0] = 1.0;
        targets[2][1] = 1.0;
        let r = mean_ap(&targets, &targets).unwrap();
        assert_eq!(r.per_category[0], 1.0);
        assert_eq!(r.per_category[1], 1.0);
        assert!(r.per_category[2].is_nan());
        assert_eq!(r.defined, 2);
        assert_eq!(r.mean, 1.0);

        // category 0 ranking [pos, neg, pos, neg] -> 5/6; category 1 ranking [neg, pos, ...] -> 1/2
        let mut scores = vec![[0.0; NUM_CATEGORIES]; 4];
        let c0 = [0.9, 0.7, 0.8, 0.1];
        let c1 = [0.2, 0.1, 0.9, 0.0];
        for s in 0..4 {
            scores[s][0] = c0[s];
            scores[s][1] = c1[s];
        }
        let mut t = vec![[0.0; NUM_CATEGORIES]; 4];
        t[0][0] = 1.0;
        t[1][0] = 1.0;
        t[0][1] = 1.0;
        let r = mean_ap(&scores, &t).unwrap();
        assert!((r.per_category[0] - 5.0 / 6.0).abs() < 1e-15);
        assert!((r.per_category[1] - 0.5).abs() < 1e-15);
        assert!((r.mean - (5.0 / 6.0 + 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn aae_examples() {
        let t = vec![[0.5, 0.2, 0.9]; 3];
        assert_eq!(average_absolute_error(&t, &t).unwrap().per_dim, [0.0; 3]);
        let p: Vec<[f64; 3]> = t.iter().map(|r| [r[0] + 0.05, r[1], r[2]]).collect();
        let a = average_absolute_error(&p, &t).unwrap();
        assert!((a.per_dim[0] - 0.05).abs() < 1e-12);
        assert_eq!(&a.per_dim[1..], &[0.0, 0.0]);
        assert!((a.mean - 0.0167).abs() < 1e-4);
        assert!(average_absolute_error(&p, &t[..2]).is_err());
    }

    #[test]
    fn threshold_examples() {
        let s = [0.9, 0.8, 0.7, 0.3, 0.2, 0.1];
        let l = [true, true, true, false, false, false];
        assert_eq!(pr_equal_threshold(&s, &l).unwrap(), 0.7);

        let s = [0.9, 0.4, 0.6, 0.35, 0.8, 0.1];
        let l = [true, true, false, false, true, false];
        assert_eq!(pr_equal_threshold(&s, &l).unwrap(), threshold_oracle(&s, &l));
        assert!(pr_equal_threshold(&s, &[true; 6]).unwrap().is_nan());
        assert!(pr_equal_threshold(&s, &[false; 6]).unwrap().is_nan());
    }

    #[test]
    fn threshold_matches_exhaustive_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let n = rng.random_range(2..=12);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 7.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            assert_eq!(pr_equal_threshold(&scores, &labels).unwrap(), threshold_oracle(&scores, &labels));
        }
    }

    #[test]
    fn jaccard_examples() {
        let ab = BTreeSet::from([cat(1), cat(2)]);
        let bc = BTreeSet::from([cat(2), cat(3)]);
        assert_eq!(jaccard(&ab, &ab), 1.0);
        assert!((jaccard(&ab, &bc) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&ab, &BTreeSet::from([cat(4)])), 0.0);
        assert_eq!(jaccard(&BTreeSet::new(), &BTreeSet::new()), 1.0);
        assert_eq!(jaccard(&ab, &BTreeSet::new()), 0.0);
    }

    #[test]
    fn detections_apply_thresholds() {
        let mut s = [0.0; NUM_CATEGORIES];
        s[0] = 0.5;
        s[1] = 0.4;
        let mut t = [0.45; NUM_CATEGORIES];
        t[2] = f64::NAN;
        assert_eq!(detections(&s, &t), BTreeSet::from([cat(1)]));
    }

    #[test]
    fn csv_tables() {
        let dir = tempfile::tempdir().unwrap();
        let r = ApReport { per_category: [0.5; NUM_CATEGORIES], mean: 0.5, defined: 26 };
        let p = dir.path().join("ap.csv");
        write_ap_table(&p, &[("B", &r), ("B+I", &r)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("category,B,B+I\nAffection,0.500000,0.500000\n"));
        assert!(text.ends_with("Mean,0.500000,0.500000\n"));
        assert_eq!(text.lines().count(), 28);
    }

    proptest! {
        #[test]
        fn ap_invariant_under_increasing_transform(
            scores in prop::collection::vec(-5.0f64..5.0, 1..15),
            flags in prop::collection::vec(any::<bool>(), 15),
        ) {
            let mut labels: Vec<bool> = flags[..scores.len()].to_vec();
            labels[0] = true;
            let a = average_precision(&scores, &labels).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            let b = average_precision(&mapped, &labels).unwrap();
            prop_assert!(a > 0.0 && a <= 1.0);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn threshold_classification_survives_increasing_transform(
            scores in prop::collection::vec(-3.0f64..3.0, 2..15),
            flags in prop::collection::vec(any::<bool>(), 15),
        ) {
            let mut labels: Vec<bool> = flags[..scores.len()].to_vec();
            labels[0] = true;
            labels[1] = false;
            let f = |s: f64| s * s * s + 2.0 * s;
            let t1 = pr_equal_threshold(&scores, &labels).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            let t2 = pr_equal_threshold(&mapped, &labels).unwrap();
            for (s, m) in scores.iter().zip(&mapped) {
                prop_assert_eq!(*s >= t1, *m >= t2);
            }
        }

        #[test]
        fn jaccard_symmetric(a in prop::collection::btree_set(1u8..=26, 0..8), b in prop::collection::btree_set(1u8..=26, 1..8)) {
            let a: BTreeSet<CategoryId> = a.into_iter().map(cat).collect();
            let b: BTreeSet<CategoryId> = b.into_iter().map(cat).collect();
            prop_assert_eq!(jaccard(&a, &b), jaccard(&b, &a));
            prop_assert_eq!(jaccard(&b, &b), 1.0);
            let j = jaccard(&a, &b);
            prop_assert!((0.0..=1.0).contains(&j));
        }

        #[test]
        fn aae_permutation_invariant(rows in prop::collection::vec((prop::array::uniform3(0.0f64..1.0), prop::array::uniform3(0.0f64..1.0)), 1..20)) {
            let p: Vec<[f64; 3]> = rows.iter().map(|r| r.0).collect();
            let t: Vec<[f64; 3]> = rows.iter().map(|r| r.1).collect();
            let a = average_absolute_error(&p, &t).unwrap();
            let b = average_absolute_error(&p.iter().rev().copied().collect::<Vec<_>>(), &t.iter().rev().copied().collect::<Vec<_>>()).unwrap();
            for k in 0..3 {
                prop_assert!((a.per_dim[k] - b.per_dim[k]).abs() < 1e-12);
            }
        }
    }
}
