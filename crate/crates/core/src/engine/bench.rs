//! Linear baselines over precomputed per-person features: one-vs-rest
//! logistic regression for the categories, ridge regression for the
//! dimensions.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::annotation::AggregationPolicy;
use crate::dataset::{Corpus, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, AaeReport, ApReport};
use crate::taxonomy::{NUM_CATEGORIES, NUM_DIMS};

pub type Features = BTreeMap<String, Vec<f64>>;

/// Reads `person_id,<dim>,<dim>,...` rows after a header line.
pub fn read_features(path: &Path) -> Result<Features> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    if width < 2 {
        return Err(Error::invalid(format!("{}: expected person_id and at least one feature column", path.display())));
    }
    let mut out = Features::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let id = rec[0].to_string();
        let v = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::invalid(format!("{}: row {}: {e}", path.display(), i + 2)))?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("{}: row {}: non-finite feature", path.display(), i + 2)));
        }
        if out.insert(id.clone(), v).is_some() {
            return Err(Error::invalid(format!("{}: duplicate person {id}", path.display())));
        }
    }
    Ok(out)
}

pub fn write_features(features: &Features, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = features.values().next().map_or(0, Vec::len);
    let mut header = vec!["person_id".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (id, v) in features {
        let mut row = vec![id.clone()];
        row.extend(v.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Per-person concatenation; persons must match.
pub fn concat_features(parts: &[&Features]) -> Result<Features> {
    let first = parts.first().ok_or_else(|| Error::invalid("no feature sets"))?;
    let mut out = Features::new();
    for id in first.keys() {
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(p.get(id).ok_or_else(|| Error::invalid(format!("feature sets disagree on person {id}")))?);
        }
        out.insert(id.clone(), v);
    }
    if parts.iter().any(|p| p.len() != first.len()) {
        return Err(Error::invalid("feature sets cover different persons"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// L2 penalty of the logistic regressions.
    pub l2: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// L2 penalty of the ridge regression.
    pub ridge: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { l2: 1e-4, learning_rate: 0.5, iterations: 500, ridge: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub ap: ApReport,
    pub aae: AaeReport,
    pub dim: usize,
}

struct Table {
    x: Vec<Vec<f64>>,
    disc: Vec<[f64; NUM_CATEGORIES]>,
    cont: Vec<[f64; NUM_DIMS]>,
}

fn table(features: &Features, corpus: &Corpus, split: Split, policy: AggregationPolicy, dim: usize) -> Result<Table> {
    let mut t = Table { x: Vec::new(), disc: Vec::new(), cont: Vec::new() };
    for p in corpus.persons_in(split) {
        let f = features.get(&p.person_id).ok_or_else(|| Error::invalid(format!("no features for person {}", p.person_id)))?;
        if f.len() != dim {
            return Err(Error::Shape(format!("person {} has {} features, expected {dim}", p.person_id, f.len())));
        }
        let l = p.label(policy)?;
        t.x.push(f.clone());
        t.disc.push(l.discrete);
        t.cont.push(l.continuous);
    }
    if t.x.is_empty() {
        return Err(Error::invalid(format!("{split} split is empty")));
    }
    Ok(t)
}

/// Column means and standard deviations of the training features; constant
/// columns keep unit scale.
fn standardizer(x: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..dim)
        .map(|j| {
            let s = (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
            if s > 1e-12 { s } else { 1.0 }
        })
        .collect();
    (mean, sd)
}

fn standardize(x: &[Vec<f64>], mean: &[f64], sd: &[f64]) -> Vec<Vec<f64>> {
    x.iter().map(|r| r.iter().zip(mean).zip(sd).map(|((v, m), s)| (v - m) / s).collect()).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Full-batch gradient descent on mean log-loss plus `l2/2 · |w|²`.
/// Returns `(weights, bias)`.
fn logistic(x: &[Vec<f64>], y: &[f64], cfg: &BenchConfig) -> (Vec<f64>, f64) {
    let dim = x[0].len();
    let n = x.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..cfg.iterations {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (row, &t) in x.iter().zip(y) {
            let z = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let e = sigmoid(z) - t;
            gb += e;
            for (g, v) in gw.iter_mut().zip(row) {
                *g += e * v;
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.learning_rate * (g / n + cfg.l2 * *wi);
        }
        b -= cfg.learning_rate * gb / n;
    }
    (w, b)
}

/// Solves `(XᵀX + λI) β = Xᵀy` with an unpenalized intercept.
fn ridge(x: &[Vec<f64>], y: &[[f64; NUM_DIMS]], lambda: f64) -> Result<DMatrix<f64>> {
    let n = x.len();
    let dim = x[0].len();
    let xm = DMatrix::from_fn(n, dim + 1, |i, j| if j == dim { 1.0 } else { x[i][j] });
    let ym = DMatrix::from_fn(n, NUM_DIMS, |i, k| y[i][k]);
    let mut a = xm.transpose() * &xm;
    for j in 0..dim {
        a[(j, j)] += lambda;
    }
    let rhs = xm.transpose() * ym;
    let chol = a.cholesky().ok_or_else(|| Error::invalid("ridge system is singular; increase the ridge penalty"))?;
    Ok(chol.solve(&rhs))
}

/// Fits on the training split and reports metrics on `eval_split`.
pub fn feature_bench(features: &Features, corpus: &Corpus, policy: AggregationPolicy, eval_split: Split, cfg: &BenchConfig) -> Result<BenchReport> {
    let dim = features.values().next().map(Vec::len).ok_or_else(|| Error::invalid("empty feature set"))?;
    let train = table(features, corpus, Split::Train, policy, dim)?;
    let eval = table(features, corpus, eval_split, policy, dim)?;
    let (mean, sd) = standardizer(&train.x, dim);
    let xtr = standardize(&train.x, &mean, &sd);
    let xev = standardize(&eval.x, &mean, &sd);

    let models: Vec<(Vec<f64>, f64)> = (0..NUM_CATEGORIES)
        .map(|c| {
            let y: Vec<f64> = train.disc.iter().map(|d| (d[c] >= 0.5) as u8 as f64).collect();
            logistic(&xtr, &y, cfg)
        })
        .collect();
    let scores: Vec<[f64; NUM_CATEGORIES]> = xev
        .iter()
        .map(|r| {
            let mut s = [0.0; NUM_CATEGORIES];
            for (c, (w, b)) in models.iter().enumerate() {
                s[c] = b + r.iter().zip(w).map(|(a, v)| a * v).sum::<f64>();
            }
            s
        })
        .collect();

    let beta = ridge(&xtr, &train.cont, cfg.ridge)?;
    let dims: Vec<[f64; NUM_DIMS]> = xev
        .iter()
        .map(|r| {
            let mut d = [0.0; NUM_DIMS];
            for (k, v) in d.iter_mut().enumerate() {
                *v = beta[(dim, k)] + (0..dim).map(|j| r[j] * beta[(j, k)]).sum::<f64>();
            }
            d
        })
        .collect();
    Ok(BenchReport { ap: metrics::mean_ap(&scores, &eval.disc)?, aae: metrics::average_absolute_error(&dims, &eval.cont)?, dim })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_recovers_linear_map() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 / 10.0, ((i * 7) % 11) as f64 / 11.0]).collect();
        let y: Vec<[f64; NUM_DIMS]> = x.iter().map(|r| [0.2 + 0.5 * r[0], 0.1 - r[1], 0.3 * r[0] + 0.3 * r[1]]).collect();
        let beta = ridge(&x, &y, 0.0).unwrap();
        assert!((beta[(0, 0)] - 0.5).abs() < 1e-9);
        assert!((beta[(2, 0)] - 0.2).abs() < 1e-9);
        assert!((beta[(1, 1)] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn logistic_separates() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![if i < 10 { -1.0 } else { 1.0 }]).collect();
        let y: Vec<f64> = (0..20).map(|i| (i >= 10) as u8 as f64).collect();
        let (w, b) = logistic(&x, &y, &BenchConfig::default());
        assert!(w[0] > 1.0 && b.abs() < 1e-9);
    }

    #[test]
    fn feature_files_round_trip() {
        let f: Features = [("p1".to_string(), vec![0.5, -1.0]), ("p2".to_string(), vec![1e-3, 2.0])].into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        write_features(&f, &path).unwrap();
        assert_eq!(read_features(&path).unwrap(), f);
        let both = concat_features(&[&f, &f]).unwrap();
        assert_eq!(both["p1"], vec![0.5, -1.0, 0.5, -1.0]);
        let other: Features = [("p1".to_string(), vec![0.0])].into();
        assert!(concat_features(&[&f, &other]).is_err());
    }
}
