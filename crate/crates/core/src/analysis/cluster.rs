//! K-means over multi-hot category vectors to surface categories that are
//! frequently chosen together.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotation::EmotionLabel;
use crate::error::{Error, Result};
use crate::taxonomy::{CategoryId, NUM_CATEGORIES};

/// Categories whose within-cluster frequency exceeds this are reported.
pub const FREQUENT: f64 = 0.5;
const MAX_ITERATIONS: usize = 300;

type Point = [f64; NUM_CATEGORIES];

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryCluster {
    pub categories: Vec<CategoryId>,
    pub size: usize,
    pub frequencies: [f64; NUM_CATEGORIES],
}

fn dist2(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &Point, centers: &[Point]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Seeded k-means++ initialization followed by Lloyd iterations.
/// Returns the assignment of every point.
fn kmeans(points: &[Point], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Point> = vec![points[rng.random_range(0..points.len())]];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = d.iter().rposition(|&v| v > 0.0).expect("k <= distinct points");
        for (i, &v) in d.iter().enumerate() {
            if v > 0.0 && r < v {
                pick = i;
                break;
            }
            r -= v;
        }
        centers.push(points[pick]);
    }

    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERATIONS {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
        for (j, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Point> = points.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = [0.0; NUM_CATEGORIES];
            for m in &members {
                for (acc, v) in mean.iter_mut().zip(m.iter()) {
                    *acc += v;
                }
            }
            *center = mean.map(|s| s / members.len() as f64);
        }
    }
    assign
}

/// Groups labels into `k` clusters and reports, per cluster, the categories
/// chosen by more than half of its members. Clusters are ordered by size
/// (largest first), then by their category lists.
pub fn cluster_category_patterns(labels: &[EmotionLabel], k: usize, seed: u64) -> Result<Vec<CategoryCluster>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let points: Vec<Point> = labels.iter().map(|l| l.discrete).collect();
    let mut distinct: Vec<&Point> = points.iter().collect();
    distinct.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if k > distinct.len() {
        return Err(Error::invalid(format!("k = {k} exceeds the {} distinct annotation vectors", distinct.len())));
    }

    let assign = kmeans(&points, k, seed);
    let mut clusters: Vec<CategoryCluster> = (0..k)
        .map(|j| {
            let members: Vec<&EmotionLabel> = labels.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(l, _)| l).collect();
            let mut frequencies = [0.0; NUM_CATEGORIES];
            for m in &members {
                for c in m.categories() {
                    frequencies[c.index()] += 1.0;
                }
            }
            let n = members.len().max(1) as f64;
            let frequencies = frequencies.map(|f| f / n);
            CategoryCluster {
                categories: CategoryId::all().filter(|c| frequencies[c.index()] > FREQUENT).collect(),
                size: members.len(),
                frequencies,
            }
        })
        .collect();
    clusters.sort_by(|a, b| b.size.cmp(&a.size).then(a.categories.cmp(&b.categories)));
    Ok(clusters)
}

pub fn write_clusters(clusters: &[CategoryCluster], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cluster", "size", "categories"])?;
    for (i, c) in clusters.iter().enumerate() {
        let names: Vec<&str> = c.categories.iter().map(|c| c.name()).collect();
        w.write_record([(i + 1).to_string(), c.size.to_string(), names.join(";")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
