use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::rng::RngStream;
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const MAX_KMEANS_ITERS: usize = 300;
const KMEANS_TOL: f64 = 1e-6;

/// K-means partition of a training feature set with the share of training
/// samples in each cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinModel {
    pub centroids: Vec<Vec<f64>>,
    pub train_proportions: Vec<f64>,
    pub n_train: usize,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdbJsd {
    pub ndb: usize,
    pub ndb_ratio: f64,
    pub jsd: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(c, x)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// K-means with k-means++ seeding. A cluster that ends up empty is re-seeded
/// at the point farthest from its current centroid.
pub fn fit_bins(train: &DMatrix<f64>, k: usize, seed: u64) -> Result<BinModel> {
    let n = train.nrows();
    if k == 0 {
        return Err(Error::invalid("bin count must be positive"));
    }
    if n < k {
        return Err(Error::invalid(format!(
            "{n} training samples cannot fill {k} bins"
        )));
    }
    if train.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("training features contain non-finite values"));
    }
    let pts = rows(train);
    let mut rng = RngStream::new(seed, "kmeans");

    let mut centroids = vec![pts[rng.index(n)].clone()];
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.uniform() * total;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.index(n)
        };
        centroids.push(pts[pick].clone());
        for (i, p) in pts.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let dim = train.ncols();
    let mut assign = vec![0usize; n];
    for _ in 0..MAX_KMEANS_ITERS {
        for (i, p) in pts.iter().enumerate() {
            assign[i] = nearest(&centroids, p).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in pts.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0f64;
        for c in 0..k {
            let next = if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&pts[a], &centroids[assign[a]])
                            .total_cmp(&sq_dist(&pts[b], &centroids[assign[b]]))
                    })
                    .unwrap_or(0);
                pts[far].clone()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    let mut counts = vec![0usize; k];
    for p in &pts {
        counts[nearest(&centroids, p).0] += 1;
    }
    Ok(BinModel {
        centroids,
        train_proportions: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        n_train: n,
        alpha: DEFAULT_ALPHA,
    })
}

impl BinModel {
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Share of `features` falling in each bin.
    pub fn proportions(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        if features.nrows() == 0 {
            return Err(Error::invalid("no samples to assign to bins"));
        }
        if features.ncols() != self.centroids[0].len() {
            return Err(Error::invalid("feature dimension does not match bins"));
        }
        let mut counts = vec![0usize; self.k()];
        for r in rows(features) {
            counts[nearest(&self.centroids, &r).0] += 1;
        }
        Ok(counts.iter().map(|&c| c as f64 / features.nrows() as f64).collect())
    }
}

/// Two-sided p-value of the pooled two-proportion z-test.
pub fn two_proportion_p_value(p1: f64, n1: usize, p2: f64, n2: usize) -> f64 {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let pooled = (p1 * n1f + p2 * n2f) / (n1f + n2f);
    let se = (pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f)).sqrt();
    if se == 0.0 {
        return 1.0;
    }
    let z = ((p1 - p2) / se).abs();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    2.0 * (1.0 - normal.cdf(z))
}

/// Jensen–Shannon divergence in nats. Zero entries contribute nothing.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid("proportion vectors differ in length"));
    }
    let kl_to_mix = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (2.0 * x / (x + y)).ln())
            .sum()
    };
    Ok((0.5 * kl_to_mix(p, q) + 0.5 * kl_to_mix(q, p)).max(0.0))
}

/// Number of bins whose generated share differs significantly from the
/// training share, and the divergence between the two histograms.
pub fn ndb_jsd(bins: &BinModel, generated: &DMatrix<f64>) -> Result<NdbJsd> {
    let gen = bins.proportions(generated)?;
    let n_gen = generated.nrows();
    let ndb = bins
        .train_proportions
        .iter()
        .zip(&gen)
        .filter(|(pt, pg)| two_proportion_p_value(**pt, bins.n_train, **pg, n_gen) < bins.alpha)
        .count();
    Ok(NdbJsd {
        ndb,
        ndb_ratio: ndb as f64 / bins.k() as f64,
        jsd: jensen_shannon(&bins.train_proportions, &gen)?,
    })
}
