//! Evaluation metrics over generated and real image sets.
//!
//! Distribution metrics work on feature matrices (one row per image). The
//! default embedding is a fixed random convolutional network seeded from an
//! integer, so values are comparable only between runs that share the seed.
//! Precomputed features from any other network can be loaded from CSV.

mod bins;
mod content;
mod eval;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::domain::ImageTensor;
use crate::rng::RngStream;
use crate::{Error, Result};

pub use bins::{
    fit_bins, jensen_shannon, ndb_jsd, two_proportion_p_value, BinModel, NdbJsd, DEFAULT_ALPHA,
    DEFAULT_BINS, MAX_KMEANS_ITERS,
};
pub use content::{
    content_domain_distance, content_features, disentanglement_probe, export_embeddings,
    ProbeResult,
};
pub use eval::{evaluate, random_translations, EvalOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    SeededRandomConv,
    External,
}

/// Fixed image embedding.
///
/// The seeded kind is two strided random convolutions with ReLU followed by
/// per-channel mean and standard deviation pooling. It is never trained.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    kind: ExtractorKind,
    seed: u64,
    weights: Vec<(Tensor, usize)>,
}

impl FeatureExtractor {
    const WIDTHS: [usize; 2] = [16, 32];

    pub fn seeded(seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, "features");
        let mut c_in = 3;
        let mut weights = Vec::new();
        for &c_out in &Self::WIDTHS {
            let fan_in = c_in * 16;
            let std = (2.0 / fan_in as f64).sqrt() as f32;
            let w: Vec<f32> = rng.normals_f32(c_out * fan_in).into_iter().map(|v| v * std).collect();
            weights.push((Tensor::from_vec(w, (c_out, c_in, 4, 4), &Device::Cpu)?, 2));
            c_in = c_out;
        }
        Ok(Self {
            kind: ExtractorKind::SeededRandomConv,
            seed,
            weights,
        })
    }

    pub fn kind(&self) -> ExtractorKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        2 * Self::WIDTHS[Self::WIDTHS.len() - 1]
    }

    pub fn extract(&self, images: &[ImageTensor]) -> Result<DMatrix<f64>> {
        if images.is_empty() {
            return Err(Error::invalid("feature extraction needs at least one image"));
        }
        let mut rows = Vec::with_capacity(images.len() * self.dim());
        for chunk in images.chunks(32) {
            let parts: Vec<Tensor> = chunk.iter().map(|i| i.tensor().to_dtype(DType::F32)).collect::<std::result::Result<_, _>>()?;
            let mut h = Tensor::stack(&parts, 0)?;
            for (w, stride) in &self.weights {
                h = h.conv2d(w, 1, *stride, 1, 1)?.relu()?;
            }
            let (b, c, hh, ww) = h.dims4()?;
            let flat = h.reshape((b, c, hh * ww))?;
            let mean = flat.mean_keepdim(2)?;
            let std = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(2)?.sqrt()?;
            let feats = Tensor::cat(&[mean, std], 1)?.reshape((b, 2 * c))?;
            let v: Vec<f32> = feats.flatten_all()?.to_vec1()?;
            rows.extend(v.into_iter().map(f64::from));
        }
        Ok(DMatrix::from_row_slice(images.len(), self.dim(), &rows))
    }
}

/// Writes features as CSV with a `# extractor=<kind> seed=<seed>` first line.
pub fn write_features(path: &Path, features: &DMatrix<f64>, kind: ExtractorKind, seed: u64) -> Result<()> {
    let mut out = format!("# extractor={} seed={seed}\n", kind_name(kind));
    for r in 0..features.nrows() {
        let row: Vec<String> = features.row(r).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a feature CSV written by [`write_features`] or by an external tool
/// following the same layout.
pub fn read_features(path: &Path) -> Result<(DMatrix<f64>, ExtractorKind, u64)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Data {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty feature file".into()))?;
    let mut kind = None;
    let mut seed = None;
    for tok in header.trim_start_matches('#').split_whitespace() {
        match tok.split_once('=') {
            Some(("extractor", "seeded-random-conv")) => kind = Some(ExtractorKind::SeededRandomConv),
            Some(("extractor", _)) => kind = Some(ExtractorKind::External),
            Some(("seed", s)) => seed = s.parse().ok(),
            _ => {}
        }
    }
    let (kind, seed) = match (kind, seed) {
        (Some(k), Some(s)) => (k, s),
        _ => return Err(bad(format!("malformed header `{header}`"))),
    };
    let mut data = Vec::new();
    let mut cols = None;
    let mut n = 0;
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(bad(format!("line {}: ragged row", i + 2)));
        }
        data.extend(row);
        n += 1;
    }
    let cols = cols.ok_or_else(|| bad("no feature rows".into()))?;
    Ok((DMatrix::from_row_slice(n, cols, &data), kind, seed))
}

fn kind_name(kind: ExtractorKind) -> &'static str {
    match kind {
        ExtractorKind::SeededRandomConv => "seeded-random-conv",
        ExtractorKind::External => "external",
    }
}

fn ensure_finite_slice(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Square root of a symmetric positive semi-definite matrix, with negative
/// eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
///
/// The cross term uses `tr((C1 C2)^½) = tr((√C1 C2 √C1)^½)`, which keeps
/// every square root on a symmetric matrix.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::invalid(format!(
            "dimension mismatch: means {} and {}, covariances {:?} and {:?}",
            d,
            mu2.len(),
            cov1.shape(),
            cov2.shape()
        )));
    }
    for (n, s) in [("mu1", mu1.as_slice()), ("mu2", mu2.as_slice()), ("cov1", cov1.as_slice()), ("cov2", cov2.as_slice())] {
        ensure_finite_slice(n, s)?;
    }
    let (c1, c2) = (symmetrize(cov1), symmetrize(cov2));
    let r1 = psd_sqrt(&c1);
    let inner = symmetrize(&(&r1 * &c2 * &r1));
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let dist = (mu1 - mu2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

/// Sample mean and unbiased sample covariance of the rows.
pub fn gaussian_fit(features: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 samples to fit a covariance, got {n}"
        )));
    }
    let mean = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(real: &DMatrix<f64>, generated: &DMatrix<f64>) -> Result<f64> {
    if real.ncols() != generated.ncols() {
        return Err(Error::invalid("feature dimensions differ"));
    }
    for (side, m) in [("real", real), ("generated", generated)] {
        if m.nrows() < 10 * m.ncols() {
            log::warn!(
                "{side} set has {} samples for {} feature dimensions; the covariance estimate is noisy",
                m.nrows(),
                m.ncols()
            );
        }
    }
    let (m1, c1) = gaussian_fit(real)?;
    let (m2, c2) = gaussian_fit(generated)?;
    frechet_distance(&m1, &c1, &m2, &c2)
}

pub fn fid_images(real: &[ImageTensor], generated: &[ImageTensor], extractor: &FeatureExtractor) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::invalid("fid needs at least 2 images on each side"));
    }
    fid(&extractor.extract(real)?, &extractor.extract(generated)?)
}

/// Mean over unordered pairs of the mean absolute difference between
/// L2-normalised feature rows.
pub fn perceptual_diversity(features: &DMatrix<f64>) -> Result<f64> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::invalid(format!(
            "diversity needs at least 2 samples, got {n}"
        )));
    }
    let rows: Vec<DVector<f64>> = features
        .row_iter()
        .map(|r| {
            let v = r.transpose();
            let norm = v.norm();
            if norm > 0.0 {
                v / norm
            } else {
                v
            }
        })
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += (&rows[i] - &rows[j]).abs().mean();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

pub fn perceptual_diversity_images(images: &[ImageTensor], extractor: &FeatureExtractor) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::invalid("diversity needs at least 2 images"));
    }
    perceptual_diversity(&extractor.extract(images)?)
}

/// Metric output file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub checkpoint_hash: String,
}

impl MetricReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
