use std::path::Path;

use candle_core::DType;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::domain::ImageTensor;
use crate::networks::ModelSet;
use crate::rng::RngStream;
use crate::{Error, Result};

const ENCODE_CHUNK: usize = 8;

/// Flattened content codes, one row per image. `domains[i]` selects the
/// encoder for image `i`.
pub fn content_features(models: &ModelSet, images: &[ImageTensor], domains: &[usize]) -> Result<DMatrix<f64>> {
    if images.is_empty() {
        return Err(Error::invalid("no images to encode"));
    }
    if images.len() != domains.len() {
        return Err(Error::invalid("one domain per image is required"));
    }
    let (c, h, w) = models.content_shape();
    let dim = c * h * w;
    let mut data = Vec::with_capacity(images.len() * dim);
    let mut start = 0;
    while start < images.len() {
        // Consecutive images of the same domain share one batch.
        let d = domains[start];
        let mut end = start + 1;
        while end < images.len() && end - start < ENCODE_CHUNK && domains[end] == d {
            end += 1;
        }
        let refs: Vec<&ImageTensor> = images[start..end].iter().collect();
        let x = crate::data::stack(&refs)?.to_dtype(models.dtype())?;
        let code = models.content_batch(&domains[start..end], &x)?.detach();
        let v: Vec<f64> = code.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        data.extend(v);
        start = end;
    }
    Ok(DMatrix::from_row_slice(images.len(), dim, &data))
}

/// L1 norm of the difference between the mean content codes of two sets.
pub fn content_domain_distance(
    models: &ModelSet,
    images_a: &[ImageTensor],
    domain_a: usize,
    images_b: &[ImageTensor],
    domain_b: usize,
) -> Result<f64> {
    if images_a.is_empty() || images_b.is_empty() {
        return Err(Error::invalid("content distance needs two nonempty sets"));
    }
    let fa = content_features(models, images_a, &vec![domain_a; images_a.len()])?;
    let fb = content_features(models, images_b, &vec![domain_b; images_b.len()])?;
    Ok(mean_l1_gap(&fa, &fb))
}

pub(crate) fn mean_l1_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a.row_mean() - b.row_mean()).abs().sum()
}

/// Held-out accuracies of linear probes on frozen content codes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Accuracy at predicting the shared content factor.
    pub content_acc: f64,
    /// Accuracy at predicting the source domain.
    pub domain_acc_on_content: f64,
}

/// Fits ridge-regression classifiers (one-vs-rest targets) on 80% of the
/// images and scores them on the remaining 20%. The split is drawn from
/// `seed`.
pub fn disentanglement_probe(
    models: &ModelSet,
    images: &[ImageTensor],
    labels: &[Label],
    seed: u64,
) -> Result<ProbeResult> {
    if labels.len() != images.len() {
        return Err(Error::invalid(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if images.len() < 5 {
        return Err(Error::invalid("probe needs at least 5 labelled images"));
    }
    let domains: Vec<usize> = labels.iter().map(|l| l.domain).collect();
    let feats = content_features(models, images, &domains)?;
    let content: Vec<usize> = labels.iter().map(|l| l.content_id).collect();
    probe_accuracies(&feats, &content, &domains, seed)
}

pub(crate) fn probe_accuracies(
    feats: &DMatrix<f64>,
    content: &[usize],
    domains: &[usize],
    seed: u64,
) -> Result<ProbeResult> {
    let n = feats.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::new(seed, "probe-split");
    for i in (1..n).rev() {
        order.swap(i, rng.index(i + 1));
    }
    let n_train = (n * 4) / 5;
    let (train, test) = order.split_at(n_train);
    Ok(ProbeResult {
        content_acc: ridge_accuracy(feats, content, train, test)?,
        domain_acc_on_content: ridge_accuracy(feats, domains, train, test)?,
    })
}

/// Dual-form ridge classifier: with `n` samples and `d ≫ n` features it only
/// needs an `n × n` solve.
fn ridge_accuracy(feats: &DMatrix<f64>, y: &[usize], train: &[usize], test: &[usize]) -> Result<f64> {
    let classes = y.iter().copied().max().unwrap_or(0) + 1;
    let d = feats.ncols();
    let pick = |idx: &[usize]| DMatrix::from_fn(idx.len(), d, |i, j| feats[(idx[i], j)]);
    let mut xtr = pick(train);
    let mut xte = pick(test);
    // Standardise with training statistics.
    let mean = xtr.row_mean();
    let std = xtr.row_variance().map(|v| v.sqrt().max(1e-8));
    for m in [&mut xtr, &mut xte] {
        for mut row in m.row_iter_mut() {
            row -= &mean;
            row.component_div_assign(&std);
        }
    }
    let mut targets = DMatrix::zeros(train.len(), classes);
    for (i, &t) in train.iter().enumerate() {
        targets[(i, y[t])] = 1.0;
    }
    let t_mean = targets.row_mean();
    for mut row in targets.row_iter_mut() {
        row -= &t_mean;
    }
    let gram = &xtr * xtr.transpose();
    let lambda = 1e-2 * gram.trace() / train.len() as f64 + 1e-9;
    let reg = gram + DMatrix::identity(train.len(), train.len()) * lambda;
    let chol = reg
        .cholesky()
        .ok_or_else(|| Error::invalid("probe system is not positive definite"))?;
    let alpha = chol.solve(&targets);
    let scores = &xte * xtr.transpose() * alpha;
    let correct = test
        .iter()
        .enumerate()
        .filter(|(i, &t)| {
            let row: DVector<f64> = scores.row(*i).transpose();
            row.argmax().0 == y[t]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// CSV of flattened content codes: `c0,…,c{n-1},domain`.
pub fn export_embeddings(models: &ModelSet, images: &[ImageTensor], domains: &[usize], path: &Path) -> Result<()> {
    let feats = content_features(models, images, domains)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut header: Vec<String> = (0..feats.ncols()).map(|i| format!("c{i}")).collect();
    header.push("domain".into());
    w.write_record(&header)?;
    for (r, d) in feats.row_iter().zip(domains) {
        let mut rec: Vec<String> = r.iter().map(|v| (*v as f32).to_string()).collect();
        rec.push(d.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
