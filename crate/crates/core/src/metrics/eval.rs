use std::collections::BTreeMap;

use candle_core::Tensor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    content_domain_distance, disentanglement_probe, fid, fit_bins, ndb_jsd, perceptual_diversity,
    FeatureExtractor, DEFAULT_BINS,
};
use crate::data::{stack, Label, UnpairedDataset};
use crate::domain::ImageTensor;
use crate::networks::ModelSet;
use crate::rng::RngStream;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Seed of the random feature network.
    pub feature_seed: u64,
    /// Seed of the prior draws and the probe split.
    pub seed: u64,
    /// Random translations per source image.
    pub samples_per_image: usize,
    /// Cap on source images per domain; `None` uses all.
    pub max_images: Option<usize>,
    pub bins: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            feature_seed: 0,
            seed: 0,
            samples_per_image: 10,
            max_images: None,
            bins: DEFAULT_BINS,
        }
    }
}

/// Random translations of every (capped) source image into `target`, grouped
/// per source image.
pub fn random_translations(
    models: &ModelSet,
    ds: &UnpairedDataset,
    target: usize,
    opts: &EvalOptions,
    rng: &mut RngStream,
) -> Result<Vec<Vec<ImageTensor>>> {
    let n = opts.samples_per_image;
    let dim = models.hyperparameters().attribute_dim;
    let mut groups = Vec::new();
    for source in (0..ds.k()).filter(|&s| s != target) {
        let imgs = ds.domain(source);
        let take = opts.max_images.map_or(imgs.len(), |m| m.min(imgs.len()));
        for img in &imgs[..take] {
            let x = stack(&[img])?.to_dtype(models.dtype())?;
            let content = models.content_batch(&[source], &x)?.detach();
            let content = content.repeat((n, 1, 1, 1))?;
            let z = Tensor::from_vec(rng.normals_f32(n * dim), (n, dim), models.device())?
                .to_dtype(models.dtype())?;
            let (out, _) = models.generate_batch(&vec![target; n], &content, &z)?;
            let out = out.detach().to_dtype(candle_core::DType::F32)?;
            groups.push(
                (0..n)
                    .map(|i| ImageTensor::new(out.get(i)?))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
    }
    Ok(groups)
}

fn pixel_diversity(images: &[ImageTensor]) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            total += images[i].l1_distance(&images[j])?;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// Every metric the evaluator knows, keyed by name.
///
/// Per target domain `t`: `fid_to_t`, `ndb_to_t`, `jsd_to_t`, computed
/// between the real images of `t` and random translations into `t`. The
/// unsuffixed names average over targets. `perceptual_diversity` and
/// `pixel_diversity` average over source images. The probe accuracies
/// appear only when `labels` is given (aligned with the dataset's
/// domain-major order).
pub fn evaluate(
    models: &ModelSet,
    ds: &UnpairedDataset,
    labels: Option<&[Label]>,
    opts: &EvalOptions,
) -> Result<BTreeMap<String, f64>> {
    ds.require_nonempty()?;
    if opts.samples_per_image < 2 {
        return Err(Error::invalid("samples_per_image must be at least 2"));
    }
    if ds.k() != models.num_domains() {
        return Err(Error::invalid(format!(
            "dataset has {} domains, model expects {}",
            ds.k(),
            models.num_domains()
        )));
    }
    let extractor = FeatureExtractor::seeded(opts.feature_seed)?;
    let mut rng = RngStream::new(opts.seed, "eval");
    let mut m = BTreeMap::new();
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    let (mut div, mut pix, mut groups_seen) = (0.0, 0.0, 0usize);

    for t in 0..ds.k() {
        let groups = random_translations(models, ds, t, opts, &mut rng)?;
        let mut gen_rows: Vec<DMatrix<f64>> = Vec::with_capacity(groups.len());
        for g in &groups {
            let f = extractor.extract(g)?;
            div += perceptual_diversity(&f)?;
            pix += pixel_diversity(g)?;
            groups_seen += 1;
            gen_rows.push(f);
        }
        let gen = vstack(&gen_rows);
        let real = extractor.extract(ds.domain(t))?;
        let f = fid(&real, &gen)?;
        let bins = fit_bins(&real, opts.bins.min(real.nrows()), opts.seed)?;
        let nj = ndb_jsd(&bins, &gen)?;
        m.insert(format!("fid_to_{t}"), f);
        m.insert(format!("ndb_to_{t}"), nj.ndb as f64);
        m.insert(format!("jsd_to_{t}"), nj.jsd);
        *sums.entry("fid").or_default() += f;
        *sums.entry("ndb").or_default() += nj.ndb as f64;
        *sums.entry("ndb_ratio").or_default() += nj.ndb_ratio;
        *sums.entry("jsd").or_default() += nj.jsd;
    }
    for (k, v) in sums {
        m.insert(k.to_string(), v / ds.k() as f64);
    }
    m.insert("perceptual_diversity".into(), div / groups_seen as f64);
    m.insert("pixel_diversity".into(), pix / groups_seen as f64);

    let mut dist = 0.0;
    let mut pairs = 0;
    for a in 0..ds.k() {
        for b in a + 1..ds.k() {
            dist += content_domain_distance(models, ds.domain(a), a, ds.domain(b), b)?;
            pairs += 1;
        }
    }
    m.insert("content_domain_distance".into(), dist / pairs as f64);

    if let Some(labels) = labels {
        let images: Vec<ImageTensor> = (0..ds.k()).flat_map(|d| ds.domain(d).iter().cloned()).collect();
        let probe = disentanglement_probe(models, &images, labels, opts.seed)?;
        m.insert("content_acc".into(), probe.content_acc);
        m.insert("domain_acc_on_content".into(), probe.domain_acc_on_content);
    }
    Ok(m)
}

fn vstack(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols = parts.first().map_or(0, |p| p.ncols());
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.nrows()).copy_from(p);
        r += p.nrows();
    }
    out
}
