//! Test-time generation: random attributes, example-guided transfer and
//! attribute interpolation. Nothing here mutates the models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{sample_attribute_prior, AttributeCode, DomainCode, ImageTensor};
use crate::imageio;
use crate::networks::ModelSet;
use crate::rng::RngStream;
use crate::{Error, Result};

/// What to generate, as recorded in the output manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RequestMode {
    Random { n_samples: usize },
    Transfer { attribute_source: String, attribute_domain: usize },
    Interpolate { endpoint_a: String, endpoint_b: String, steps: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationRequest {
    pub source: String,
    pub source_domain: usize,
    pub target_domain: usize,
    #[serde(flatten)]
    pub mode: RequestMode,
    pub seed: u64,
}

impl TranslationRequest {
    pub fn validate(&self, k: usize) -> Result<()> {
        for (what, d) in [("source", self.source_domain), ("target", self.target_domain)] {
            if d >= k {
                return Err(Error::invalid(format!("{what} domain {d} out of range for {k} domains")));
            }
        }
        match &self.mode {
            RequestMode::Random { n_samples: 0 } => Err(Error::invalid("n_samples must be at least 1")),
            RequestMode::Transfer { attribute_domain, .. } if *attribute_domain != self.target_domain => Err(
                Error::invalid("the attribute image's domain is the output domain"),
            ),
            RequestMode::Interpolate { steps, .. } if *steps < 2 => {
                Err(Error::invalid(format!("interpolation needs at least 2 steps, got {steps}")))
            }
            _ => Ok(()),
        }
    }
}

/// `n` translations of `x` into `dy`, each with a fresh prior draw.
pub fn translate_random(
    models: &ModelSet,
    x: &ImageTensor,
    dx: &DomainCode,
    dy: &DomainCode,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<ImageTensor>> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let content = models.encode_content(x, dx)?;
    let dim = models.hyperparameters().attribute_dim;
    (0..n)
        .map(|_| models.generate(&content, &sample_attribute_prior(dim, rng)?, dy))
        .collect()
}

/// Content of one image rendered with the attribute mean of another. The
/// attribute image's domain is the output domain.
pub fn translate_transfer(
    models: &ModelSet,
    content_img: &ImageTensor,
    content_domain: &DomainCode,
    attr_img: &ImageTensor,
    attr_domain: &DomainCode,
) -> Result<ImageTensor> {
    let content = models.encode_content(content_img, content_domain)?;
    let zero = vec![0.0; models.hyperparameters().attribute_dim];
    let attr = models.encode_attribute_with_noise(attr_img, attr_domain, &zero)?.mean;
    models.generate(&content, &attr, attr_domain)
}

/// Frames along the straight line from `a1` to `a2`, `t = i / (steps - 1)`.
/// The end frames use `a1` and `a2` unchanged.
pub fn interpolate_attributes(
    models: &ModelSet,
    x: &ImageTensor,
    dx: &DomainCode,
    dy: &DomainCode,
    a1: &AttributeCode,
    a2: &AttributeCode,
    steps: usize,
) -> Result<Vec<ImageTensor>> {
    if steps < 2 {
        return Err(Error::invalid(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let content = models.encode_content(x, dx)?;
    (0..steps)
        .map(|i| {
            let attr = match i {
                0 => a1.clone(),
                i if i == steps - 1 => a2.clone(),
                i => a1.lerp(a2, i as f64 / (steps - 1) as f64)?,
            };
            models.generate(&content, &attr, dy)
        })
        .collect()
}

/// Number of frames whose L1 distance to the first frame is smaller than the
/// previous frame's.
pub fn monotonicity_violations(frames: &[ImageTensor]) -> Result<usize> {
    let Some(first) = frames.first() else {
        return Ok(0);
    };
    let dists = frames.iter().map(|f| first.l1_distance(f)).collect::<Result<Vec<_>>>()?;
    Ok(dists.windows(2).filter(|w| w[1] < w[0]).count())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub index: usize,
}

/// Sidecar describing every image written for one request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub request: TranslationRequest,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub grid: String,
    pub images: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GRID_FILE: &str = "grid.png";

/// Writes `sample_NNN.png` per image, a row-major grid and the manifest.
pub fn write_outputs(
    dir: &Path,
    request: &TranslationRequest,
    images: &[ImageTensor],
    checkpoint_hash: &str,
    cols: usize,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let file = format!("sample_{i:03}.png");
        imageio::save_png(&dir.join(&file), img)?;
        entries.push(ManifestEntry { file, index: i });
    }
    imageio::save_rgb8(&dir.join(GRID_FILE), &imageio::grid(images, cols.max(1))?)?;
    let manifest = Manifest {
        request: request.clone(),
        seed: request.seed,
        checkpoint_hash: checkpoint_hash.to_string(),
        grid: GRID_FILE.into(),
        images: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_overfit_fixture;
    use crate::domain::{one_hot, Hyperparameters, Mode};
    use crate::networks::{build_models, ArchConfig};

    fn setup(mode: Mode) -> (ModelSet, Vec<ImageTensor>) {
        let hp = Hyperparameters {
            image_size: 32,
            num_domains: 2,
            ..Hyperparameters::default()
        };
        let m = build_models(&hp, mode, &ArchConfig { base_width: 4 }, &mut RngStream::new(0, "init")).unwrap();
        let fx = make_overfit_fixture(32).unwrap();
        (m, vec![fx.domain(0)[0].clone(), fx.domain(1)[0].clone()])
    }

    fn same(a: &ImageTensor, b: &ImageTensor) -> bool {
        a.to_vec().unwrap() == b.to_vec().unwrap()
    }

    #[test]
    fn random_translation_count_and_determinism() {
        let (m, imgs) = setup(Mode::Dual);
        let (d0, d1) = (one_hot(0, 2).unwrap(), one_hot(1, 2).unwrap());
        let a = translate_random(&m, &imgs[0], &d0, &d1, 5, &mut RngStream::new(3, "s")).unwrap();
        let b = translate_random(&m, &imgs[0], &d0, &d1, 5, &mut RngStream::new(3, "s")).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.iter().zip(&b).all(|(x, y)| same(x, y)));
        assert_eq!((a[0].height(), a[0].width()), (32, 32));
        assert!(translate_random(&m, &imgs[0], &d0, &d1, 0, &mut RngStream::new(3, "s")).is_err());
    }

    #[test]
    fn single_random_sample_equals_direct_generation() {
        let (m, imgs) = setup(Mode::Dual);
        let (d0, d1) = (one_hot(0, 2).unwrap(), one_hot(1, 2).unwrap());
        let out = translate_random(&m, &imgs[0], &d0, &d1, 1, &mut RngStream::new(9, "s")).unwrap();
        let z = sample_attribute_prior(8, &mut RngStream::new(9, "s")).unwrap();
        let direct = m.generate(&m.encode_content(&imgs[0], &d0).unwrap(), &z, &d1).unwrap();
        assert!(same(&out[0], &direct));
    }

    #[test]
    fn transfer_is_total_and_deterministic() {
        for mode in [Mode::Dual, Mode::Multi] {
            let (m, imgs) = setup(mode);
            for i in 0..2 {
                for j in 0..2 {
                    let (di, dj) = (one_hot(i, 2).unwrap(), one_hot(j, 2).unwrap());
                    let a = translate_transfer(&m, &imgs[i], &di, &imgs[j], &dj).unwrap();
                    let b = translate_transfer(&m, &imgs[i], &di, &imgs[j], &dj).unwrap();
                    assert!(same(&a, &b));
                }
            }
        }
    }

    #[test]
    fn interpolation_endpoints_and_degenerate_path() {
        let (m, imgs) = setup(Mode::Dual);
        let (d0, d1) = (one_hot(0, 2).unwrap(), one_hot(1, 2).unwrap());
        let mut rng = RngStream::new(1, "z");
        let a1 = sample_attribute_prior(8, &mut rng).unwrap();
        let a2 = sample_attribute_prior(8, &mut rng).unwrap();
        let c = m.encode_content(&imgs[0], &d0).unwrap();
        let frames = interpolate_attributes(&m, &imgs[0], &d0, &d1, &a1, &a2, 5).unwrap();
        assert!(same(&frames[0], &m.generate(&c, &a1, &d1).unwrap()));
        assert!(same(&frames[4], &m.generate(&c, &a2, &d1).unwrap()));
        let two = interpolate_attributes(&m, &imgs[0], &d0, &d1, &a1, &a2, 2).unwrap();
        assert!(same(&two[0], &frames[0]) && same(&two[1], &frames[4]));
        let flat = interpolate_attributes(&m, &imgs[0], &d0, &d1, &a1, &a1, 5).unwrap();
        assert!(flat.iter().all(|f| same(f, &flat[0])));
        assert!(interpolate_attributes(&m, &imgs[0], &d0, &d1, &a1, &a2, 1).is_err());
    }

    #[test]
    fn request_validation() {
        let req = |mode| TranslationRequest {
            source: "x.png".into(),
            source_domain: 0,
            target_domain: 1,
            mode,
            seed: 0,
        };
        assert!(req(RequestMode::Random { n_samples: 3 }).validate(2).is_ok());
        assert!(req(RequestMode::Random { n_samples: 0 }).validate(2).is_err());
        assert!(req(RequestMode::Random { n_samples: 3 }).validate(1).is_err());
        let steps = |steps| RequestMode::Interpolate { endpoint_a: "a".into(), endpoint_b: "b".into(), steps };
        assert!(req(steps(1)).validate(2).is_err());
        assert!(req(steps(2)).validate(2).is_ok());
    }

    #[test]
    fn outputs_and_manifest() {
        let (m, imgs) = setup(Mode::Dual);
        let (d0, d1) = (one_hot(0, 2).unwrap(), one_hot(1, 2).unwrap());
        let out = translate_random(&m, &imgs[0], &d0, &d1, 3, &mut RngStream::new(0, "s")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let req = TranslationRequest {
            source: "x.png".into(),
            source_domain: 0,
            target_domain: 1,
            mode: RequestMode::Random { n_samples: 3 },
            seed: 0,
        };
        let man = write_outputs(dir.path(), &req, &out, "abc", 3).unwrap();
        assert_eq!(man.images.len(), 3);
        for e in &man.images {
            assert!(dir.path().join(&e.file).exists());
        }
        let grid = image::open(dir.path().join(GRID_FILE)).unwrap();
        assert_eq!((grid.width(), grid.height()), (96, 32));
        let back: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(back, man);
    }
}
