//! Value types shared by every stage: images, latent codes, domain codes and
//! the hyperparameter schema.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::{Error, Result};

/// An RGB image stored channel-major as a `(3, height, width)` tensor.
///
/// Values are expected in `[-1, 1]`; generated images are squashed into that
/// range by construction.
#[derive(Clone, Debug)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(t: Tensor) -> Result<Self> {
        match t.dims() {
            [3, h, w] if *h > 0 && *w > 0 => Ok(Self(t)),
            d => Err(Error::invalid(format!(
                "image tensor must have shape (3, h, w), got {d:?}"
            ))),
        }
    }

    /// Builds an image from channel-major `f32` data.
    pub fn from_chw(data: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::invalid(format!(
                "expected {} values for a {height}x{width} image, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Self::new(Tensor::from_vec(data, (3, height, width), &Device::Cpu)?)
    }

    /// Constant-valued image, handy for tests and padding.
    pub fn filled(value: f32, height: usize, width: usize) -> Result<Self> {
        Self::from_chw(vec![value; 3 * height * width], height, width)
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }

    pub fn is_finite(&self) -> Result<bool> {
        Ok(self.to_vec()?.iter().all(|v| v.is_finite()))
    }

    /// Mean absolute per-pixel difference to `other`.
    pub fn l1_distance(&self, other: &ImageTensor) -> Result<f64> {
        let a = self.to_vec()?;
        let b = other.to_vec()?;
        if a.len() != b.len() {
            return Err(Error::invalid("image size mismatch"));
        }
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64)
    }
}

/// Spatial feature map on the shared content space, `(channels, h, w)`.
#[derive(Clone, Debug)]
pub struct ContentCode(Tensor);

impl ContentCode {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.dims() {
            [_, _, _] => Ok(Self(t)),
            d => Err(Error::invalid(format!(
                "content code must have shape (c, h, w), got {d:?}"
            ))),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }
}

/// Attribute vector, either an encoder output or a prior draw.
#[derive(Clone, Debug)]
pub struct AttributeCode(Tensor);

impl AttributeCode {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.dims() {
            [d] if *d > 0 => Ok(Self(t)),
            d => Err(Error::invalid(format!(
                "attribute code must be a non-empty vector, got shape {d:?}"
            ))),
        }
    }

    pub fn from_vec(v: Vec<f32>) -> Result<Self> {
        let n = v.len();
        Self::new(Tensor::from_vec(v, n, &Device::Cpu)?)
    }

    pub fn dim(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.to_dtype(DType::F32)?.to_vec1()?)
    }

    /// `self + t * (other - self)`, elementwise. Exact at `t = 0`, at `t = 1`,
    /// and for every `t` when the endpoints are equal.
    pub fn lerp(&self, other: &AttributeCode, t: f64) -> Result<AttributeCode> {
        if self.dim() != other.dim() {
            return Err(Error::invalid("attribute dimension mismatch"));
        }
        if t == 1.0 {
            return Ok(other.clone());
        }
        let other = other.0.to_dtype(self.0.dtype())?;
        AttributeCode::new((&self.0 + ((other - &self.0)? * t)?)?)
    }
}

/// One-hot domain identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainCode {
    index: usize,
    k: usize,
}

impl DomainCode {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn vector(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.k];
        v[self.index] = 1.0;
        v
    }
}

impl fmt::Display for DomainCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "domain {}/{}", self.index, self.k)
    }
}

pub fn one_hot(index: usize, k: usize) -> Result<DomainCode> {
    if index >= k {
        return Err(Error::invalid(format!(
            "domain index {index} out of range for {k} domains"
        )));
    }
    Ok(DomainCode { index, k })
}

/// Draws `dim` independent standard normals.
pub fn sample_attribute_prior(dim: usize, rng: &mut RngStream) -> Result<AttributeCode> {
    if dim == 0 {
        return Err(Error::invalid("attribute dimension must be at least 1"));
    }
    AttributeCode::from_vec(rng.normals_f32(dim))
}

/// Dual-domain (per-domain networks) or multi-domain (shared networks
/// conditioned on a one-hot domain code).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Dual,
    Multi,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dual => "dual",
            Mode::Multi => "multi",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Mode::Dual),
            "multi" => Ok(Mode::Multi),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

/// Loss weights, optimizer settings and data shape.
///
/// Serialized as a flat JSON object; unknown keys are rejected and missing keys
/// take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparameters {
    pub lambda_content_adv: f64,
    pub lambda_cc: f64,
    pub lambda_domain_adv: f64,
    pub lambda_recon: f64,
    pub lambda_latent: f64,
    pub lambda_kl: f64,
    pub lambda_ms: f64,
    pub lambda_domain_cls: f64,
    pub lambda_content_l1: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub attribute_dim: usize,
    pub image_size: usize,
    pub num_domains: usize,
    pub multiscale_enabled: bool,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            lambda_content_adv: 1.0,
            lambda_cc: 10.0,
            lambda_domain_adv: 1.0,
            lambda_recon: 10.0,
            lambda_latent: 10.0,
            lambda_kl: 0.01,
            lambda_ms: 1.0,
            lambda_domain_cls: 1.0,
            lambda_content_l1: 0.01,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            attribute_dim: 8,
            image_size: 64,
            num_domains: 2,
            multiscale_enabled: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigViolation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl Hyperparameters {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn lambdas(&self) -> [(&'static str, f64); 9] {
        [
            ("lambda_content_adv", self.lambda_content_adv),
            ("lambda_cc", self.lambda_cc),
            ("lambda_domain_adv", self.lambda_domain_adv),
            ("lambda_recon", self.lambda_recon),
            ("lambda_latent", self.lambda_latent),
            ("lambda_kl", self.lambda_kl),
            ("lambda_ms", self.lambda_ms),
            ("lambda_domain_cls", self.lambda_domain_cls),
            ("lambda_content_l1", self.lambda_content_l1),
        ]
    }
}

/// Every violated invariant, each tagged with its field name.
pub fn validate_config(hp: &Hyperparameters) -> std::result::Result<(), Vec<ConfigViolation>> {
    let mut out = Vec::new();
    let mut bad = |field: &str, message: String| {
        out.push(ConfigViolation {
            field: field.to_string(),
            message,
        })
    };
    for (name, v) in hp.lambdas() {
        if !(v.is_finite() && v >= 0.0) {
            bad(name, format!("must be finite and >= 0, got {v}"));
        }
    }
    if !(hp.learning_rate.is_finite() && hp.learning_rate > 0.0) {
        bad("learning_rate", format!("must be > 0, got {}", hp.learning_rate));
    }
    for (name, v) in [("beta1", hp.beta1), ("beta2", hp.beta2)] {
        if !(0.0..1.0).contains(&v) {
            bad(name, format!("must lie in [0, 1), got {v}"));
        }
    }
    if hp.batch_size < 1 {
        bad("batch_size", "must be >= 1".into());
    }
    if hp.attribute_dim < 1 {
        bad("attribute_dim", "must be >= 1".into());
    }
    if hp.image_size < 16 || hp.image_size % 8 != 0 {
        bad(
            "image_size",
            format!(
                "must be a multiple of 8 (three halving stages) and at least 16, got {}",
                hp.image_size
            ),
        );
    }
    if hp.num_domains < 2 {
        bad("num_domains", format!("must be >= 2, got {}", hp.num_domains));
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(2, 4).unwrap().vector(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(one_hot(0, 2).unwrap().vector(), vec![1.0, 0.0]);
        assert!(matches!(one_hot(3, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn one_hot_argmax_roundtrip() {
        for k in 1..9 {
            for i in 0..k {
                let v = one_hot(i, k).unwrap().vector();
                let arg = v
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(arg, i);
                assert_eq!(v.iter().sum::<f32>(), 1.0);
            }
        }
    }

    #[test]
    fn prior_is_deterministic_and_seed_dependent() {
        let a = sample_attribute_prior(8, &mut RngStream::new(7, "prior")).unwrap();
        let b = sample_attribute_prior(8, &mut RngStream::new(7, "prior")).unwrap();
        let c = sample_attribute_prior(8, &mut RngStream::new(8, "prior")).unwrap();
        assert_eq!(a.to_vec().unwrap(), b.to_vec().unwrap());
        assert_ne!(a.to_vec().unwrap(), c.to_vec().unwrap());
        assert_eq!(a.dim(), 8);
    }

    #[test]
    fn prior_moments() {
        let v = sample_attribute_prior(100_000, &mut RngStream::new(3, "prior"))
            .unwrap()
            .to_vec()
            .unwrap();
        let n = v.len() as f64;
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn prior_rejects_zero_dim() {
        assert!(matches!(
            sample_attribute_prior(0, &mut RngStream::new(1, "p")),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn defaults_validate() {
        let hp = Hyperparameters::default();
        assert_eq!(hp.lambda_content_adv, 1.0);
        assert_eq!(hp.lambda_cc, 10.0);
        assert_eq!(hp.lambda_domain_adv, 1.0);
        assert_eq!(hp.lambda_recon, 10.0);
        assert_eq!(hp.lambda_latent, 10.0);
        assert_eq!(hp.lambda_kl, 0.01);
        assert_eq!(hp.lambda_content_l1, 0.01);
        assert_eq!(hp.learning_rate, 1e-4);
        assert_eq!((hp.beta1, hp.beta2), (0.5, 0.999));
        assert_eq!(hp.batch_size, 1);
        assert_eq!(hp.attribute_dim, 8);
        assert!(validate_config(&hp).is_ok());
        let large_size = Hyperparameters {
            image_size: 216,
            ..hp
        };
        assert!(validate_config(&large_size).is_ok());
    }

    fn single_violation(hp: Hyperparameters) -> String {
        let errs = validate_config(&hp).unwrap_err();
        assert_eq!(errs.len(), 1, "{errs:?}");
        errs[0].field.clone()
    }

    #[test]
    fn single_field_violations_are_named() {
        let d = Hyperparameters::default;
        assert_eq!(
            single_violation(Hyperparameters {
                lambda_cc: -1.0,
                ..d()
            }),
            "lambda_cc"
        );
        assert_eq!(
            single_violation(Hyperparameters {
                num_domains: 1,
                ..d()
            }),
            "num_domains"
        );
        assert_eq!(
            single_violation(Hyperparameters {
                learning_rate: 0.0,
                ..d()
            }),
            "learning_rate"
        );
        assert_eq!(
            single_violation(Hyperparameters {
                batch_size: 0,
                ..d()
            }),
            "batch_size"
        );
        assert_eq!(
            single_violation(Hyperparameters {
                image_size: 65,
                ..d()
            }),
            "image_size"
        );
        assert_eq!(
            single_violation(Hyperparameters {
                lambda_kl: f64::NAN,
                ..d()
            }),
            "lambda_kl"
        );
    }

    #[test]
    fn json_rejects_unknown_keys_and_fills_defaults() {
        let hp = Hyperparameters::from_json(r#"{"lambda_cc": 5.0}"#).unwrap();
        assert_eq!(hp.lambda_cc, 5.0);
        assert_eq!(hp.lambda_recon, 10.0);
        assert!(Hyperparameters::from_json(r#"{"lambda_typo": 5.0}"#).is_err());
        let hp = Hyperparameters::default();
        let back = Hyperparameters::from_json(&serde_json::to_string(&hp).unwrap()).unwrap();
        assert_eq!(back, hp);
    }

    #[test]
    fn lerp_endpoints_are_exact() {
        let a = AttributeCode::from_vec(vec![0.1, -2.5, 3.3]).unwrap();
        let b = AttributeCode::from_vec(vec![1.7, 0.2, -0.9]).unwrap();
        assert_eq!(a.lerp(&b, 0.0).unwrap().to_vec().unwrap(), a.to_vec().unwrap());
        assert_eq!(a.lerp(&b, 1.0).unwrap().to_vec().unwrap(), b.to_vec().unwrap());
    }
}
