//! Training objectives.
//!
//! Every function here is a pure map from tensors to a scalar tensor and is
//! differentiable through candle's autograd. Inputs are checked for
//! finiteness; probabilities inside logarithms are clamped to
//! `[PROB_EPS, 1 - PROB_EPS]`.
//!
//! Adversarial terms come in role-specific pairs. The content adversary is
//! trained with domain cross-entropy while the encoders are pushed towards a
//! uniform prediction; the image adversary uses binary cross-entropy while
//! generators use the non-saturating `-log D(fake)` form.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::domain::{Hyperparameters, Mode};
use crate::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;
/// Added to the image distance in the mode-seeking ratio.
pub const MS_EPS: f64 = 1e-5;
/// Minimum latent distance for a usable mode-seeking pair.
pub const MS_Z_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContentRole {
    Discriminator,
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversarialRole {
    Discriminator,
    Generator,
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn ensure_finite(what: &str, t: &Tensor) -> Result<()> {
    let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn ensure_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn clamp_log_prob(logp: &Tensor) -> Result<Tensor> {
    Ok(logp.clamp(PROB_EPS.ln(), (1.0 - PROB_EPS).ln())?)
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Clamped `log sigmoid(x)`.
fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    clamp_log_prob(&softplus(&x.neg()?)?.neg()?)
}

/// Clamped `log (1 - sigmoid(x))`.
fn log_one_minus_sigmoid(x: &Tensor) -> Result<Tensor> {
    clamp_log_prob(&softplus(x)?.neg()?)
}

/// Clamped row-wise log-softmax of `(B, k)` logits.
fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    clamp_log_prob(&shifted.broadcast_sub(&lse)?)
}

fn one_hot_rows(labels: &[usize], k: usize, like: &Tensor) -> Result<Tensor> {
    let mut v = vec![0f32; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
        }
        v[i * k + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), k), like.device())?.to_dtype(like.dtype())?)
}

/// Mean negative log-likelihood of `labels` under `(B, k)` logits.
fn nll(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if b != labels.len() {
        return Err(Error::invalid(format!(
            "{b} logit rows but {} labels",
            labels.len()
        )));
    }
    let mask = one_hot_rows(labels, k, logits)?;
    Ok(((log_softmax(logits)? * mask)?.sum_all()?.neg()? / b as f64)?)
}

/// Mean cross-entropy of `(B, k)` logits against the uniform distribution.
fn uniform_ce(logits: &Tensor) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    Ok((log_softmax(logits)?.sum_all()?.neg()? / (b * k) as f64)?)
}

/// Content adversarial loss over the content codes of both sides of a pair.
///
/// `domains_*` name the true domain of each row (0 for the X side and 1 for
/// the Y side in dual mode).
pub fn content_adversarial_loss(
    logits_x: &Tensor,
    domains_x: &[usize],
    logits_y: &Tensor,
    domains_y: &[usize],
    role: ContentRole,
) -> Result<Tensor> {
    ensure_finite("content logits", logits_x)?;
    ensure_finite("content logits", logits_y)?;
    match role {
        ContentRole::Discriminator => Ok((nll(logits_x, domains_x)? + nll(logits_y, domains_y)?)?),
        ContentRole::Encoder => Ok((uniform_ce(logits_x)? + uniform_ce(logits_y)?)?),
    }
}

/// Image adversarial loss on realism logit maps, averaged over each map.
/// `real` is required for the discriminator role and ignored otherwise.
pub fn domain_adversarial_loss(
    real: Option<&Tensor>,
    fake: &Tensor,
    role: AdversarialRole,
) -> Result<Tensor> {
    ensure_finite("fake scores", fake)?;
    match role {
        AdversarialRole::Discriminator => {
            let real = real.ok_or_else(|| {
                Error::invalid("discriminator role needs real scores")
            })?;
            ensure_finite("real scores", real)?;
            let r = log_sigmoid(real)?.mean_all()?.neg()?;
            let f = log_one_minus_sigmoid(fake)?.mean_all()?.neg()?;
            Ok((r + f)?)
        }
        AdversarialRole::Generator => Ok(log_sigmoid(fake)?.mean_all()?.neg()?),
    }
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_same_shape(a, b)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `mean|x_hat - x| + mean|y_hat - y|`.
pub fn cross_cycle_loss(x: &Tensor, y: &Tensor, x_hat: &Tensor, y_hat: &Tensor) -> Result<Tensor> {
    ensure_same_shape(x, y)?;
    for (n, t) in [("x", x), ("y", y), ("x_hat", x_hat), ("y_hat", y_hat)] {
        ensure_finite(n, t)?;
    }
    Ok((mean_abs_diff(x_hat, x)? + mean_abs_diff(y_hat, y)?)?)
}

pub fn self_reconstruction_loss(x: &Tensor, x_self: &Tensor) -> Result<Tensor> {
    ensure_finite("x", x)?;
    ensure_finite("reconstruction", x_self)?;
    mean_abs_diff(x_self, x)
}

/// Mean absolute error between a prior draw and its re-encoding.
pub fn latent_regression_loss(z: &Tensor, z_hat: &Tensor) -> Result<Tensor> {
    if z.dims() != z_hat.dims() {
        return Err(Error::invalid(format!(
            "latent dims differ: {:?} vs {:?}",
            z.dims(),
            z_hat.dims()
        )));
    }
    ensure_finite("z", z)?;
    ensure_finite("z_hat", z_hat)?;
    mean_abs_diff(z_hat, z)
}

/// KL divergence of `N(mean, exp(logvar))` from `N(0, I)`, summed over the
/// attribute dimension and averaged over leading (batch) rows.
pub fn kl_loss(mean: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    ensure_same_shape(mean, logvar)?;
    ensure_finite("mean", mean)?;
    ensure_finite("logvar", logvar)?;
    let rows = match mean.dims() {
        [] => 1,
        [_] => 1,
        d => d[..d.len() - 1].iter().product(),
    };
    let inner = ((mean.sqr()? + logvar.exp()?)? - logvar)? - 1.0;
    Ok((inner?.sum_all()? * (0.5 / rows as f64))?)
}

/// Reciprocal mode-seeking ratio `d_z / (d_I + MS_EPS)` with mean absolute
/// distances. Minimising it pushes outputs of distinct latents apart.
pub fn mode_seeking_loss(img1: &Tensor, img2: &Tensor, z1: &Tensor, z2: &Tensor) -> Result<Tensor> {
    ensure_finite("img1", img1)?;
    ensure_finite("img2", img2)?;
    ensure_finite("z1", z1)?;
    ensure_finite("z2", z2)?;
    let d_z = mean_abs_diff(z1, z2)?;
    let dz = scalar(&d_z)?;
    if dz <= MS_Z_EPS {
        return Err(Error::DegeneratePair {
            distance: dz,
            threshold: MS_Z_EPS,
        });
    }
    let d_i = mean_abs_diff(img1, img2)?;
    Ok(d_z.div(&(d_i + MS_EPS)?)?)
}

/// The two expectation terms of the auxiliary domain-classification loss.
#[derive(Clone, Debug)]
pub struct ClassificationLoss {
    /// NLL of the true domain of real images; drives the discriminator.
    pub real: Tensor,
    /// NLL of the target domain of generated images; drives the generator.
    pub fake: Tensor,
}

impl ClassificationLoss {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.real + &self.fake)?)
    }
}

pub fn domain_classification_loss(
    class_logits_real: &Tensor,
    true_domains: &[usize],
    class_logits_fake: &Tensor,
    target_domains: &[usize],
) -> Result<ClassificationLoss> {
    let (_, k_real) = class_logits_real.dims2()?;
    let (_, k_fake) = class_logits_fake.dims2()?;
    if k_real != k_fake {
        return Err(Error::invalid(format!(
            "class logit lengths differ: {k_real} vs {k_fake}"
        )));
    }
    if k_real < 2 {
        return Err(Error::invalid(format!(
            "domain classification needs at least 2 domains, got {k_real}"
        )));
    }
    ensure_finite("real class logits", class_logits_real)?;
    ensure_finite("fake class logits", class_logits_fake)?;
    Ok(ClassificationLoss {
        real: nll(class_logits_real, true_domains)?,
        fake: nll(class_logits_fake, target_domains)?,
    })
}

/// Mean absolute value of a content map.
pub fn content_l1_regularizer(content: &Tensor) -> Result<Tensor> {
    ensure_finite("content", content)?;
    Ok(content.abs()?.mean_all()?)
}

/// Names of the raw loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    ContentAdvD,
    ContentAdvE,
    DomainAdvD,
    DomainAdvG,
    CrossCycle,
    SelfRecon,
    LatentReg,
    Kl,
    ModeSeeking,
    DomainClsReal,
    DomainClsFake,
    ContentL1,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::ContentAdvD => "content_adv_d",
            Term::ContentAdvE => "content_adv_e",
            Term::DomainAdvD => "domain_adv_d",
            Term::DomainAdvG => "domain_adv_g",
            Term::CrossCycle => "cross_cycle",
            Term::SelfRecon => "self_recon",
            Term::LatentReg => "latent_reg",
            Term::Kl => "kl",
            Term::ModeSeeking => "mode_seeking",
            Term::DomainClsReal => "domain_cls_real",
            Term::DomainClsFake => "domain_cls_fake",
            Term::ContentL1 => "content_l1",
        }
    }
}

/// Weighted terms of the discriminator-side objective.
pub fn discriminator_weights(hp: &Hyperparameters, mode: Mode) -> Vec<(Term, f64)> {
    let mut w = vec![
        (Term::ContentAdvD, hp.lambda_content_adv),
        (Term::DomainAdvD, hp.lambda_domain_adv),
    ];
    if mode == Mode::Multi {
        w.push((Term::DomainClsReal, hp.lambda_domain_cls));
    }
    w
}

/// Weighted terms of the encoder/generator-side objective.
pub fn generator_weights(hp: &Hyperparameters, mode: Mode) -> Vec<(Term, f64)> {
    let mut w = vec![
        (Term::ContentAdvE, hp.lambda_content_adv),
        (Term::DomainAdvG, hp.lambda_domain_adv),
        (Term::CrossCycle, hp.lambda_cc),
        (Term::SelfRecon, hp.lambda_recon),
        (Term::LatentReg, hp.lambda_latent),
        (Term::Kl, hp.lambda_kl),
        (Term::ModeSeeking, hp.lambda_ms),
        (Term::ContentL1, hp.lambda_content_l1),
    ];
    if mode == Mode::Multi {
        w.push((Term::DomainClsFake, hp.lambda_domain_cls));
    }
    w
}

/// Per-step values of every loss term plus the two weighted totals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub content_adv_d: f64,
    pub content_adv_e: f64,
    pub domain_adv_d: f64,
    pub domain_adv_g: f64,
    pub cross_cycle: f64,
    pub self_recon: f64,
    pub latent_reg: f64,
    pub kl: f64,
    pub mode_seeking: f64,
    pub domain_cls_real: f64,
    pub domain_cls_fake: f64,
    pub content_l1: f64,
    pub total_d: f64,
    pub total_g: f64,
}

impl LossReport {
    /// Column names of the per-step CSV log.
    pub const CSV_HEADER: [&'static str; 14] = [
        "step",
        "content_adv_d",
        "content_adv_e",
        "domain_adv_d",
        "domain_adv_g",
        "cross_cycle",
        "self_recon",
        "latent_reg",
        "kl",
        "mode_seeking",
        "domain_cls",
        "content_l1",
        "total_d",
        "total_g",
    ];

    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::ContentAdvD => self.content_adv_d,
            Term::ContentAdvE => self.content_adv_e,
            Term::DomainAdvD => self.domain_adv_d,
            Term::DomainAdvG => self.domain_adv_g,
            Term::CrossCycle => self.cross_cycle,
            Term::SelfRecon => self.self_recon,
            Term::LatentReg => self.latent_reg,
            Term::Kl => self.kl,
            Term::ModeSeeking => self.mode_seeking,
            Term::DomainClsReal => self.domain_cls_real,
            Term::DomainClsFake => self.domain_cls_fake,
            Term::ContentL1 => self.content_l1,
        }
    }

    pub fn set(&mut self, term: Term, v: f64) {
        let slot = match term {
            Term::ContentAdvD => &mut self.content_adv_d,
            Term::ContentAdvE => &mut self.content_adv_e,
            Term::DomainAdvD => &mut self.domain_adv_d,
            Term::DomainAdvG => &mut self.domain_adv_g,
            Term::CrossCycle => &mut self.cross_cycle,
            Term::SelfRecon => &mut self.self_recon,
            Term::LatentReg => &mut self.latent_reg,
            Term::Kl => &mut self.kl,
            Term::ModeSeeking => &mut self.mode_seeking,
            Term::DomainClsReal => &mut self.domain_cls_real,
            Term::DomainClsFake => &mut self.domain_cls_fake,
            Term::ContentL1 => &mut self.content_l1,
        };
        *slot = v;
    }

    pub fn domain_cls(&self) -> f64 {
        self.domain_cls_real + self.domain_cls_fake
    }

    /// Name of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let terms = [
            Term::ContentAdvD,
            Term::ContentAdvE,
            Term::DomainAdvD,
            Term::DomainAdvG,
            Term::CrossCycle,
            Term::SelfRecon,
            Term::LatentReg,
            Term::Kl,
            Term::ModeSeeking,
            Term::DomainClsReal,
            Term::DomainClsFake,
            Term::ContentL1,
        ];
        if let Some(t) = terms.into_iter().find(|&t| !self.get(t).is_finite()) {
            return Some(t.name());
        }
        if !self.total_d.is_finite() {
            return Some("total_d");
        }
        if !self.total_g.is_finite() {
            return Some("total_g");
        }
        None
    }

    pub fn csv_record(&self, step: u64) -> Vec<String> {
        let vals = [
            self.content_adv_d,
            self.content_adv_e,
            self.domain_adv_d,
            self.domain_adv_g,
            self.cross_cycle,
            self.self_recon,
            self.latent_reg,
            self.kl,
            self.mode_seeking,
            self.domain_cls(),
            self.content_l1,
            self.total_d,
            self.total_g,
        ];
        std::iter::once(step.to_string())
            .chain(vals.iter().map(|v| v.to_string()))
            .collect()
    }
}

/// `(total_d, total_g)` as the λ-weighted sums of the raw terms.
pub fn assemble_objectives(report: &LossReport, hp: &Hyperparameters, mode: Mode) -> Result<(f64, f64)> {
    let sum = |w: Vec<(Term, f64)>| -> Result<f64> {
        let mut acc = 0.0;
        for (t, l) in w {
            let v = report.get(t);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: t.name().to_string(),
                });
            }
            acc += l * v;
        }
        Ok(acc)
    };
    Ok((
        sum(discriminator_weights(hp, mode))?,
        sum(generator_weights(hp, mode))?,
    ))
}
