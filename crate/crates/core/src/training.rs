//! Two-stage attribute-swap translation and the alternating training loop.
//!
//! Each step runs one translation round, then updates the discriminators on
//! detached fakes, then updates encoders and generators against the freshly
//! updated discriminators. A step whose losses or parameters turn non-finite
//! is rolled back and reported as [`Error::NonFinite`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Block, Header};
use crate::data::{sample_unpaired, stack, UnpairedDataset, UnpairedSample};
use crate::domain::{one_hot, validate_config, Hyperparameters, ImageTensor, Mode};
use crate::imageio;
use crate::losses::{
    self, discriminator_weights, generator_weights, scalar, AdversarialRole, ContentRole,
    LossReport, Term, MS_Z_EPS,
};
use crate::networks::{ArchConfig, Group, ModelSet};
use crate::optim::{Adam, AdamState};
use crate::rng::{RngState, RngStream};
use crate::{Error, Result};

pub const DEFAULT_ITERATIONS: u64 = 20_000;
/// Consecutive rolled-back steps tolerated before a run is aborted.
pub const MAX_CONSECUTIVE_NON_FINITE: usize = 3;

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub iterations: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Sample-grid period in steps; 0 writes only the final grid.
    pub sample_every: u64,
    pub base_width: usize,
    /// Train on random `image_size` crops of slightly larger images.
    pub random_crop: bool,
    pub hyperparameters: Hyperparameters,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dual,
            seed: 0,
            iterations: DEFAULT_ITERATIONS,
            checkpoint_every: 1000,
            sample_every: 1000,
            base_width: ArchConfig::default().base_width,
            random_crop: false,
            hyperparameters: Hyperparameters::default(),
        }
    }
}

#[derive(Serialize)]
struct HashedConfig<'a> {
    mode: Mode,
    seed: u64,
    base_width: usize,
    random_crop: bool,
    hyperparameters: &'a Hyperparameters,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            base_width: self.base_width,
        }
    }

    /// Hash over the fields that determine the training trajectory. The
    /// iteration count and output periods are excluded so a run can be
    /// extended.
    pub fn config_hash(&self) -> String {
        let h = HashedConfig {
            mode: self.mode,
            seed: self.seed,
            base_width: self.base_width,
            random_crop: self.random_crop,
            hyperparameters: &self.hyperparameters,
        };
        let json = serde_json::to_vec(&h).expect("config serializes");
        checkpoint::sha256_hex(&json)
    }

    pub fn validate(&self) -> Result<()> {
        validate_config(&self.hyperparameters).map_err(Error::Config)?;
        let mut v = Vec::new();
        if self.base_width == 0 {
            v.push(crate::domain::ConfigViolation {
                field: "base_width".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.mode == Mode::Dual && self.hyperparameters.num_domains != 2 {
            v.push(crate::domain::ConfigViolation {
                field: "num_domains".into(),
                message: "dual mode needs exactly 2".into(),
            });
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Side length images must be loaded at for this run.
    pub fn load_size(&self) -> usize {
        let s = self.hyperparameters.image_size;
        if self.random_crop {
            s + s / 8
        } else {
            s
        }
    }
}

/// Minimal network interface used by the translation round.
pub trait Translator {
    fn content(&self, domains: &[usize], x: &Tensor) -> Result<Tensor>;
    /// `(mean, logvar)`.
    fn attribute(&self, domains: &[usize], x: &Tensor) -> Result<(Tensor, Tensor)>;
    fn generate(&self, domains: &[usize], content: &Tensor, attr: &Tensor) -> Result<Tensor>;
}

impl Translator for ModelSet {
    fn content(&self, domains: &[usize], x: &Tensor) -> Result<Tensor> {
        self.content_batch(domains, x)
    }

    fn attribute(&self, domains: &[usize], x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.attribute_batch(domains, x)
    }

    fn generate(&self, domains: &[usize], content: &Tensor, attr: &Tensor) -> Result<Tensor> {
        Ok(self.generate_batch(domains, content, attr)?.0)
    }
}

/// Encoded attribute with its reparameterised sample.
#[derive(Clone, Debug)]
pub struct AttributeSample {
    pub mean: Tensor,
    pub logvar: Tensor,
    pub sample: Tensor,
}

fn reparameterise(mean: Tensor, logvar: Tensor, noise: Option<&Tensor>) -> Result<AttributeSample> {
    let sample = match noise {
        Some(eps) => (&mean + eps.broadcast_mul(&(&logvar * 0.5)?.exp()?)?)?,
        None => mean.clone(),
    };
    Ok(AttributeSample {
        mean,
        logvar,
        sample,
    })
}

fn encode<M: Translator + ?Sized>(
    models: &M,
    domains: &[usize],
    x: &Tensor,
    noise: Option<&Tensor>,
) -> Result<(Tensor, AttributeSample)> {
    let c = models.content(domains, x)?;
    let (m, lv) = models.attribute(domains, x)?;
    Ok((c, reparameterise(m, lv, noise)?))
}

/// Outputs of the first attribute swap.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// Lives in x's domain: y's content with x's attribute.
    pub u: Tensor,
    /// Lives in y's domain: x's content with y's attribute.
    pub v: Tensor,
    pub content_x: Tensor,
    pub content_y: Tensor,
    pub attr_x: AttributeSample,
    pub attr_y: AttributeSample,
}

/// `u = G_dx(c_y, a_x)`, `v = G_dy(c_x, a_y)`. `noise` holds reparameterisation
/// noise for `(x, y)`; `None` uses the attribute means.
pub fn forward_translation<M: Translator + ?Sized>(
    models: &M,
    x: &Tensor,
    y: &Tensor,
    dx: &[usize],
    dy: &[usize],
    noise: Option<(&Tensor, &Tensor)>,
) -> Result<ForwardOutputs> {
    if x.dims() != y.dims() {
        return Err(Error::invalid(format!(
            "x and y shapes differ: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    let (cx, ax) = encode(models, dx, x, noise.map(|n| n.0))?;
    let (cy, ay) = encode(models, dy, y, noise.map(|n| n.1))?;
    let u = models.generate(dx, &cy, &ax.sample)?;
    let v = models.generate(dy, &cx, &ay.sample)?;
    Ok(ForwardOutputs {
        u,
        v,
        content_x: cx,
        content_y: cy,
        attr_x: ax,
        attr_y: ay,
    })
}

/// Outputs of the second attribute swap.
#[derive(Clone, Debug)]
pub struct BackwardOutputs {
    pub x_hat: Tensor,
    pub y_hat: Tensor,
    pub content_u: Tensor,
    pub content_v: Tensor,
    pub attr_u: AttributeSample,
    pub attr_v: AttributeSample,
}

/// `x_hat = G_dx(c_v, a_u)`, `y_hat = G_dy(c_u, a_v)`.
pub fn backward_translation<M: Translator + ?Sized>(
    models: &M,
    u: &Tensor,
    v: &Tensor,
    dx: &[usize],
    dy: &[usize],
    noise: Option<(&Tensor, &Tensor)>,
) -> Result<BackwardOutputs> {
    let (cu, au) = encode(models, dx, u, noise.map(|n| n.0))?;
    let (cv, av) = encode(models, dy, v, noise.map(|n| n.1))?;
    let x_hat = models.generate(dx, &cv, &au.sample)?;
    let y_hat = models.generate(dy, &cu, &av.sample)?;
    Ok(BackwardOutputs {
        x_hat,
        y_hat,
        content_u: cu,
        content_v: cv,
        attr_u: au,
        attr_v: av,
    })
}

/// An exactly invertible linear stand-in for the networks.
///
/// Images are flattened; domain 0 keeps the first `attr_dim` values (scaled
/// by 1/2) as the attribute and the rest (scaled by 2) as content, domain 1
/// uses the last `attr_dim` values (scaled by 1/4) and the rest (scaled by 4).
/// Power-of-two scales make every round trip exact in floating point.
#[derive(Clone, Debug)]
pub struct LinearToy {
    pub image_size: usize,
    pub attr_dim: usize,
}

impl LinearToy {
    fn side(&self, domains: &[usize]) -> Result<usize> {
        match domains.first() {
            Some(&d) if d < 2 && domains.iter().all(|&e| e == d) => Ok(d),
            _ => Err(Error::invalid("toy model takes single-domain batches over 2 domains")),
        }
    }

    fn n(&self) -> usize {
        3 * self.image_size * self.image_size
    }
}

impl Translator for LinearToy {
    fn content(&self, domains: &[usize], x: &Tensor) -> Result<Tensor> {
        let flat = x.flatten_from(1)?;
        let (n, d) = (self.n(), self.attr_dim);
        Ok(match self.side(domains)? {
            0 => (flat.narrow(1, d, n - d)? * 2.0)?,
            _ => (flat.narrow(1, 0, n - d)? * 4.0)?,
        })
    }

    fn attribute(&self, domains: &[usize], x: &Tensor) -> Result<(Tensor, Tensor)> {
        let flat = x.flatten_from(1)?;
        let (n, d) = (self.n(), self.attr_dim);
        let mean = match self.side(domains)? {
            0 => (flat.narrow(1, 0, d)? * 0.5)?,
            _ => (flat.narrow(1, n - d, d)? * 0.25)?,
        };
        let logvar = mean.zeros_like()?;
        Ok((mean, logvar))
    }

    fn generate(&self, domains: &[usize], content: &Tensor, attr: &Tensor) -> Result<Tensor> {
        let flat = match self.side(domains)? {
            0 => Tensor::cat(&[&(attr * 2.0)?, &(content * 0.5)?], 1)?,
            _ => Tensor::cat(&[&(content * 0.25)?, &(attr * 4.0)?], 1)?,
        };
        let b = flat.dim(0)?;
        Ok(flat.reshape((b, 3, self.image_size, self.image_size))?)
    }
}

/// One training batch; rows of `x` come from `dx`, rows of `y` from `dy`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub dx: Vec<usize>,
    pub y: Tensor,
    pub dy: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[UnpairedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let xs: Vec<&ImageTensor> = samples.iter().map(|s| &s.x).collect();
        let ys: Vec<&ImageTensor> = samples.iter().map(|s| &s.y).collect();
        Ok(Self {
            x: stack(&xs)?,
            dx: samples.iter().map(|s| s.dx).collect(),
            y: stack(&ys)?,
            dy: samples.iter().map(|s| s.dy).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.dx.len()
    }
}

/// Every tensor produced by one training round.
#[derive(Clone, Debug)]
pub struct TranslationRound {
    pub forward: ForwardOutputs,
    pub backward: BackwardOutputs,
    pub x_self: Tensor,
    pub y_self: Tensor,
    /// Prior draws shared by both sides, `(B, attribute_dim)`.
    pub z1: Tensor,
    pub z2: Tensor,
    /// Generations from `(c_x, z1)`, `(c_x, z2)` in x's domain.
    pub x_prior: (Tensor, Tensor),
    /// Generations from `(c_y, z1)`, `(c_y, z2)` in y's domain.
    pub y_prior: (Tensor, Tensor),
    /// Re-encoded attribute means of the `z1` generations.
    pub z1_hat_x: Tensor,
    pub z1_hat_y: Tensor,
    /// Quarter-size outputs for `[u, x_prior.0, x_prior.1]` and the y side.
    pub low_fakes: Option<(Tensor, Tensor)>,
}

impl TranslationRound {
    fn fakes_x(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.forward.u, &self.x_prior.0, &self.x_prior.1], 0)?)
    }

    fn fakes_y(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.forward.v, &self.y_prior.0, &self.y_prior.1], 0)?)
    }
}

fn repeat(d: &[usize], times: usize) -> Vec<usize> {
    (0..times).flat_map(|_| d.iter().copied()).collect()
}

fn rows(t: &Tensor, block: usize, b: usize) -> Result<Tensor> {
    Ok(t.narrow(0, block * b, b)?)
}

fn noise(models: &ModelSet, rng: &mut RngStream, b: usize) -> Result<Tensor> {
    let d = models.hyperparameters().attribute_dim;
    Ok(Tensor::from_vec(rng.normals_f32(b * d), (b, d), models.device())?.to_dtype(models.dtype())?)
}

/// Runs the full round, batching generator calls per network.
pub fn build_round(models: &ModelSet, batch: &Batch, rng: &mut RngStream) -> Result<TranslationRound> {
    let b = batch.size();
    let (dx, dy) = (&batch.dx, &batch.dy);
    let (eps_x, eps_y) = (noise(models, rng, b)?, noise(models, rng, b)?);
    let z1 = noise(models, rng, b)?;
    let mut z2 = noise(models, rng, b)?;
    while scalar(&(&z1 - &z2)?.abs()?.mean_all()?)? <= MS_Z_EPS {
        z2 = noise(models, rng, b)?;
    }

    let (cx, ax) = encode(models, dx, &batch.x, Some(&eps_x))?;
    let (cy, ay) = encode(models, dy, &batch.y, Some(&eps_y))?;

    let (gx, lowx) = models.generate_batch(
        &repeat(dx, 4),
        &Tensor::cat(&[&cy, &cx, &cx, &cx], 0)?,
        &Tensor::cat(&[&ax.sample, &ax.sample, &z1, &z2], 0)?,
    )?;
    let (gy, lowy) = models.generate_batch(
        &repeat(dy, 4),
        &Tensor::cat(&[&cx, &cy, &cy, &cy], 0)?,
        &Tensor::cat(&[&ay.sample, &ay.sample, &z1, &z2], 0)?,
    )?;
    let (u, x_self, xr1, xr2) = (rows(&gx, 0, b)?, rows(&gx, 1, b)?, rows(&gx, 2, b)?, rows(&gx, 3, b)?);
    let (v, y_self, yr1, yr2) = (rows(&gy, 0, b)?, rows(&gy, 1, b)?, rows(&gy, 2, b)?, rows(&gy, 3, b)?);
    let low_fakes = match (lowx, lowy) {
        // Rows 0..b are the swaps, rows 2b..4b the prior generations.
        (Some(lx), Some(ly)) => Some((
            Tensor::cat(&[&lx.narrow(0, 0, b)?, &lx.narrow(0, 2 * b, 2 * b)?], 0)?,
            Tensor::cat(&[&ly.narrow(0, 0, b)?, &ly.narrow(0, 2 * b, 2 * b)?], 0)?,
        )),
        _ => None,
    };

    // Second stage: encode u and v, and re-encode the z1 generations in the
    // same attribute-encoder call.
    let cu = models.content_batch(dx, &u)?;
    let cv = models.content_batch(dy, &v)?;
    let (mx, lvx) = models.attribute_batch(&repeat(dx, 2), &Tensor::cat(&[&u, &xr1], 0)?)?;
    let (my, lvy) = models.attribute_batch(&repeat(dy, 2), &Tensor::cat(&[&v, &yr1], 0)?)?;
    let (eps_u, eps_v) = (noise(models, rng, b)?, noise(models, rng, b)?);
    let au = reparameterise(rows(&mx, 0, b)?, rows(&lvx, 0, b)?, Some(&eps_u))?;
    let av = reparameterise(rows(&my, 0, b)?, rows(&lvy, 0, b)?, Some(&eps_v))?;
    let x_hat = models.generate_batch(dx, &cv, &au.sample)?.0;
    let y_hat = models.generate_batch(dy, &cu, &av.sample)?.0;

    Ok(TranslationRound {
        forward: ForwardOutputs {
            u,
            v,
            content_x: cx,
            content_y: cy,
            attr_x: ax,
            attr_y: ay,
        },
        backward: BackwardOutputs {
            x_hat,
            y_hat,
            content_u: cu,
            content_v: cv,
            attr_u: au,
            attr_v: av,
        },
        x_self,
        y_self,
        z1,
        z2,
        x_prior: (xr1, xr2),
        y_prior: (yr1, yr2),
        z1_hat_x: rows(&mx, 1, b)?,
        z1_hat_y: rows(&my, 1, b)?,
        low_fakes,
    })
}

/// Maps a loss-input rejection to the abort-step error for `term`.
fn guard(term: Term, r: Result<Tensor>) -> Result<Tensor> {
    match r {
        Err(Error::InvalidArgument(_)) => Err(Error::NonFinite {
            term: term.name().to_string(),
        }),
        other => other,
    }
}

fn weighted(terms: &BTreeMap<&'static str, Tensor>, weights: &[(Term, f64)]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (t, w) in weights {
        let x = (&terms[t.name()] * *w)?;
        total = Some(match total {
            None => x,
            Some(acc) => (acc + x)?,
        });
    }
    total.ok_or_else(|| Error::InvalidState("no objective terms".into()))
}

fn avg_pool_quarter(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d(4)?)
}

/// Mutable training state: models, optimizers, random streams and step.
pub struct TrainState {
    config: RunConfig,
    models: ModelSet,
    opt_g: Adam,
    opt_d: Adam,
    data_rng: RngStream,
    prior_rng: RngStream,
    step: u64,
}

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut init = RngStream::new(config.seed, "init");
        let models = ModelSet::build(
            &config.hyperparameters,
            config.mode,
            &config.arch(),
            &mut init,
            DType::F32,
        )?;
        let hp = &config.hyperparameters;
        let opt_g = Adam::new(models.params(), Group::Generator, hp.learning_rate, hp.beta1, hp.beta2)?;
        let opt_d = Adam::new(
            models.params(),
            Group::Discriminator,
            hp.learning_rate,
            hp.beta1,
            hp.beta2,
        )?;
        Ok(Self {
            config: config.clone(),
            models,
            opt_g,
            opt_d,
            data_rng: RngStream::new(config.seed, "data"),
            prior_rng: RngStream::new(config.seed, "prior"),
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn models(&self) -> &ModelSet {
        &self.models
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn optimizer_steps(&self) -> (u64, u64) {
        (self.opt_g.step_count(), self.opt_d.step_count())
    }

    pub fn optimizers_finite(&self) -> Result<bool> {
        Ok(self.opt_g.moments_finite()? && self.opt_d.moments_finite()?)
    }

    /// Draws the next batch from the data stream.
    pub fn next_batch(&mut self, ds: &UnpairedDataset) -> Result<Batch> {
        let crop = self
            .config
            .random_crop
            .then_some(self.config.hyperparameters.image_size);
        let samples = (0..self.config.hyperparameters.batch_size)
            .map(|_| sample_unpaired(ds, self.config.mode, &mut self.data_rng, crop))
            .collect::<Result<Vec<_>>>()?;
        Batch::from_samples(&samples)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let s = self.config.hyperparameters.image_size;
        let want = [batch.size(), 3, s, s];
        if batch.x.dims() != want || batch.y.dims() != want || batch.dy.len() != batch.size() {
            return Err(Error::invalid(format!(
                "batch shapes {:?}/{:?} do not match {want:?}",
                batch.x.dims(),
                batch.y.dims()
            )));
        }
        for (name, t) in [("x", &batch.x), ("y", &batch.y)] {
            let v: Vec<f32> = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            if v.iter().any(|p| !p.is_finite()) {
                return Err(Error::invalid(format!("batch image {name} is not finite")));
            }
        }
        Ok(())
    }

    /// Discriminator update on detached fakes. Returns the raw terms.
    fn discriminator_phase(
        &mut self,
        batch: &Batch,
        round: &TranslationRound,
        report: &mut LossReport,
    ) -> Result<Option<Tensor>> {
        let m = &self.models;
        let b = batch.size();
        let mut terms = BTreeMap::new();

        let cd = guard(
            Term::ContentAdvD,
            losses::content_adversarial_loss(
                &m.content_logits_batch(&round.forward.content_x.detach())?,
                &batch.dx,
                &m.content_logits_batch(&round.forward.content_y.detach())?,
                &batch.dy,
                ContentRole::Discriminator,
            ),
        )?;
        terms.insert(Term::ContentAdvD.name(), cd);

        let mut dadv: Option<Tensor> = None;
        let mut real_cls = Vec::new();
        let mut fake_cls = Vec::new();
        let sides = [
            (&batch.x, &batch.dx, round.fakes_x()?.detach()),
            (&batch.y, &batch.dy, round.fakes_y()?.detach()),
        ];
        for (real, doms, fakes) in &sides {
            let (scores, cls) =
                m.discriminate_batch(&repeat(doms, 4), &Tensor::cat(&[*real, fakes], 0)?)?;
            let l = guard(
                Term::DomainAdvD,
                losses::domain_adversarial_loss(
                    Some(&scores.narrow(0, 0, b)?),
                    &scores.narrow(0, b, 3 * b)?,
                    AdversarialRole::Discriminator,
                ),
            )?;
            dadv = Some(match dadv {
                None => l,
                Some(a) => (a + l)?,
            });
            if let Some(c) = cls {
                real_cls.push(c.narrow(0, 0, b)?);
                fake_cls.push(c.narrow(0, b, 3 * b)?);
            }
        }
        if let Some((lx, ly)) = &round.low_fakes {
            for (real, doms, low) in [(&batch.x, &batch.dx, lx), (&batch.y, &batch.dy, ly)] {
                let real_low = avg_pool_quarter(real)?;
                let s = m.discriminate_low_batch(
                    &repeat(doms, 4),
                    &Tensor::cat(&[&real_low, &low.detach()], 0)?,
                )?;
                let l = guard(
                    Term::DomainAdvD,
                    losses::domain_adversarial_loss(
                        Some(&s.narrow(0, 0, b)?),
                        &s.narrow(0, b, 3 * b)?,
                        AdversarialRole::Discriminator,
                    ),
                )?;
                dadv = Some((dadv.expect("set above") + l)?);
            }
        }
        terms.insert(Term::DomainAdvD.name(), dadv.expect("two sides"));

        let mut real_logits = None;
        if self.config.mode == Mode::Multi {
            let rl = Tensor::cat(&real_cls.iter().collect::<Vec<_>>(), 0)?;
            let fl = Tensor::cat(&fake_cls.iter().collect::<Vec<_>>(), 0)?;
            let true_d = [batch.dx.clone(), batch.dy.clone()].concat();
            let target_d = [repeat(&batch.dx, 3), repeat(&batch.dy, 3)].concat();
            let cls = losses::domain_classification_loss(&rl, &true_d, &fl, &target_d)
                .map_err(|_| Error::NonFinite {
                    term: Term::DomainClsReal.name().into(),
                })?;
            terms.insert(Term::DomainClsReal.name(), cls.real);
            real_logits = Some(rl.detach());
        }

        let weights = discriminator_weights(&self.config.hyperparameters, self.config.mode);
        for (t, _) in &weights {
            let v = scalar(&terms[t.name()])?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: t.name().into(),
                });
            }
            report.set(*t, v);
        }
        let total = weighted(&terms, &weights)?;
        report.total_d = scalar(&total)?;
        if !report.total_d.is_finite() {
            return Err(Error::NonFinite {
                term: "total_d".into(),
            });
        }
        let grads = total.backward()?;
        self.opt_d.step(&grads)?;
        Ok(real_logits)
    }

    /// Encoder/generator update against the current discriminators.
    fn generator_phase(
        &mut self,
        batch: &Batch,
        round: &TranslationRound,
        real_logits: Option<&Tensor>,
        report: &mut LossReport,
    ) -> Result<()> {
        let m = &self.models;
        let mut terms: BTreeMap<&'static str, Tensor> = BTreeMap::new();
        let f = &round.forward;
        let bw = &round.backward;

        terms.insert(
            Term::ContentAdvE.name(),
            guard(
                Term::ContentAdvE,
                losses::content_adversarial_loss(
                    &m.content_logits_batch(&f.content_x)?,
                    &batch.dx,
                    &m.content_logits_batch(&f.content_y)?,
                    &batch.dy,
                    ContentRole::Encoder,
                ),
            )?,
        );

        let mut dadv: Option<Tensor> = None;
        let mut fake_cls = Vec::new();
        let add = |acc: Option<Tensor>, l: Tensor| -> Result<Option<Tensor>> {
            Ok(Some(match acc {
                None => l,
                Some(a) => (a + l)?,
            }))
        };
        for (doms, fakes) in [(&batch.dx, round.fakes_x()?), (&batch.dy, round.fakes_y()?)] {
            let (scores, cls) = m.discriminate_batch(&repeat(doms, 3), &fakes)?;
            let l = guard(
                Term::DomainAdvG,
                losses::domain_adversarial_loss(None, &scores, AdversarialRole::Generator),
            )?;
            dadv = add(dadv, l)?;
            if let Some(c) = cls {
                fake_cls.push(c);
            }
        }
        if let Some((lx, ly)) = &round.low_fakes {
            for (doms, low) in [(&batch.dx, lx), (&batch.dy, ly)] {
                let s = m.discriminate_low_batch(&repeat(doms, 3), low)?;
                let l = guard(
                    Term::DomainAdvG,
                    losses::domain_adversarial_loss(None, &s, AdversarialRole::Generator),
                )?;
                dadv = add(dadv, l)?;
            }
        }
        terms.insert(Term::DomainAdvG.name(), dadv.expect("two sides"));

        terms.insert(
            Term::CrossCycle.name(),
            guard(
                Term::CrossCycle,
                losses::cross_cycle_loss(&batch.x, &batch.y, &bw.x_hat, &bw.y_hat),
            )?,
        );
        let half = |a: Tensor, b: Tensor| -> Result<Tensor> { Ok(((a + b)? * 0.5)?) };
        terms.insert(
            Term::SelfRecon.name(),
            half(
                guard(Term::SelfRecon, losses::self_reconstruction_loss(&batch.x, &round.x_self))?,
                guard(Term::SelfRecon, losses::self_reconstruction_loss(&batch.y, &round.y_self))?,
            )?,
        );
        terms.insert(
            Term::LatentReg.name(),
            half(
                guard(Term::LatentReg, losses::latent_regression_loss(&round.z1, &round.z1_hat_x))?,
                guard(Term::LatentReg, losses::latent_regression_loss(&round.z1, &round.z1_hat_y))?,
            )?,
        );
        terms.insert(
            Term::Kl.name(),
            half(
                guard(Term::Kl, losses::kl_loss(&f.attr_x.mean, &f.attr_x.logvar))?,
                guard(Term::Kl, losses::kl_loss(&f.attr_y.mean, &f.attr_y.logvar))?,
            )?,
        );
        let ms = |pair: &(Tensor, Tensor)| -> Result<Tensor> {
            match losses::mode_seeking_loss(&pair.0, &pair.1, &round.z1, &round.z2) {
                Err(Error::InvalidArgument(_)) => Err(Error::NonFinite {
                    term: Term::ModeSeeking.name().into(),
                }),
                other => other,
            }
        };
        terms.insert(Term::ModeSeeking.name(), half(ms(&round.x_prior)?, ms(&round.y_prior)?)?);
        terms.insert(
            Term::ContentL1.name(),
            half(
                guard(Term::ContentL1, losses::content_l1_regularizer(&f.content_x))?,
                guard(Term::ContentL1, losses::content_l1_regularizer(&f.content_y))?,
            )?,
        );
        if self.config.mode == Mode::Multi {
            let real = real_logits.ok_or_else(|| Error::InvalidState("missing real logits".into()))?;
            let fl = Tensor::cat(&fake_cls.iter().collect::<Vec<_>>(), 0)?;
            let true_d = [batch.dx.clone(), batch.dy.clone()].concat();
            let target_d = [repeat(&batch.dx, 3), repeat(&batch.dy, 3)].concat();
            let cls = losses::domain_classification_loss(real, &true_d, &fl, &target_d).map_err(
                |_| Error::NonFinite {
                    term: Term::DomainClsFake.name().into(),
                },
            )?;
            terms.insert(Term::DomainClsFake.name(), cls.fake);
        }

        let weights = generator_weights(&self.config.hyperparameters, self.config.mode);
        for (t, _) in &weights {
            let v = scalar(&terms[t.name()])?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: t.name().into(),
                });
            }
            report.set(*t, v);
        }
        let total = weighted(&terms, &weights)?;
        report.total_g = scalar(&total)?;
        if !report.total_g.is_finite() {
            return Err(Error::NonFinite {
                term: "total_g".into(),
            });
        }
        let grads = total.backward()?;
        self.opt_g.step(&grads)?;
        Ok(())
    }

    /// One discriminator update followed by one encoder/generator update.
    ///
    /// On a non-finite loss or parameter the parameters, optimizer state and
    /// step counter are restored; the random streams keep their advanced
    /// position so a retry sees fresh draws.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        self.check_batch(batch)?;
        let snapshot = self.models.params().snapshot()?;
        let (opt_g, opt_d) = (self.opt_g.clone(), self.opt_d.clone());

        let result = self.try_step(batch).and_then(|r| {
            if self.models.params().all_finite()? {
                Ok(r)
            } else {
                Err(Error::NonFinite {
                    term: "parameters".into(),
                })
            }
        });
        match result {
            Ok(report) => {
                self.step += 1;
                Ok(report)
            }
            Err(e) => {
                if matches!(e, Error::NonFinite { .. }) {
                    self.models.params().restore(&snapshot)?;
                    self.opt_g = opt_g;
                    self.opt_d = opt_d;
                }
                Err(e)
            }
        }
    }

    fn try_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let round = build_round(&self.models, batch, &mut self.prior_rng)?;
        let mut report = LossReport::default();
        let real_logits = self.discriminator_phase(batch, &round, &mut report)?;
        self.generator_phase(batch, &round, real_logits.as_ref(), &mut report)?;
        if let Some(t) = report.first_non_finite() {
            return Err(Error::NonFinite { term: t.into() });
        }
        Ok(report)
    }

    /// Runs only the discriminator phase on `batch` (used to check that the
    /// two phases touch disjoint parameter groups).
    pub fn discriminator_phase_only(&mut self, batch: &Batch) -> Result<LossReport> {
        let round = build_round(&self.models, batch, &mut self.prior_rng)?;
        let mut report = LossReport::default();
        self.discriminator_phase(batch, &round, &mut report)?;
        Ok(report)
    }

    /// Runs only the encoder/generator phase on `batch`.
    pub fn generator_phase_only(&mut self, batch: &Batch) -> Result<LossReport> {
        let round = build_round(&self.models, batch, &mut self.prior_rng)?;
        let mut report = LossReport::default();
        let real_logits = match self.config.mode {
            Mode::Multi => {
                let b = batch.size();
                let mut v = Vec::new();
                for (x, d) in [(&batch.x, &batch.dx), (&batch.y, &batch.dy)] {
                    let (_, c) = self.models.discriminate_batch(d, x)?;
                    v.push(c.expect("multi mode has class logits").narrow(0, 0, b)?.detach());
                }
                Some(Tensor::cat(&v.iter().collect::<Vec<_>>(), 0)?)
            }
            Mode::Dual => None,
        };
        self.generator_phase(batch, &round, real_logits.as_ref(), &mut report)?;
        Ok(report)
    }

    /// Writes parameters, optimizer moments, random-stream positions and the
    /// step counter.
    pub fn save_checkpoint(&self, path: &Path) -> Result<Header> {
        let mut blocks = Vec::new();
        for p in self.models.params().params() {
            blocks.push(tensor_block(&format!("param/{}", p.name), p.var.as_tensor())?);
        }
        let mut opt_steps = BTreeMap::new();
        for (tag, opt) in [("generator", &self.opt_g), ("discriminator", &self.opt_d)] {
            let st = opt.state();
            opt_steps.insert(tag, st.step);
            for (name, m, v) in &st.moments {
                blocks.push(tensor_block(&format!("adam/{tag}/m/{name}"), m)?);
                blocks.push(tensor_block(&format!("adam/{tag}/v/{name}"), v)?);
            }
        }
        let meta = CheckpointMeta {
            config: self.config.clone(),
            data_rng: self.data_rng.state(),
            prior_rng: self.prior_rng.state(),
            optimizer_steps: opt_steps.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        };
        let header = Header {
            format_version: 0,
            step: self.step,
            parameter_count: self.models.parameter_count(),
            content_hash: String::new(),
            config_hash: self.config.config_hash(),
            meta: serde_json::to_value(&meta)?,
        };
        checkpoint::save(path, header, &blocks)
    }

    /// Restores a state written by [`TrainState::save_checkpoint`]. Refuses a
    /// checkpoint whose configuration hash differs from `config`'s.
    pub fn load_checkpoint(path: &Path, config: &RunConfig) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        let expected = config.config_hash();
        if ck.header.config_hash != expected {
            return Err(Error::ConfigMismatch {
                expected,
                found: ck.header.config_hash.clone(),
            });
        }
        let meta: CheckpointMeta = serde_json::from_value(ck.header.meta.clone())?;
        let mut state = TrainState::new(config)?;
        load_params(&state.models, &ck, path)?;
        for (tag, opt) in [("generator", &mut state.opt_g), ("discriminator", &mut state.opt_d)] {
            let mut st = opt.state();
            st.step = *meta.optimizer_steps.get(tag).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("missing optimizer step for {tag}"),
            })?;
            let mut moments = Vec::new();
            for (name, m, _) in st.moments {
                let mb = block_tensor(&ck, &format!("adam/{tag}/m/{name}"), path)?;
                let vb = block_tensor(&ck, &format!("adam/{tag}/v/{name}"), path)?;
                if mb.dims() != m.dims() {
                    return Err(Error::Checkpoint {
                        path: path.to_path_buf(),
                        reason: format!("moment shape mismatch for {name}"),
                    });
                }
                moments.push((name, mb, vb));
            }
            opt.restore(&AdamState {
                step: st.step,
                moments,
            })?;
        }
        state.data_rng = RngStream::restore(&meta.data_rng)?;
        state.prior_rng = RngStream::restore(&meta.prior_rng)?;
        state.step = ck.header.step;
        Ok(state)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    data_rng: RngState,
    prior_rng: RngState,
    optimizer_steps: BTreeMap<String, u64>,
}

fn tensor_block(name: &str, t: &Tensor) -> Result<Block> {
    Ok(Block {
        name: name.to_string(),
        dims: t.dims().to_vec(),
        data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
    })
}

fn block_tensor(ck: &checkpoint::Checkpoint, name: &str, path: &Path) -> Result<Tensor> {
    let b = ck.block(name).ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("missing block `{name}`"),
    })?;
    Ok(Tensor::from_vec(b.data.clone(), b.dims.as_slice(), &candle_core::Device::Cpu)?)
}

fn load_params(models: &ModelSet, ck: &checkpoint::Checkpoint, path: &Path) -> Result<()> {
    for p in models.params().params() {
        let t = block_tensor(ck, &format!("param/{}", p.name), path)?;
        if t.dims() != p.var.dims() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("shape mismatch for `{}`", p.name),
            });
        }
        p.var.set(&t.to_dtype(p.var.dtype())?)?;
    }
    Ok(())
}

/// A frozen model loaded from a checkpoint for inference or evaluation.
pub struct LoadedModel {
    pub models: ModelSet,
    pub config: RunConfig,
    pub header: Header,
}

pub fn load_models(path: &Path) -> Result<LoadedModel> {
    let ck = checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.header.meta.clone())?;
    if meta.config.config_hash() != ck.header.config_hash {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "stored configuration does not match its hash".into(),
        });
    }
    let mut init = RngStream::new(meta.config.seed, "init");
    let models = ModelSet::build(
        &meta.config.hyperparameters,
        meta.config.mode,
        &meta.config.arch(),
        &mut init,
        DType::F32,
    )?;
    load_params(&models, &ck, path)?;
    Ok(LoadedModel {
        models,
        config: meta.config,
        header: ck.header,
    })
}

/// Self-reconstruction and cross-cycle errors of the trained model, averaged
/// over every pairing of a domain-0 image with a domain-1 image. Attributes
/// use their posterior means, so the result is deterministic.
pub fn reconstruction_errors(models: &ModelSet, ds: &UnpairedDataset) -> Result<(f64, f64)> {
    if ds.k() < 2 {
        return Err(Error::invalid("need at least two domains"));
    }
    let (mut sr, mut cc, mut n) = (0.0, 0.0, 0.0);
    for xi in ds.domain(0) {
        for yi in ds.domain(1) {
            let (x, y) = (stack(&[xi])?, stack(&[yi])?);
            let f = forward_translation(models, &x, &y, &[0], &[1], None)?;
            let b = backward_translation(models, &f.u, &f.v, &[0], &[1], None)?;
            let xs = models.generate_batch(&[0], &f.content_x, &f.attr_x.mean)?.0;
            let ys = models.generate_batch(&[1], &f.content_y, &f.attr_y.mean)?.0;
            let s = (losses::self_reconstruction_loss(&x, &xs)? + losses::self_reconstruction_loss(&y, &ys)?)?;
            sr += 0.5 * scalar(&s)?;
            cc += scalar(&losses::cross_cycle_loss(&x, &y, &b.x_hat, &b.y_hat)?)?;
            n += 1.0;
        }
    }
    Ok((sr / n, cc / n))
}

/// 4x4 grid: per row a source image, its self-reconstruction and two
/// prior-sampled translations into the other domain.
pub fn sample_grid(models: &ModelSet, ds: &UnpairedDataset, seed: u64) -> Result<image::RgbImage> {
    let k = ds.k();
    let mut rng = RngStream::new(seed, "samples");
    let mut tiles = Vec::with_capacity(16);
    for row in 0..4 {
        let d = row % 2 % k;
        let imgs = ds.domain(d);
        let img = &imgs[(row / 2) % imgs.len()];
        let dc = one_hot(d, k)?;
        let target = one_hot((d + 1) % k, k)?;
        let c = models.encode_content(img, &dc)?;
        let a = models.encode_attribute_with_noise(img, &dc, &vec![0.0; models.hyperparameters().attribute_dim])?;
        tiles.push(img.clone());
        tiles.push(models.generate(&c, &a.mean, &dc)?);
        for _ in 0..2 {
            let z = crate::domain::sample_attribute_prior(models.hyperparameters().attribute_dim, &mut rng)?;
            tiles.push(models.generate(&c, &z, &target)?);
        }
    }
    imageio::grid(&tiles, 4)
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    pub last_report: Option<LossReport>,
    pub rolled_back_steps: u64,
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step}.ckpt"))
}

fn sample_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("samples").join(format!("step_{step}.png"))
}

/// Keeps the header and rows with `step <= upto` of an existing loss log.
fn truncated_log(path: &Path, upto: u64) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            out.push(line);
            continue;
        }
        let step: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::IncompleteRun {
                path: path.to_path_buf(),
                reason: format!("malformed loss row {i}"),
            })?;
        if step <= upto {
            out.push(line);
        }
    }
    Ok(out)
}

/// Trains for `config.iterations` steps, writing the run directory:
/// `config.json`, `losses.csv`, `checkpoints/step_{n}.ckpt` and
/// `samples/step_{n}.png`. With `resume`, continues from that checkpoint and
/// rewrites the loss log up to the restored step first.
pub fn train(
    config: &RunConfig,
    dataset: &UnpairedDataset,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.require_nonempty()?;
    let hp = &config.hyperparameters;
    if dataset.k() != hp.num_domains {
        return Err(Error::invalid(format!(
            "dataset has {} domains, config expects {}",
            dataset.k(),
            hp.num_domains
        )));
    }
    let size_ok = if config.random_crop {
        dataset.image_size() >= hp.image_size
    } else {
        dataset.image_size() == hp.image_size
    };
    if !size_ok {
        return Err(Error::invalid(format!(
            "dataset images are {}px, config expects {}px",
            dataset.image_size(),
            hp.image_size
        )));
    }

    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let cfg_path = run_dir.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&cfg_path, e))?;

    let mut state = match resume {
        Some(p) => TrainState::load_checkpoint(p, config)?,
        None => TrainState::new(config)?,
    };
    let log_path = run_dir.join("losses.csv");
    let kept = match resume {
        Some(_) if log_path.exists() => truncated_log(&log_path, state.step())?,
        Some(_) => {
            return Err(Error::IncompleteRun {
                path: log_path,
                reason: "cannot resume without the loss log".into(),
            })
        }
        None => vec![LossReport::CSV_HEADER.join(",")],
    };
    fs::write(&log_path, kept.join("\n") + "\n").map_err(|e| Error::io(&log_path, e))?;
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = csv::WriterBuilder::new().has_headers(false).from_writer(file);

    let mut consecutive = 0usize;
    let mut rolled_back = 0u64;
    let mut last = None;
    while state.step() < config.iterations {
        let batch = state.next_batch(dataset)?;
        match state.train_step(&batch) {
            Ok(report) => {
                consecutive = 0;
                log.write_record(report.csv_record(state.step()))?;
                last = Some(report);
            }
            Err(Error::NonFinite { term }) => {
                consecutive += 1;
                rolled_back += 1;
                log::warn!("step {}: non-finite `{term}`, rolled back", state.step() + 1);
                if consecutive >= MAX_CONSECUTIVE_NON_FINITE {
                    log.flush().map_err(|e| Error::io(&log_path, e))?;
                    return Err(Error::NonFinite { term });
                }
                continue;
            }
            Err(e) => return Err(e),
        }
        let s = state.step();
        if config.checkpoint_every > 0 && s % config.checkpoint_every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            state.save_checkpoint(&checkpoint_path(run_dir, s))?;
        }
        if config.sample_every > 0 && s % config.sample_every == 0 {
            imageio::save_rgb8(&sample_path(run_dir, s), &sample_grid(state.models(), dataset, config.seed)?)?;
        }
        if s % 100 == 0 {
            log::info!("step {s}/{}", config.iterations);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let s = state.step();
    let final_checkpoint = checkpoint_path(run_dir, s);
    if !final_checkpoint.exists() || resume.is_some() || config.checkpoint_every == 0 || s % config.checkpoint_every != 0 {
        state.save_checkpoint(&final_checkpoint)?;
    }
    let sp = sample_path(run_dir, s);
    if !sp.exists() || config.sample_every == 0 || s % config.sample_every != 0 {
        imageio::save_rgb8(&sp, &sample_grid(state.models(), dataset, config.seed)?)?;
    }
    Ok(TrainOutcome {
        final_checkpoint,
        steps: s,
        last_report: last,
        rolled_back_steps: rolled_back,
    })
}

/// Reads `losses.csv` into `(step, column -> value)` rows.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, BTreeMap<String, f64>)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let mut row = BTreeMap::new();
        let mut step = 0;
        for (h, v) in headers.iter().zip(rec.iter()) {
            if h == "step" {
                step = v.parse().map_err(|_| Error::IncompleteRun {
                    path: path.to_path_buf(),
                    reason: format!("bad step `{v}`"),
                })?;
            } else {
                row.insert(
                    h.clone(),
                    v.parse().map_err(|_| Error::IncompleteRun {
                        path: path.to_path_buf(),
                        reason: format!("bad value `{v}` in column {h}"),
                    })?,
                );
            }
        }
        out.push((step, row));
    }
    Ok(out)
}
