//! Encoder, generator and discriminator families.
//!
//! Dual mode keeps one network per domain and ties the last content-encoder
//! block and the first generator block across the two domains. Multi mode
//! keeps a single shared network of each kind; the attribute encoder and the
//! generator receive the one-hot domain code as extra constant input planes,
//! and the domain discriminator carries a k-way classification head.

mod layers;
mod params;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::domain::{
    validate_config, AttributeCode, ContentCode, DomainCode, Hyperparameters, ImageTensor, Mode,
};
use crate::rng::RngStream;
use crate::{Error, Result};

use layers::{concat_planes, lrelu, Conv2d, ConvTranspose2d, InstanceNorm, Linear, ResBlock};
pub use params::{Group, Param, ParamStore};
pub(crate) use params::ParamBuilder;

/// Number of stride-2 stages between an image and its content code.
pub const CONTENT_DOWNSAMPLING: usize = 8;

/// Channel widths. Content codes carry `4 * base_width` channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub base_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { base_width: 8 }
    }
}

#[derive(Clone, Debug)]
struct ContentEncoder {
    stem: [Conv2d; 3],
    norms: [InstanceNorm; 2],
    blocks: Vec<ResBlock>,
}

impl ContentEncoder {
    fn new(pb: &mut ParamBuilder, w: usize, shared_tail: ResBlock) -> Result<Self> {
        let c = 4 * w;
        Ok(Self {
            stem: [
                Conv2d::new(pb, "conv0", 3, w, 4, 2, 1)?,
                Conv2d::new(pb, "conv1", w, 2 * w, 4, 2, 1)?,
                Conv2d::new(pb, "conv2", 2 * w, c, 4, 2, 1)?,
            ],
            norms: [
                InstanceNorm::new(pb, "norm1", 2 * w)?,
                InstanceNorm::new(pb, "norm2", c)?,
            ],
            blocks: vec![
                ResBlock::new(pb, "res0", c)?,
                ResBlock::new(pb, "res1", c)?,
                ResBlock::new(pb, "res2", c)?,
                shared_tail,
            ],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = lrelu(&self.stem[0].forward(x)?)?;
        h = self.norms[0].forward(&self.stem[1].forward(&h)?)?.relu()?;
        h = self.norms[1].forward(&self.stem[2].forward(&h)?)?.relu()?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }
}

/// Initial log-variance of the attribute posterior. Starting narrow lets the
/// attribute code carry colour information from the first steps; the KL term
/// widens it as training proceeds.
const LOGVAR_INIT: f64 = -4.0;

#[derive(Clone, Debug)]
struct AttributeEncoder {
    convs: [Conv2d; 4],
    mean_head: Linear,
    logvar_head: Linear,
}

impl AttributeEncoder {
    fn new(pb: &mut ParamBuilder, w: usize, code_dim: usize, attr_dim: usize) -> Result<Self> {
        let c = 4 * w;
        Ok(Self {
            convs: [
                Conv2d::new(pb, "conv0", 3 + code_dim, w, 4, 2, 1)?,
                Conv2d::new(pb, "conv1", w, 2 * w, 4, 2, 1)?,
                Conv2d::new(pb, "conv2", 2 * w, c, 4, 2, 1)?,
                Conv2d::new(pb, "conv3", c, c, 4, 2, 1)?,
            ],
            mean_head: Linear::new(pb, "mean", c, attr_dim)?,
            logvar_head: Linear::new_small(pb, "logvar", c, attr_dim, 0.1, LOGVAR_INIT)?,
        })
    }

    fn forward(&self, x: &Tensor, code: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let mut h = match code {
            Some(c) => concat_planes(x, c)?,
            None => x.clone(),
        };
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
        }
        let pooled = h.mean((2, 3))?;
        Ok((
            self.mean_head.forward(&pooled)?,
            self.logvar_head.forward(&pooled)?,
        ))
    }
}

#[derive(Clone, Debug)]
struct Generator {
    shared_head: ResBlock,
    mix: Conv2d,
    blocks: Vec<ResBlock>,
    ups: [ConvTranspose2d; 3],
    to_rgb: Conv2d,
    low_head: Option<Conv2d>,
}

impl Generator {
    fn new(
        pb: &mut ParamBuilder,
        w: usize,
        cond_dim: usize,
        shared_head: ResBlock,
        multiscale: bool,
    ) -> Result<Self> {
        let c = 4 * w;
        Ok(Self {
            shared_head,
            mix: Conv2d::new(pb, "mix", c + cond_dim, c, 3, 1, 1)?,
            blocks: vec![
                ResBlock::new(pb, "res1", c)?,
                ResBlock::new(pb, "res2", c)?,
                ResBlock::new(pb, "res3", c)?,
            ],
            ups: [
                ConvTranspose2d::new(pb, "up0", c + cond_dim, 2 * w, 4, 2, 1)?,
                ConvTranspose2d::new(pb, "up1", 2 * w + cond_dim, w, 4, 2, 1)?,
                ConvTranspose2d::new(pb, "up2", w + cond_dim, w, 4, 2, 1)?,
            ],
            to_rgb: Conv2d::new(pb, "to_rgb", w, 3, 3, 1, 1)?,
            low_head: if multiscale {
                Some(Conv2d::new(pb, "low_head", 2 * w, 3, 3, 1, 1)?)
            } else {
                None
            },
        })
    }

    /// Returns the full image and, when the low-resolution head exists, the
    /// quarter-size image read off the first upsampling stage.
    fn forward(&self, content: &Tensor, cond: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let h = self.shared_head.forward(content)?;
        let mut h = self.mix.forward(&concat_planes(&h, cond)?)?.relu()?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        let h = self.ups[0].forward(&concat_planes(&h, cond)?)?.relu()?;
        let low = match &self.low_head {
            Some(head) => Some(head.forward(&h)?.tanh()?),
            None => None,
        };
        let h = self.ups[1].forward(&concat_planes(&h, cond)?)?.relu()?;
        let h = self.ups[2].forward(&concat_planes(&h, cond)?)?.relu()?;
        let img = self.to_rgb.forward(&h)?.tanh()?;
        Ok((img, low))
    }
}

/// Patch discriminator: strided convolutions down to a realism score map,
/// plus an optional domain-classification head on the pooled features.
#[derive(Clone, Debug)]
struct Discriminator {
    convs: Vec<Conv2d>,
    head: Conv2d,
    class_head: Option<Linear>,
}

impl Discriminator {
    fn new(pb: &mut ParamBuilder, w: usize, stages: usize, classes: Option<usize>) -> Result<Self> {
        let mut convs = Vec::with_capacity(stages);
        let mut c_in = 3;
        for i in 0..stages {
            let c_out = w << i;
            convs.push(Conv2d::new(pb, &format!("conv{i}"), c_in, c_out, 4, 2, 1)?);
            c_in = c_out;
        }
        Ok(Self {
            head: Conv2d::new(pb, "head", c_in, 1, 3, 1, 1)?,
            class_head: match classes {
                Some(k) => Some(Linear::new(pb, "class_head", c_in, k)?),
                None => None,
            },
            convs,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let mut h = x.clone();
        for c in &self.convs {
            h = lrelu(&c.forward(&h)?)?;
        }
        let realism = self.head.forward(&h)?;
        let class = match &self.class_head {
            Some(l) => Some(l.forward(&h.mean((2, 3))?)?),
            None => None,
        };
        Ok((realism, class))
    }
}

/// Predicts the source domain of a content code.
#[derive(Clone, Debug)]
struct ContentDiscriminator {
    convs: [Conv2d; 2],
    out: Linear,
}

impl ContentDiscriminator {
    fn new(pb: &mut ParamBuilder, c: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            convs: [
                Conv2d::new(pb, "conv0", c, c, 3, 2, 1)?,
                Conv2d::new(pb, "conv1", c, c, 3, 2, 1)?,
            ],
            out: Linear::new(pb, "out", c, classes)?,
        })
    }

    fn forward(&self, content: &Tensor) -> Result<Tensor> {
        let mut h = content.clone();
        for c in &self.convs {
            h = lrelu(&c.forward(&h)?)?;
        }
        self.out.forward(&h.mean((2, 3))?)
    }
}

/// Output of the attribute encoder for one image.
#[derive(Clone, Debug)]
pub struct AttributeEncoding {
    pub mean: AttributeCode,
    pub logvar: AttributeCode,
    pub sample: AttributeCode,
}

/// Output of a domain discriminator for one image.
#[derive(Clone, Debug)]
pub struct DomainScores {
    /// Realism logits, `(h, w)`.
    pub realism: Tensor,
    /// Domain logits, present only in multi-domain mode.
    pub class_logits: Option<Vec<f32>>,
}

/// The full bundle of networks for one run.
#[derive(Clone, Debug)]
pub struct ModelSet {
    mode: Mode,
    hp: Hyperparameters,
    arch: ArchConfig,
    dtype: DType,
    device: Device,
    content_enc: Vec<ContentEncoder>,
    attr_enc: Vec<AttributeEncoder>,
    gens: Vec<Generator>,
    dis: Vec<Discriminator>,
    dis_low: Vec<Discriminator>,
    content_dis: ContentDiscriminator,
    store: ParamStore,
}

/// Builds all networks in `f32` with parameters drawn from `rng`.
pub fn build_models(
    hp: &Hyperparameters,
    mode: Mode,
    arch: &ArchConfig,
    rng: &mut RngStream,
) -> Result<ModelSet> {
    ModelSet::build(hp, mode, arch, rng, DType::F32)
}

impl ModelSet {
    pub fn build(
        hp: &Hyperparameters,
        mode: Mode,
        arch: &ArchConfig,
        rng: &mut RngStream,
        dtype: DType,
    ) -> Result<Self> {
        if hp.image_size % CONTENT_DOWNSAMPLING != 0 || hp.image_size < 2 * CONTENT_DOWNSAMPLING {
            return Err(Error::invalid(format!(
                "image_size {} is not divisible by the total downsampling factor {}",
                hp.image_size, CONTENT_DOWNSAMPLING
            )));
        }
        validate_config(hp).map_err(Error::Config)?;
        if mode == Mode::Dual && hp.num_domains != 2 {
            return Err(Error::invalid(format!(
                "dual mode needs exactly 2 domains, got {}",
                hp.num_domains
            )));
        }
        if arch.base_width == 0 {
            return Err(Error::invalid("base_width must be >= 1"));
        }
        let w = arch.base_width;
        let k = hp.num_domains;
        let d = hp.attribute_dim;
        let nets = match mode {
            Mode::Dual => 2,
            Mode::Multi => 1,
        };
        let code_dim = match mode {
            Mode::Dual => 0,
            Mode::Multi => k,
        };
        let device = Device::Cpu;
        let mut store = ParamStore::default();
        let mut pb = ParamBuilder::new(&mut store, rng, dtype, device.clone());

        let shared_content_tail = pb.scoped("content_enc.shared", Group::Generator, |pb| {
            ResBlock::new(pb, "res3", 4 * w)
        })?;
        let shared_gen_head = pb.scoped("gen.shared", Group::Generator, |pb| {
            ResBlock::new(pb, "res0", 4 * w)
        })?;

        let mut content_enc = Vec::new();
        let mut attr_enc = Vec::new();
        let mut gens = Vec::new();
        let mut dis = Vec::new();
        let mut dis_low = Vec::new();
        for i in 0..nets {
            let tail = shared_content_tail.clone();
            content_enc.push(pb.scoped(&format!("content_enc.{i}"), Group::Generator, |pb| {
                ContentEncoder::new(pb, w, tail)
            })?);
            attr_enc.push(pb.scoped(&format!("attr_enc.{i}"), Group::Generator, |pb| {
                AttributeEncoder::new(pb, w, code_dim, d)
            })?);
            let head = shared_gen_head.clone();
            gens.push(pb.scoped(&format!("gen.{i}"), Group::Generator, |pb| {
                Generator::new(pb, w, d + code_dim, head, hp.multiscale_enabled)
            })?);
            let classes = (mode == Mode::Multi).then_some(k);
            dis.push(pb.scoped(&format!("dis.{i}"), Group::Discriminator, |pb| {
                Discriminator::new(pb, w, 3, classes)
            })?);
            if hp.multiscale_enabled {
                dis_low.push(pb.scoped(&format!("dis_low.{i}"), Group::Discriminator, |pb| {
                    Discriminator::new(pb, w, 2, None)
                })?);
            }
        }
        let content_classes = match mode {
            Mode::Dual => 2,
            Mode::Multi => k,
        };
        let content_dis = pb.scoped("content_dis", Group::Discriminator, |pb| {
            ContentDiscriminator::new(pb, 4 * w, content_classes)
        })?;

        Ok(Self {
            mode,
            hp: hp.clone(),
            arch: arch.clone(),
            dtype,
            device,
            content_enc,
            attr_enc,
            gens,
            dis,
            dis_low,
            content_dis,
            store,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hp
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn num_domains(&self) -> usize {
        self.hp.num_domains
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// `(channels, h, w)` of every content code.
    pub fn content_shape(&self) -> (usize, usize, usize) {
        let s = self.hp.image_size / CONTENT_DOWNSAMPLING;
        (4 * self.arch.base_width, s, s)
    }

    /// `(channels, h, w)` of the multiscale low-resolution image.
    pub fn low_resolution_size(&self) -> usize {
        self.hp.image_size / 4
    }

    /// Names of the parameters shared across the two domains in dual mode.
    pub fn tied_parameter_names(&self) -> Vec<&str> {
        self.store
            .params()
            .iter()
            .filter(|p| p.name.contains(".shared."))
            .map(|p| p.name.as_str())
            .collect()
    }

    fn net_index(&self, domains: &[usize]) -> Result<usize> {
        let k = self.hp.num_domains;
        if domains.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if let Some(&bad) = domains.iter().find(|&&d| d >= k) {
            return Err(Error::invalid(format!("domain {bad} out of range for {k}")));
        }
        match self.mode {
            Mode::Multi => Ok(0),
            Mode::Dual => {
                if domains.iter().any(|&d| d != domains[0]) {
                    return Err(Error::invalid(
                        "dual-mode batches must come from a single domain",
                    ));
                }
                Ok(domains[0])
            }
        }
    }

    /// One-hot `(B, k)` codes in multi mode, `None` in dual mode.
    pub fn domain_codes(&self, domains: &[usize]) -> Result<Option<Tensor>> {
        if self.mode == Mode::Dual {
            return Ok(None);
        }
        let k = self.hp.num_domains;
        let mut v = vec![0f32; domains.len() * k];
        for (i, &d) in domains.iter().enumerate() {
            v[i * k + d] = 1.0;
        }
        Ok(Some(
            Tensor::from_vec(v, (domains.len(), k), &self.device)?.to_dtype(self.dtype)?,
        ))
    }

    /// Content codes for a batch `(B, 3, S, S)` drawn from one domain (dual)
    /// or any domains (multi).
    pub fn content_batch(&self, domains: &[usize], x: &Tensor) -> Result<Tensor> {
        let i = self.net_index(domains)?;
        self.content_enc[i].forward(x)
    }

    /// `(mean, logvar)`, each `(B, attribute_dim)`.
    pub fn attribute_batch(&self, domains: &[usize], x: &Tensor) -> Result<(Tensor, Tensor)> {
        let i = self.net_index(domains)?;
        let codes = self.domain_codes(domains)?;
        self.attr_enc[i].forward(x, codes.as_ref())
    }

    /// Generated images and (if enabled) quarter-size images.
    pub fn generate_batch(
        &self,
        domains: &[usize],
        content: &Tensor,
        attr: &Tensor,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let i = self.net_index(domains)?;
        let cond = match self.domain_codes(domains)? {
            Some(c) => Tensor::cat(&[attr, &c], 1)?,
            None => attr.clone(),
        };
        self.gens[i].forward(content, &cond)
    }

    pub fn discriminate_batch(
        &self,
        domains: &[usize],
        x: &Tensor,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let i = self.net_index(domains)?;
        self.dis[i].forward(x)
    }

    pub fn discriminate_low_batch(&self, domains: &[usize], x: &Tensor) -> Result<Tensor> {
        let i = self.net_index(domains)?;
        match self.dis_low.get(i) {
            Some(d) => Ok(d.forward(x)?.0),
            None => Err(Error::InvalidState(
                "multiscale branch is disabled for this model".into(),
            )),
        }
    }

    pub fn content_logits_batch(&self, content: &Tensor) -> Result<Tensor> {
        self.content_dis.forward(content)
    }

    fn check_domain(&self, domain: &DomainCode) -> Result<()> {
        if domain.k() != self.hp.num_domains {
            return Err(Error::invalid(format!(
                "domain code has k={} but the model has {} domains",
                domain.k(),
                self.hp.num_domains
            )));
        }
        Ok(())
    }

    fn image_input(&self, image: &ImageTensor) -> Result<Tensor> {
        let s = self.hp.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::invalid(format!(
                "image is {}x{}, model expects {s}x{s}",
                image.height(),
                image.width()
            )));
        }
        if !image.is_finite()? {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(image.tensor().to_dtype(self.dtype)?.unsqueeze(0)?)
    }

    fn content_input(&self, content: &ContentCode) -> Result<Tensor> {
        if content.shape() != self.content_shape() {
            return Err(Error::invalid(format!(
                "content code shape {:?} does not match {:?}",
                content.shape(),
                self.content_shape()
            )));
        }
        if content.to_vec()?.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("content code contains non-finite values"));
        }
        Ok(content.tensor().to_dtype(self.dtype)?.unsqueeze(0)?)
    }

    fn attribute_input(&self, attr: &AttributeCode) -> Result<Tensor> {
        if attr.dim() != self.hp.attribute_dim {
            return Err(Error::invalid(format!(
                "attribute dim {} does not match {}",
                attr.dim(),
                self.hp.attribute_dim
            )));
        }
        if attr.to_vec()?.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("attribute code contains non-finite values"));
        }
        Ok(attr.tensor().to_dtype(self.dtype)?.unsqueeze(0)?)
    }

    pub fn encode_content(&self, image: &ImageTensor, domain: &DomainCode) -> Result<ContentCode> {
        self.check_domain(domain)?;
        let x = self.image_input(image)?;
        ContentCode::new(self.content_batch(&[domain.index()], &x)?.squeeze(0)?.detach())
    }

    /// Encodes and draws a reparameterised sample with fresh noise from `rng`.
    pub fn encode_attribute(
        &self,
        image: &ImageTensor,
        domain: &DomainCode,
        rng: &mut RngStream,
    ) -> Result<AttributeEncoding> {
        let eps = rng.normals_f32(self.hp.attribute_dim);
        self.encode_attribute_with_noise(image, domain, &eps)
    }

    /// `sample = mean + exp(logvar / 2) * eps` with caller-supplied `eps`.
    pub fn encode_attribute_with_noise(
        &self,
        image: &ImageTensor,
        domain: &DomainCode,
        eps: &[f32],
    ) -> Result<AttributeEncoding> {
        self.check_domain(domain)?;
        if eps.len() != self.hp.attribute_dim {
            return Err(Error::invalid("noise length does not match attribute_dim"));
        }
        let x = self.image_input(image)?;
        let (mean, logvar) = self.attribute_batch(&[domain.index()], &x)?;
        let (mean, logvar) = (mean.squeeze(0)?.detach(), logvar.squeeze(0)?.detach());
        let eps = Tensor::from_slice(eps, eps.len(), &self.device)?.to_dtype(self.dtype)?;
        let sample = (&mean + (eps * (&logvar * 0.5)?.exp()?)?)?;
        Ok(AttributeEncoding {
            mean: AttributeCode::new(mean)?,
            logvar: AttributeCode::new(logvar)?,
            sample: AttributeCode::new(sample)?,
        })
    }

    pub fn generate(
        &self,
        content: &ContentCode,
        attribute: &AttributeCode,
        domain: &DomainCode,
    ) -> Result<ImageTensor> {
        Ok(self.generate_multiscale_inner(content, attribute, domain)?.0)
    }

    fn generate_multiscale_inner(
        &self,
        content: &ContentCode,
        attribute: &AttributeCode,
        domain: &DomainCode,
    ) -> Result<(ImageTensor, Option<ImageTensor>)> {
        self.check_domain(domain)?;
        let c = self.content_input(content)?;
        let a = self.attribute_input(attribute)?;
        let (img, low) = self.generate_batch(&[domain.index()], &c, &a)?;
        let low = match low {
            Some(l) => Some(ImageTensor::new(l.squeeze(0)?.detach())?),
            None => None,
        };
        Ok((ImageTensor::new(img.squeeze(0)?.detach())?, low))
    }

    /// Full-size image plus the quarter-size image from the low-resolution head.
    pub fn generate_multiscale(
        &self,
        content: &ContentCode,
        attribute: &AttributeCode,
        domain: &DomainCode,
    ) -> Result<(ImageTensor, ImageTensor)> {
        if !self.hp.multiscale_enabled {
            return Err(Error::InvalidState(
                "generate_multiscale called with multiscale disabled".into(),
            ));
        }
        let (full, low) = self.generate_multiscale_inner(content, attribute, domain)?;
        let low = low.ok_or_else(|| Error::InvalidState("missing low-resolution head".into()))?;
        Ok((full, low))
    }

    pub fn discriminate_domain(
        &self,
        image: &ImageTensor,
        domain: &DomainCode,
    ) -> Result<DomainScores> {
        self.check_domain(domain)?;
        let x = self.image_input(image)?;
        let (realism, class) = self.discriminate_batch(&[domain.index()], &x)?;
        let class_logits = match class {
            Some(c) => Some(c.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?),
            None => None,
        };
        Ok(DomainScores {
            realism: realism.squeeze(0)?.squeeze(0)?.detach(),
            class_logits,
        })
    }

    pub fn discriminate_content(&self, content: &ContentCode) -> Result<Vec<f32>> {
        let c = self.content_input(content)?;
        Ok(self
            .content_logits_batch(&c)?
            .squeeze(0)?
            .to_dtype(DType::F32)?
            .to_vec1()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(size: usize) -> Hyperparameters {
        Hyperparameters {
            image_size: size,
            ..Default::default()
        }
    }

    fn small() -> ArchConfig {
        ArchConfig { base_width: 2 }
    }

    fn models(mode: Mode, k: usize, seed: u64) -> ModelSet {
        let hp = Hyperparameters {
            num_domains: k,
            ..hp(32)
        };
        build_models(&hp, mode, &small(), &mut RngStream::new(seed, "init")).unwrap()
    }

    fn image(seed: u64, size: usize) -> ImageTensor {
        let mut r = RngStream::new(seed, "img");
        let v = r
            .normals_f32(3 * size * size)
            .into_iter()
            .map(|x| x.tanh())
            .collect();
        ImageTensor::from_chw(v, size, size).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = models(Mode::Dual, 2, 1);
        let b = models(Mode::Dual, 2, 1);
        assert_eq!(a.params().params().len(), b.params().params().len());
        for (p, q) in a.params().params().iter().zip(b.params().params()) {
            assert_eq!(p.name, q.name);
            let x: Vec<f32> = p.var.flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = q.var.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y, "{}", p.name);
        }
        assert!(a.parameter_count() > 0);
    }

    #[test]
    fn dual_mode_ties_are_shared_objects() {
        let m = models(Mode::Dual, 2, 1);
        assert!(!m.tied_parameter_names().is_empty());
        let tail_x = &m.content_enc[0].blocks[3];
        let tail_y = &m.content_enc[1].blocks[3];
        let x = image(3, 32);
        let before_y = m.content_batch(&[1], &x.tensor().unsqueeze(0).unwrap()).unwrap();
        // Overwrite one tied weight through the X-side handle.
        let p = m
            .params()
            .params()
            .iter()
            .find(|p| p.name == "content_enc.shared.res3.conv1.weight")
            .unwrap();
        p.var.set(&p.var.as_tensor().ones_like().unwrap()).unwrap();
        let after_y = m.content_batch(&[1], &x.tensor().unsqueeze(0).unwrap()).unwrap();
        let diff = (before_y - after_y)
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff > 0.0);
        for (a, b) in tail_x.vars().into_iter().zip(tail_y.vars()) {
            assert_eq!(a.as_tensor().id(), b.as_tensor().id());
        }
        for (a, b) in m.gens[0].shared_head.vars().into_iter().zip(m.gens[1].shared_head.vars()) {
            assert_eq!(a.as_tensor().id(), b.as_tensor().id());
        }
    }

    #[test]
    fn rejects_bad_image_size() {
        let r = build_models(&hp(65), Mode::Dual, &small(), &mut RngStream::new(1, "init"));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn content_shapes_match_across_domains() {
        let m = models(Mode::Dual, 2, 1);
        let d0 = crate::domain::one_hot(0, 2).unwrap();
        let d1 = crate::domain::one_hot(1, 2).unwrap();
        let a = m.encode_content(&image(1, 32), &d0).unwrap();
        let b = m.encode_content(&image(2, 32), &d1).unwrap();
        assert_eq!(a.shape(), m.content_shape());
        assert_eq!(a.shape(), b.shape());
        assert_eq!(m.content_shape(), (8, 4, 4));
    }

    #[test]
    fn nan_pixel_is_rejected() {
        let m = models(Mode::Dual, 2, 1);
        let mut v = image(1, 32).to_vec().unwrap();
        v[17] = f32::NAN;
        let img = ImageTensor::from_chw(v, 32, 32).unwrap();
        let d0 = crate::domain::one_hot(0, 2).unwrap();
        assert!(matches!(
            m.encode_content(&img, &d0),
            Err(Error::InvalidArgument(_))
        ));
        let wrong = image(1, 16);
        assert!(matches!(
            m.encode_content(&wrong, &d0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn attribute_encoding_contract() {
        let m = models(Mode::Dual, 2, 1);
        let d0 = crate::domain::one_hot(0, 2).unwrap();
        let x = image(4, 32);
        let enc = m
            .encode_attribute_with_noise(&x, &d0, &[0.0; 8])
            .unwrap();
        assert_eq!(enc.mean.dim(), 8);
        assert_eq!(enc.logvar.dim(), 8);
        assert_eq!(enc.sample.to_vec().unwrap(), enc.mean.to_vec().unwrap());
        let s1 = m.encode_attribute(&x, &d0, &mut RngStream::new(5, "eps")).unwrap();
        let s2 = m.encode_attribute(&x, &d0, &mut RngStream::new(5, "eps")).unwrap();
        assert_eq!(s1.sample.to_vec().unwrap(), s2.sample.to_vec().unwrap());
    }

    #[test]
    fn generator_contract() {
        let hp = Hyperparameters::default();
        let m = build_models(&hp, Mode::Dual, &small(), &mut RngStream::new(2, "init")).unwrap();
        let d1 = crate::domain::one_hot(1, 2).unwrap();
        let x = image(1, 64);
        let c = m.encode_content(&x, &d1).unwrap();
        let z = crate::domain::sample_attribute_prior(8, &mut RngStream::new(1, "z")).unwrap();
        let a = m.generate(&c, &z, &d1).unwrap();
        let b = m.generate(&c, &z, &d1).unwrap();
        assert_eq!((a.height(), a.width()), (64, 64));
        let va = a.to_vec().unwrap();
        assert!(va.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(va, b.to_vec().unwrap());
        let short = crate::domain::sample_attribute_prior(3, &mut RngStream::new(1, "z")).unwrap();
        assert!(m.generate(&c, &short, &d1).is_err());
    }

    #[test]
    fn discriminator_heads_follow_mode() {
        let dual = models(Mode::Dual, 2, 1);
        let d0 = crate::domain::one_hot(0, 2).unwrap();
        let s = dual.discriminate_domain(&image(1, 32), &d0).unwrap();
        assert!(s.class_logits.is_none());
        let v: Vec<f32> = s.realism.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));

        let multi = models(Mode::Multi, 4, 1);
        let d3 = crate::domain::one_hot(3, 4).unwrap();
        let s = multi.discriminate_domain(&image(1, 32), &d3).unwrap();
        assert_eq!(s.class_logits.unwrap().len(), 4);
    }

    #[test]
    fn content_discriminator_contract() {
        let a = models(Mode::Dual, 2, 9);
        let b = models(Mode::Dual, 2, 9);
        let d0 = crate::domain::one_hot(0, 2).unwrap();
        let c = a.encode_content(&image(1, 32), &d0).unwrap();
        let la = a.discriminate_content(&c).unwrap();
        assert_eq!(la.len(), 2);
        assert_eq!(la, b.discriminate_content(&c).unwrap());
        let nan = ContentCode::new((c.tensor() * f64::NAN).unwrap()).unwrap();
        assert!(matches!(
            a.discriminate_content(&nan),
            Err(Error::InvalidArgument(_))
        ));
        let multi = models(Mode::Multi, 3, 1);
        let d = crate::domain::one_hot(2, 3).unwrap();
        let c = multi.encode_content(&image(1, 32), &d).unwrap();
        assert_eq!(multi.discriminate_content(&c).unwrap().len(), 3);
    }

    #[test]
    fn multiscale_branch() {
        let hp = Hyperparameters {
            multiscale_enabled: true,
            ..Default::default()
        };
        let m = build_models(&hp, Mode::Dual, &small(), &mut RngStream::new(2, "init")).unwrap();
        let d0 = crate::domain::one_hot(0, 2).unwrap();
        let c = m.encode_content(&image(1, 64), &d0).unwrap();
        let z = crate::domain::sample_attribute_prior(8, &mut RngStream::new(1, "z")).unwrap();
        let (full, low) = m.generate_multiscale(&c, &z, &d0).unwrap();
        assert_eq!((full.height(), full.width()), (64, 64));
        assert_eq!((low.height(), low.width()), (16, 16));
        assert!(low.to_vec().unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(
            full.to_vec().unwrap(),
            m.generate(&c, &z, &d0).unwrap().to_vec().unwrap()
        );
        assert!(!m.dis_low.is_empty());

        let plain = models(Mode::Dual, 2, 1);
        let c = plain.encode_content(&image(1, 32), &d0).unwrap();
        let z = crate::domain::sample_attribute_prior(8, &mut RngStream::new(1, "z")).unwrap();
        assert!(matches!(
            plain.generate_multiscale(&c, &z, &d0),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn multi_mode_code_changes_output() {
        let m = models(Mode::Multi, 3, 4);
        let d0 = crate::domain::one_hot(0, 3).unwrap();
        let d2 = crate::domain::one_hot(2, 3).unwrap();
        let c = m.encode_content(&image(1, 32), &d0).unwrap();
        let z = crate::domain::sample_attribute_prior(8, &mut RngStream::new(1, "z")).unwrap();
        let a = m.generate(&c, &z, &d0).unwrap().to_vec().unwrap();
        let b = m.generate(&c, &z, &d2).unwrap().to_vec().unwrap();
        assert_ne!(a, b);
    }
}
