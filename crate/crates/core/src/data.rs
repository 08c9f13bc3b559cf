//! Synthetic datasets with known factors, folder ingestion and the unpaired
//! sampler.
//!
//! Synthetic images separate geometry from appearance: the content factor is
//! a shape drawn in one cell of a 2x2 grid, the attribute factor is a colour
//! pair and a background texture. Every domain draws its colours from its own
//! hue interval and the intervals do not overlap. Ground-truth factors are
//! written to a `labels.json` sidecar that only the metrics module reads.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::domain::{ImageTensor, Mode};
use crate::imageio;
use crate::rng::RngStream;
use crate::{Error, Result};

/// Shapes in the content factor.
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
/// Grid cells per side for shape placement.
pub const GRID: usize = 2;
pub const NUM_CONTENT_IDS: usize = SHAPES.len() * GRID * GRID;
pub const TEXTURES: [&str; 3] = ["plain", "stripes", "checker"];
/// Attribute ids per domain: texture x background tone x foreground tone.
pub const NUM_ATTRIBUTE_IDS: usize = TEXTURES.len() * 2 * 2;

/// Hue intervals in degrees, one per domain. Domain 0 is warm, domain 1 cool.
pub const PALETTES: [(f32, f32); 8] = [
    (0.0, 40.0),
    (190.0, 230.0),
    (100.0, 140.0),
    (280.0, 320.0),
    (55.0, 85.0),
    (150.0, 175.0),
    (245.0, 265.0),
    (335.0, 355.0),
];

/// Smallest side length at which shapes are rendered recognisably.
pub const MIN_SYNTH_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub k: usize,
    pub n_per_domain: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            k: 2,
            n_per_domain: 100,
            image_size: 64,
            seed: 0,
        }
    }
}

/// Ground truth of one synthetic image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub content_id: usize,
    pub attribute_id: usize,
    pub domain: usize,
}

/// Sidecar contents: relative file path to label.
pub type Labels = BTreeMap<String, Label>;

/// Per-domain image lists. Images carry no labels and no cross-domain index
/// alignment.
#[derive(Clone, Debug)]
pub struct UnpairedDataset {
    domains: Vec<Vec<ImageTensor>>,
    names: Vec<Vec<String>>,
    image_size: usize,
}

impl UnpairedDataset {
    pub fn new(domains: Vec<Vec<ImageTensor>>, names: Vec<Vec<String>>) -> Result<Self> {
        if domains.len() != names.len() || domains.iter().zip(&names).any(|(d, n)| d.len() != n.len()) {
            return Err(Error::invalid("image and name lists disagree"));
        }
        let mut size = None;
        for img in domains.iter().flatten() {
            if img.height() != img.width() {
                return Err(Error::invalid("images must be square"));
            }
            match size {
                None => size = Some(img.height()),
                Some(s) if s != img.height() => {
                    return Err(Error::invalid("images must share one size"))
                }
                _ => {}
            }
        }
        Ok(Self {
            domains,
            names,
            image_size: size.unwrap_or(0),
        })
    }

    pub fn k(&self) -> usize {
        self.domains.len()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn domain(&self, i: usize) -> &[ImageTensor] {
        &self.domains[i]
    }

    /// File names relative to the dataset root, e.g. `domain_0/00003.png`.
    pub fn names(&self, i: usize) -> &[String] {
        &self.names[i]
    }

    pub fn len(&self) -> usize {
        self.domains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Errors unless every domain holds at least one image.
    pub fn require_nonempty(&self) -> Result<()> {
        if self.k() < 2 {
            return Err(Error::invalid(format!("need at least 2 domains, found {}", self.k())));
        }
        if let Some(i) = self.domains.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("domain {i} has no images")));
        }
        Ok(())
    }

    /// Writes `root/domain_{i}/NNNNN.png` for every image.
    pub fn save(&self, root: &Path) -> Result<()> {
        for (imgs, names) in self.domains.iter().zip(&self.names) {
            for (img, name) in imgs.iter().zip(names) {
                imageio::save_png(&root.join(name), img)?;
            }
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f32| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Hue in degrees of an RGB pixel, `None` for greys.
pub fn hue_of(p: [u8; 3]) -> Option<f32> {
    let [r, g, b] = p.map(|c| c as f32 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d < 1e-6 {
        return None;
    }
    let h = if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    Some(h)
}

fn inside(shape: usize, px: f32, py: f32, cx: f32, cy: f32, r: f32) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        _ => {
            // Upward triangle with apex at (cx, cy - r) and base at cy + r.
            let t = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
    }
}

/// Renders one image from its factors. `rng` supplies position/size jitter
/// and the exact tones inside the palette.
fn render(size: usize, domain: usize, content_id: usize, attribute_id: usize, rng: &mut RngStream) -> RgbImage {
    let shape = content_id / (GRID * GRID);
    let cell = content_id % (GRID * GRID);
    let texture = attribute_id / 4;
    let bg_tone = (attribute_id / 2) % 2;
    let fg_tone = attribute_id % 2;

    let (lo, hi) = PALETTES[domain];
    let quarter = (hi - lo) / 4.0;
    // Background tones use the lower half of the interval, foreground the upper.
    let bg_hue = lo + quarter * (bg_tone as f32 + rng.uniform() as f32 * 0.9);
    let fg_hue = lo + quarter * (2.0 + fg_tone as f32 + rng.uniform() as f32 * 0.9);

    let s = size as f32;
    let cell_w = s / GRID as f32;
    let jitter = s / 32.0;
    let cx = cell_w * ((cell % GRID) as f32 + 0.5) + (rng.uniform() as f32 * 2.0 - 1.0) * jitter;
    let cy = cell_w * ((cell / GRID) as f32 + 0.5) + (rng.uniform() as f32 * 2.0 - 1.0) * jitter;
    let r = cell_w * (0.32 + 0.06 * rng.uniform() as f32);

    let period = (size / 8).max(2);
    let fg = hsv_to_rgb(fg_hue, 0.85, 0.95);
    let bg_a = hsv_to_rgb(bg_hue, 0.7, 0.5);
    let bg_b = hsv_to_rgb(bg_hue, 0.7, 0.32);
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        if inside(shape, px, py, cx, cy, r) {
            return Rgb(fg);
        }
        let (bx, by) = (x as usize / period, y as usize / period);
        let alt = match texture {
            0 => false,
            1 => by % 2 == 1,
            _ => (bx + by) % 2 == 1,
        };
        Rgb(if alt { bg_b } else { bg_a })
    })
}

fn check_spec(spec: &SynthSpec) -> Result<()> {
    if spec.image_size < MIN_SYNTH_SIZE {
        return Err(Error::invalid(format!(
            "image_size {} is too small to render shapes (minimum {MIN_SYNTH_SIZE})",
            spec.image_size
        )));
    }
    if spec.k < 2 || spec.k > PALETTES.len() {
        return Err(Error::invalid(format!(
            "k must be between 2 and {}, got {}",
            PALETTES.len(),
            spec.k
        )));
    }
    if spec.n_per_domain == 0 {
        return Err(Error::invalid("n_per_domain must be >= 1"));
    }
    Ok(())
}

pub fn file_name(domain: usize, index: usize) -> String {
    format!("domain_{domain}/{index:05}.png")
}

/// Renders the synthetic set in memory, returning images and their labels.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(UnpairedDataset, Labels)> {
    check_spec(spec)?;
    let mut labels = Labels::new();
    let mut domains = Vec::with_capacity(spec.k);
    let mut names = Vec::with_capacity(spec.k);
    for d in 0..spec.k {
        let mut rng = RngStream::new(spec.seed, format!("synth/domain_{d}"));
        let mut imgs = Vec::with_capacity(spec.n_per_domain);
        let mut ns = Vec::with_capacity(spec.n_per_domain);
        for i in 0..spec.n_per_domain {
            let content_id = rng.index(NUM_CONTENT_IDS);
            let attribute_id = rng.index(NUM_ATTRIBUTE_IDS);
            let img = render(spec.image_size, d, content_id, attribute_id, &mut rng);
            imgs.push(imageio::from_rgb8(&img)?);
            let name = file_name(d, i);
            labels.insert(
                name.clone(),
                Label {
                    content_id,
                    attribute_id,
                    domain: d,
                },
            );
            ns.push(name);
        }
        domains.push(imgs);
        names.push(ns);
    }
    Ok((UnpairedDataset::new(domains, names)?, labels))
}

/// Renders the synthetic set to `root` with a `labels.json` sidecar.
pub fn write_synthetic(spec: &SynthSpec, root: &Path) -> Result<(UnpairedDataset, Labels)> {
    let (ds, labels) = generate_synthetic(spec)?;
    ds.save(root)?;
    write_labels(&root.join("labels.json"), &labels)?;
    Ok((ds, labels))
}

pub fn write_labels(path: &Path, labels: &Labels) -> Result<()> {
    let json = serde_json::to_string_pretty(labels)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Labels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Labels for every image of `ds`, in domain-major order. Errors if any
/// image has no entry.
pub fn labels_for(ds: &UnpairedDataset, labels: &Labels) -> Result<Vec<Label>> {
    let mut out = Vec::with_capacity(ds.len());
    for d in 0..ds.k() {
        for name in ds.names(d) {
            let l = labels
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no label for `{name}`")))?;
            out.push(*l);
        }
    }
    Ok(out)
}

/// Two domains with two images each; the two images of a domain differ in
/// content id.
pub fn make_overfit_fixture(image_size: usize) -> Result<UnpairedDataset> {
    check_spec(&SynthSpec {
        k: 2,
        n_per_domain: 2,
        image_size,
        seed: 0,
    })?;
    let picks = [[(0, 0), (7, 5)], [(4, 2), (11, 9)]];
    let mut domains = Vec::new();
    let mut names = Vec::new();
    for (d, pair) in picks.iter().enumerate() {
        let mut rng = RngStream::new(0, format!("fixture/domain_{d}"));
        let mut imgs = Vec::new();
        let mut ns = Vec::new();
        for (i, &(c, a)) in pair.iter().enumerate() {
            imgs.push(imageio::from_rgb8(&render(image_size, d, c, a, &mut rng))?);
            ns.push(file_name(d, i));
        }
        domains.push(imgs);
        names.push(ns);
    }
    UnpairedDataset::new(domains, names)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if p.is_file() && is_png {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Domain sub-directories of `root`: `domain_0..`, or `trainA`/`trainB`.
pub fn domain_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !root.is_dir() {
        return Err(Error::Data {
            path: root.to_path_buf(),
            reason: "dataset root is not a directory".into(),
        });
    }
    let mut dirs = Vec::new();
    while root.join(format!("domain_{}", dirs.len())).is_dir() {
        let name = format!("domain_{}", dirs.len());
        dirs.push((name.clone(), root.join(name)));
    }
    if dirs.is_empty() && root.join("trainA").is_dir() && root.join("trainB").is_dir() {
        dirs = ["trainA", "trainB"]
            .iter()
            .map(|n| (n.to_string(), root.join(n)))
            .collect();
    }
    if dirs.len() < 2 {
        return Err(Error::Data {
            path: root.to_path_buf(),
            reason: format!(
                "expected domain_0 .. domain_{{k-1}} (k >= 2) or trainA/trainB, found {} domain directories",
                dirs.len()
            ),
        });
    }
    Ok(dirs)
}

/// Loads every PNG under the domain directories, resized to `image_size`.
pub fn load_image_folder(root: &Path, image_size: usize) -> Result<UnpairedDataset> {
    if image_size == 0 {
        return Err(Error::invalid("image_size must be positive"));
    }
    let mut domains = Vec::new();
    let mut names = Vec::new();
    for (dname, dir) in domain_dirs(root)? {
        let mut imgs = Vec::new();
        let mut ns = Vec::new();
        for p in list_pngs(&dir)? {
            imgs.push(imageio::load_png(&p, Some(image_size))?);
            let file = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            ns.push(format!("{dname}/{file}"));
        }
        domains.push(imgs);
        names.push(ns);
    }
    UnpairedDataset::new(domains, names)
}

/// One unpaired draw.
#[derive(Clone, Debug)]
pub struct UnpairedSample {
    pub x: ImageTensor,
    pub dx: usize,
    pub y: ImageTensor,
    pub dy: usize,
}

/// Draws a domain pair and one image from each domain independently.
///
/// Dual mode always yields `(0, 1)`; multi mode draws `dx` uniformly and `dy`
/// uniformly among the remaining domains. With `crop` set, a random
/// `crop x crop` window is cut from each image.
pub fn sample_unpaired(
    ds: &UnpairedDataset,
    mode: Mode,
    rng: &mut RngStream,
    crop: Option<usize>,
) -> Result<UnpairedSample> {
    ds.require_nonempty()?;
    let (dx, dy) = match mode {
        Mode::Dual => {
            if ds.k() != 2 {
                return Err(Error::invalid("dual mode needs exactly 2 domains"));
            }
            (0, 1)
        }
        Mode::Multi => {
            let dx = rng.index(ds.k());
            let mut dy = rng.index(ds.k() - 1);
            if dy >= dx {
                dy += 1;
            }
            (dx, dy)
        }
    };
    let mut pick = |d: usize| -> Result<ImageTensor> {
        let imgs = ds.domain(d);
        let img = &imgs[rng.index(imgs.len())];
        match crop {
            None => Ok(img.clone()),
            Some(c) => random_crop(img, c, rng),
        }
    };
    let x = pick(dx)?;
    let y = pick(dy)?;
    Ok(UnpairedSample { x, dx, y, dy })
}

pub fn random_crop(img: &ImageTensor, size: usize, rng: &mut RngStream) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    if size > h || size > w {
        return Err(Error::invalid(format!("crop {size} exceeds image {h}x{w}")));
    }
    let top = rng.index(h - size + 1);
    let left = rng.index(w - size + 1);
    ImageTensor::new(img.tensor().narrow(1, top, size)?.narrow(2, left, size)?.contiguous()?)
}

/// Stacks images into a `(B, 3, H, W)` batch.
pub fn stack(images: &[&ImageTensor]) -> Result<Tensor> {
    let ts: Vec<&Tensor> = images.iter().map(|i| i.tensor()).collect();
    Ok(Tensor::stack(&ts, 0)?)
}
