//! Multi-domain segmentation data: a procedural generator that renders one
//! shared anatomy under per-domain appearance transforms, plus reading and
//! writing datasets in the on-disk layout
//! `<root>/domain_<id>/{train,test}/<case_id>_img.png` / `<case_id>_mask.png`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use cddsa_autograd::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CddsaError, Result};

/// Number of classes rendered by the generator: background, outer, inner.
pub const GENERATED_CLASSES: usize = 3;

/// Region intensities of the un-styled render.
const BASE_BACKGROUND: f64 = 0.2;
const BASE_HALO: f64 = 0.35;
const BASE_OUTER: f64 = 0.6;
const BASE_INNER: f64 = 0.88;

/// Appearance of one synthetic domain. The pipeline is applied in the fixed
/// order gamma → tint → blur → noise → background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyleSpec {
    pub domain_id: usize,
    pub intensity_gamma: f64,
    pub channel_tint: [f64; 3],
    pub noise_sigma: f64,
    /// Gaussian blur sigma in pixels.
    pub blur_radius: f64,
    /// Background pixels are lifted towards white: `v + level * (1 - v)`.
    pub background_level: f64,
}

impl DomainStyleSpec {
    /// Spec that leaves the base render untouched.
    pub fn identity(domain_id: usize) -> Self {
        DomainStyleSpec {
            domain_id,
            intensity_gamma: 1.0,
            channel_tint: [1.0; 3],
            noise_sigma: 0.0,
            blur_radius: 0.0,
            background_level: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(CddsaError::Validation(format!("domain {}: {what}", self.domain_id)));
        if !(self.intensity_gamma.is_finite() && self.intensity_gamma > 0.0) {
            return bad("intensity_gamma must be positive");
        }
        if self.channel_tint.iter().any(|t| !(0.5..=1.5).contains(t)) {
            return bad("channel_tint entries must lie in [0.5, 1.5]");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if !(self.blur_radius.is_finite() && self.blur_radius >= 0.0) {
            return bad("blur_radius must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.background_level) {
            return bad("background_level must lie in [0, 1]");
        }
        Ok(())
    }

    fn same_style(&self, other: &Self) -> bool {
        self.intensity_gamma == other.intensity_gamma
            && self.channel_tint == other.channel_tint
            && self.noise_sigma == other.noise_sigma
            && self.blur_radius == other.blur_radius
            && self.background_level == other.background_level
    }
}

/// Four appearance profiles loosely modelled on scanner differences: colour
/// cast, contrast curve, acquisition noise, focus, and illumination haze.
pub fn default_domain_specs() -> Vec<DomainStyleSpec> {
    vec![
        DomainStyleSpec {
            domain_id: 0,
            intensity_gamma: 1.0,
            channel_tint: [1.3, 0.9, 0.6],
            noise_sigma: 0.02,
            blur_radius: 0.5,
            background_level: 0.0,
        },
        DomainStyleSpec {
            domain_id: 1,
            intensity_gamma: 0.6,
            channel_tint: [0.8, 1.0, 1.2],
            noise_sigma: 0.05,
            blur_radius: 1.0,
            background_level: 0.3,
        },
        DomainStyleSpec {
            domain_id: 2,
            intensity_gamma: 1.8,
            channel_tint: [1.1, 1.1, 1.1],
            noise_sigma: 0.01,
            blur_radius: 0.0,
            background_level: 0.6,
        },
        DomainStyleSpec {
            domain_id: 3,
            intensity_gamma: 1.3,
            channel_tint: [0.6, 1.4, 0.9],
            noise_sigma: 0.08,
            blur_radius: 1.5,
            background_level: 0.1,
        },
    ]
}

/// `H×W` label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(CddsaError::Shape(format!("label map {height}x{width} with {} labels", labels.len())));
        }
        Ok(LabelMap { height, width, labels })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Binary mask of pixels equal to `class`.
    pub fn binary(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One image with its label map. `image` is `(C, H, W)` with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub mask: LabelMap,
    pub domain_id: usize,
    pub case_id: String,
    pub split: Split,
}

impl<T: Scalar> Sample<T> {
    pub fn channels(&self) -> usize {
        self.image.dim(0)
    }

    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            image: self.image.cast(),
            mask: self.mask.clone(),
            domain_id: self.domain_id,
            case_id: self.case_id.clone(),
            split: self.split,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiDomainDataset<T> {
    pub samples: Vec<Sample<T>>,
    pub num_domains: usize,
    pub num_classes: usize,
}

impl<T: Scalar> MultiDomainDataset<T> {
    pub fn new(samples: Vec<Sample<T>>, num_domains: usize, num_classes: usize) -> Result<Self> {
        let ds = MultiDomainDataset { samples, num_domains, num_classes };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 1 {
            return Err(CddsaError::Validation("dataset needs at least one domain".into()));
        }
        if self.num_classes < 2 {
            return Err(CddsaError::Validation("dataset needs at least two classes".into()));
        }
        for s in &self.samples {
            if s.domain_id >= self.num_domains {
                return Err(CddsaError::Validation(format!("{}: domain {} >= {}", s.case_id, s.domain_id, self.num_domains)));
            }
            let (h, w) = (s.image.dim(1), s.image.dim(2));
            if s.image.rank() != 3 || h != s.mask.height || w != s.mask.width {
                return Err(CddsaError::Validation(format!("{}: image/mask size mismatch", s.case_id)));
            }
            if s.mask.max_label() as usize >= self.num_classes {
                return Err(CddsaError::Validation(format!("{}: label >= {}", s.case_id, self.num_classes)));
            }
        }
        Ok(())
    }

    /// Indices of samples in `domain` and `split`, in dataset order.
    pub fn indices(&self, domain: usize, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.domain_id == domain && s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// Every domain has train and test data (needed for leave-one-domain-out).
    pub fn check_lodo_ready(&self) -> Result<()> {
        for d in 0..self.num_domains {
            for split in [Split::Train, Split::Test] {
                if self.indices(d, split).is_empty() {
                    return Err(CddsaError::Validation(format!("domain {d} has no {} samples", split.dir_name())));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> MultiDomainDataset<U> {
        MultiDomainDataset {
            samples: self.samples.iter().map(Sample::cast).collect(),
            num_domains: self.num_domains,
            num_classes: self.num_classes,
        }
    }
}

/// Random anatomy: an optional unlabelled halo, the outer structure, and an
/// inner structure nested inside it, all in normalised coordinates.
#[derive(Clone, Debug)]
struct Anatomy {
    halo: Option<Ellipse>,
    outer: Ellipse,
    inner: Ellipse,
    shade_center: (f64, f64),
    shade_strength: f64,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.ax;
        let v = (-s * dx + c * dy) / self.ay;
        u * u + v * v <= 1.0
    }
}

impl Anatomy {
    fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a7a7_0000_0001);
        let outer = Ellipse {
            cx: rng.random_range(0.35..0.65),
            cy: rng.random_range(0.35..0.65),
            ax: rng.random_range(0.16..0.27),
            ay: rng.random_range(0.16..0.27),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        };
        // inner axes shrink enough that the rotated inner ellipse stays inside
        let frac = rng.random_range(0.35..0.6);
        let room = (1.0 - frac) * outer.ax.min(outer.ay) * 0.5;
        let inner = Ellipse {
            cx: outer.cx + rng.random_range(-room..room),
            cy: outer.cy + rng.random_range(-room..room),
            ax: outer.ax.min(outer.ay) * frac * rng.random_range(0.8..1.0),
            ay: outer.ax.min(outer.ay) * frac * rng.random_range(0.8..1.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        };
        let halo = rng.random_bool(0.5).then(|| Ellipse {
            ax: outer.ax * rng.random_range(1.25..1.5),
            ay: outer.ay * rng.random_range(1.25..1.5),
            ..outer
        });
        Anatomy {
            halo,
            outer,
            inner,
            shade_center: (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
            shade_strength: rng.random_range(0.0..0.2),
        }
    }

    /// Base intensity and label at pixel centre `(x, y)` in `[0, 1]²`.
    fn at(&self, x: f64, y: f64) -> (f64, u8) {
        let (base, label) = if self.inner.contains(x, y) && self.outer.contains(x, y) {
            (BASE_INNER, 2)
        } else if self.outer.contains(x, y) {
            (BASE_OUTER, 1)
        } else if self.halo.is_some_and(|h| h.contains(x, y)) {
            (BASE_HALO, 0)
        } else {
            (BASE_BACKGROUND, 0)
        };
        let (dx, dy) = (x - self.shade_center.0, y - self.shade_center.1);
        let shade = 1.0 - self.shade_strength * (dx * dx + dy * dy).sqrt().min(1.0);
        (base * shade, label)
    }
}

/// Renders the anatomy for `seed` without any style: `(C, H, W)` gray image
/// replicated over channels and its label map.
pub fn render_anatomy(seed: u64, height: usize, width: usize, channels: usize) -> (Vec<f64>, LabelMap) {
    let anatomy = Anatomy::from_seed(seed);
    let mut gray = vec![0.0; height * width];
    let mut labels = vec![0u8; height * width];
    for y in 0..height {
        for x in 0..width {
            let (v, l) = anatomy.at((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64);
            gray[y * width + x] = v;
            labels[y * width + x] = l;
        }
    }
    let mut img = Vec::with_capacity(channels * height * width);
    for _ in 0..channels {
        img.extend_from_slice(&gray);
    }
    (img, LabelMap { height, width, labels })
}

fn gaussian_blur(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * plane[y * w + clampi(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * tmp[clampi(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
}

/// Applies the style pipeline in place on a `(C, H, W)` buffer.
fn apply_style(img: &mut [f64], mask: &LabelMap, channels: usize, spec: &DomainStyleSpec, noise_seed: u64) {
    let (h, w) = (mask.height, mask.width);
    let hw = h * w;
    if spec.intensity_gamma != 1.0 {
        for v in img.iter_mut() {
            *v = v.max(0.0).powf(spec.intensity_gamma);
        }
    }
    for c in 0..channels {
        let t = spec.channel_tint[c % 3];
        if t != 1.0 {
            for v in &mut img[c * hw..(c + 1) * hw] {
                *v = (*v * t).clamp(0.0, 1.0);
            }
        }
    }
    if spec.blur_radius > 0.0 {
        for c in 0..channels {
            gaussian_blur(&mut img[c * hw..(c + 1) * hw], h, w, spec.blur_radius);
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for v in img.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += spec.noise_sigma * n;
        }
    }
    if spec.background_level > 0.0 {
        for c in 0..channels {
            for (i, v) in img[c * hw..(c + 1) * hw].iter_mut().enumerate() {
                if mask.labels[i] == 0 {
                    *v += spec.background_level * (1.0 - *v);
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Renders the anatomy of `anatomy_seed` in the appearance of `spec`.
/// The mask depends on `anatomy_seed` only.
pub fn generate_sample<T: Scalar>(
    spec: &DomainStyleSpec,
    anatomy_seed: u64,
    size: usize,
    channels: usize,
) -> Result<Sample<T>> {
    spec.validate()?;
    if size == 0 || channels == 0 {
        return Err(CddsaError::Validation("image size and channels must be positive".into()));
    }
    let (mut img, mask) = render_anatomy(anatomy_seed, size, size, channels);
    let noise_seed = anatomy_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (spec.domain_id as u64 + 1);
    apply_style(&mut img, &mask, channels, spec, noise_seed);
    Ok(Sample {
        image: Tensor::from_vec(&[channels, size, size], img.into_iter().map(T::of).collect())?,
        mask,
        domain_id: spec.domain_id,
        case_id: format!("seed{anatomy_seed}"),
        split: Split::Train,
    })
}

/// Generator settings; serialised next to generated datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub domains: Vec<DomainStyleSpec>,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            domains: default_domain_specs(),
            train_per_domain: 20,
            test_per_domain: 5,
            image_size: 256,
            channels: 3,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(CddsaError::Config("at least one domain is required".into()));
        }
        let mut ids = BTreeSet::new();
        for d in &self.domains {
            d.validate()?;
            if !ids.insert(d.domain_id) {
                return Err(CddsaError::Validation(format!("duplicate domain_id {}", d.domain_id)));
            }
        }
        if ids.iter().next_back().copied() != Some(self.domains.len() - 1) {
            return Err(CddsaError::Validation("domain ids must be 0..D-1".into()));
        }
        for (i, a) in self.domains.iter().enumerate() {
            for b in &self.domains[i + 1..] {
                if a.same_style(b) {
                    return Err(CddsaError::Validation(format!(
                        "domains {} and {} have identical styles",
                        a.domain_id, b.domain_id
                    )));
                }
            }
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(CddsaError::Config("image_size and channels must be positive".into()));
        }
        Ok(())
    }

    /// Anatomy seed for the `index`-th sample of `domain` in `split`; all seeds
    /// of one configuration are distinct.
    pub fn anatomy_seed(&self, domain: usize, split: Split, index: usize) -> u64 {
        let per_domain = (self.train_per_domain + self.test_per_domain) as u64;
        let offset = match split {
            Split::Train => index as u64,
            Split::Test => self.train_per_domain as u64 + index as u64,
        };
        self.seed.wrapping_mul(1_000_003).wrapping_add(domain as u64 * per_domain + offset)
    }
}

/// Builds the dataset described by `config`. `contrastive` requests the
/// multi-domain check needed by the style contrastive loss.
pub fn build_dataset<T: Scalar>(config: &GeneratorConfig, contrastive: bool) -> Result<MultiDomainDataset<T>> {
    config.validate()?;
    if contrastive && config.domains.len() < 2 {
        return Err(CddsaError::Config("contrastive training needs at least two domains".into()));
    }
    let mut samples = Vec::new();
    for spec in &config.domains {
        for (split, count) in [(Split::Train, config.train_per_domain), (Split::Test, config.test_per_domain)] {
            for i in 0..count {
                let seed = config.anatomy_seed(spec.domain_id, split, i);
                let mut s: Sample<T> = generate_sample(spec, seed, config.image_size, config.channels)?;
                s.case_id = format!("d{}_{}_{:04}", spec.domain_id, split.dir_name(), i);
                s.split = split;
                samples.push(s);
            }
        }
    }
    MultiDomainDataset::new(samples, config.domains.len(), GENERATED_CLASSES)
}

/// Index written as `dataset.toml` at the dataset root.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub num_domains: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub cases: Vec<CaseEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    pub domain_id: usize,
    pub split: Split,
    #[serde(default)]
    pub anatomy_seed: Option<u64>,
}

pub const INDEX_FILE: &str = "dataset.toml";

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `ds` in the directory layout plus `dataset.toml`.
pub fn write_dataset<T: Scalar>(ds: &MultiDomainDataset<T>, root: &Path, generator: Option<&GeneratorConfig>) -> Result<()> {
    let mut cases = Vec::new();
    for s in &ds.samples {
        let dir = root.join(format!("domain_{}", s.domain_id)).join(s.split.dir_name());
        fs::create_dir_all(&dir).map_err(|e| CddsaError::io(&dir, e))?;
        let (c, h, w) = (s.image.dim(0), s.image.dim(1), s.image.dim(2));
        let px = |ch: usize, y: usize, x: usize| to_u8(s.image.data()[(ch * h + y) * w + x].as_f64());
        let img_path = dir.join(format!("{}_img.png", s.case_id));
        let res = if c >= 3 {
            image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb([px(0, y as usize, x as usize), px(1, y as usize, x as usize), px(2, y as usize, x as usize)])
            })
            .save(&img_path)
        } else {
            image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([px(0, y as usize, x as usize)])).save(&img_path)
        };
        res.map_err(|e| CddsaError::ingest(&img_path, e.to_string()))?;
        let mask_path = dir.join(format!("{}_mask.png", s.case_id));
        image::GrayImage::from_raw(w as u32, h as u32, s.mask.labels.clone())
            .expect("mask buffer size")
            .save(&mask_path)
            .map_err(|e| CddsaError::ingest(&mask_path, e.to_string()))?;
        let anatomy_seed = generator.and_then(|g| {
            s.case_id
                .rsplit('_')
                .next()
                .and_then(|i| i.parse::<usize>().ok())
                .map(|i| g.anatomy_seed(s.domain_id, s.split, i))
        });
        cases.push(CaseEntry { case_id: s.case_id.clone(), domain_id: s.domain_id, split: s.split, anatomy_seed });
    }
    let index = DatasetIndex {
        num_domains: ds.num_domains,
        num_classes: ds.num_classes,
        generator: generator.cloned(),
        cases,
    };
    let text = toml::to_string_pretty(&index).map_err(|e| CddsaError::Config(e.to_string()))?;
    let path = root.join(INDEX_FILE);
    fs::write(&path, text).map_err(|e| CddsaError::io(&path, e))
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Clip every image to its 0.1/99.9 intensity percentiles, then rescale to `[0, 1]`.
    pub percentile_normalize: bool,
    /// Class count when the dataset has no `dataset.toml`.
    pub num_classes: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { percentile_normalize: false, num_classes: GENERATED_CLASSES }
    }
}

/// Linear-interpolation percentile of unsorted data, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// Clips to the `[low, high]` percentiles and rescales to `[0, 1]`.
pub fn percentile_normalize(values: &mut [f64], low: f64, high: f64) {
    let lo = percentile(values, low);
    let hi = percentile(values, high);
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (v.clamp(lo, hi) - lo) / span } else { 0.0 };
    }
}

fn list_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| CddsaError::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

/// Reads a PNG as channel-major values in `[0, 1]`: RGB images give three
/// channels, grey images one.
fn read_pixels(file: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let img = image::open(file).map_err(|e| CddsaError::ingest(file, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let mut d = vec![0.0; 3 * h * w];
        for (x, y, p) in rgb.enumerate_pixels() {
            for ch in 0..3 {
                d[(ch * h + y as usize) * w + x as usize] = p.0[ch] as f64 / 255.0;
            }
        }
        Ok((3, h, w, d))
    } else {
        Ok((1, h, w, img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()))
    }
}

/// Reads one image as a `(C, H, W)` tensor.
pub fn read_image<T: Scalar>(file: &Path) -> Result<Tensor<T>> {
    let (c, h, w, data) = read_pixels(file)?;
    Ok(Tensor::from_vec(&[c, h, w], data.into_iter().map(T::of).collect())?)
}

/// Reads a dataset in the documented layout.
pub fn load_dataset<T: Scalar>(root: &Path, options: &LoadOptions) -> Result<MultiDomainDataset<T>> {
    if !root.is_dir() {
        return Err(CddsaError::ingest(root, "dataset directory does not exist"));
    }
    let index_path = root.join(INDEX_FILE);
    let index: Option<DatasetIndex> = if index_path.exists() {
        let text = fs::read_to_string(&index_path).map_err(|e| CddsaError::io(&index_path, e))?;
        Some(toml::from_str(&text).map_err(|e| CddsaError::ingest(&index_path, e.to_string()))?)
    } else {
        None
    };
    let num_classes = index.as_ref().map_or(options.num_classes, |i| i.num_classes);
    let mut samples = Vec::new();
    let mut max_domain = None;
    let mut channels = None;
    for dir in list_dir(root)? {
        let Some(name) = dir.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(id) = name.strip_prefix("domain_") else { continue };
        let domain_id: usize = id.parse().map_err(|_| CddsaError::ingest(&dir, "domain directory id is not an integer"))?;
        max_domain = max_domain.max(Some(domain_id));
        for split in [Split::Train, Split::Test] {
            let split_dir = dir.join(split.dir_name());
            if !split_dir.is_dir() {
                continue;
            }
            for file in list_dir(&split_dir)? {
                let Some(fname) = file.file_name().and_then(|n| n.to_str()) else { continue };
                let Some(case_id) = fname.strip_suffix("_img.png") else { continue };
                let mask_path = split_dir.join(format!("{case_id}_mask.png"));
                if !mask_path.exists() {
                    return Err(CddsaError::ingest(&mask_path, format!("missing mask for {}", file.display())));
                }
                let (c, h, w, mut data) = read_pixels(&file)?;
                if *channels.get_or_insert(c) != c {
                    return Err(CddsaError::ingest(&file, "channel count differs from the rest of the dataset"));
                }
                let mask_img = image::open(&mask_path).map_err(|e| CddsaError::ingest(&mask_path, e.to_string()))?;
                if mask_img.width() as usize != w || mask_img.height() as usize != h {
                    return Err(CddsaError::ingest(&mask_path, format!("mask size differs from image {}", file.display())));
                }
                let labels = mask_img.to_luma8().into_raw();
                if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
                    return Err(CddsaError::ingest(&mask_path, format!("unknown label value {bad} (num_classes {num_classes})")));
                }
                if options.percentile_normalize {
                    percentile_normalize(&mut data, 0.1, 99.9);
                }
                samples.push(Sample {
                    image: Tensor::from_vec(&[c, h, w], data.into_iter().map(T::of).collect())?,
                    mask: LabelMap::new(h, w, labels)?,
                    domain_id,
                    case_id: case_id.to_string(),
                    split,
                });
            }
        }
    }
    let num_domains = match (index.as_ref(), max_domain) {
        (Some(i), _) => i.num_domains,
        (None, Some(m)) => m + 1,
        (None, None) => return Err(CddsaError::ingest(root, "no domain_<id> directories found")),
    };
    if samples.is_empty() {
        return Err(CddsaError::ingest(root, "no images found"));
    }
    MultiDomainDataset::new(samples, num_domains, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_ignore_style() {
        let specs = default_domain_specs();
        let a: Sample<f64> = generate_sample(&specs[0], 17, 48, 3).unwrap();
        let b: Sample<f64> = generate_sample(&specs[2], 17, 48, 3).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn identity_spec_is_plain_render() {
        let s: Sample<f64> = generate_sample(&DomainStyleSpec::identity(0), 5, 32, 3).unwrap();
        let (raw, mask) = render_anatomy(5, 32, 32, 3);
        assert_eq!(s.image.data(), raw.as_slice());
        assert_eq!(s.mask, mask);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = &default_domain_specs()[3];
        let a: Sample<f32> = generate_sample(spec, 99, 32, 3).unwrap();
        let b: Sample<f32> = generate_sample(spec, 99, 32, 3).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn all_three_classes_present() {
        for seed in 0..20 {
            let (_, mask) = render_anatomy(seed, 64, 64, 1);
            for class in 0..3u8 {
                assert!(mask.labels.contains(&class), "seed {seed} lacks class {class}");
            }
        }
    }

    #[test]
    fn invalid_spec_fields_rejected() {
        let mut s = DomainStyleSpec::identity(0);
        s.channel_tint[1] = 1.7;
        assert!(generate_sample::<f64>(&s, 0, 16, 3).is_err());
        let mut s = DomainStyleSpec::identity(0);
        s.intensity_gamma = 0.0;
        assert!(s.validate().is_err());
        let mut s = DomainStyleSpec::identity(0);
        s.background_level = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn dataset_counts_and_split_hygiene() {
        let cfg = GeneratorConfig { image_size: 16, ..GeneratorConfig::default() };
        let ds: MultiDomainDataset<f32> = build_dataset(&cfg, true).unwrap();
        assert_eq!(ds.count(Split::Train), 80);
        assert_eq!(ds.count(Split::Test), 20);
        assert_eq!(ds.num_domains, 4);
        let seeds = |split| -> BTreeSet<u64> {
            (0..4)
                .flat_map(|d| {
                    let n = if split == Split::Train { cfg.train_per_domain } else { cfg.test_per_domain };
                    (0..n).map(move |i| (d, i))
                })
                .map(|(d, i)| cfg.anatomy_seed(d, split, i))
                .collect()
        };
        let (train, test) = (seeds(Split::Train), seeds(Split::Test));
        assert_eq!(train.len(), 80);
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn duplicate_domain_rejected() {
        let mut cfg = GeneratorConfig { image_size: 16, ..GeneratorConfig::default() };
        cfg.domains[1].domain_id = 0;
        assert!(matches!(build_dataset::<f32>(&cfg, false), Err(CddsaError::Validation(_))));
    }

    #[test]
    fn single_domain_contrastive_rejected() {
        let cfg = GeneratorConfig { image_size: 16, domains: vec![DomainStyleSpec::identity(0)], ..GeneratorConfig::default() };
        assert!(matches!(build_dataset::<f32>(&cfg, true), Err(CddsaError::Config(_))));
        assert!(build_dataset::<f32>(&cfg, false).is_ok());
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert!((percentile(&v, 50.0) - 2.5).abs() < 1e-12);
        assert!((percentile(&v, 10.0) - 1.3).abs() < 1e-12);
    }
}
