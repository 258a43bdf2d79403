//! Networks of the disentanglement model and their value-level entry points.

mod activation;
mod networks;

use cddsa_autograd::{Binder, Mode, ParamStore, Scalar, Tape, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use activation::{anatomy_activation, one_hot_argmax, ActivationKind};
pub use networks::{AnatomyEncoder, Decoder, Segmentor, Srm, StyleEncoder};

use crate::error::{CddsaError, Result};
use networks::batch_of_one;

/// Log-variance is clamped so that the variance stays in `[1e-6, 1e6]`.
pub const LOGVAR_MIN: f64 = -13.815_510_557_964_274;
pub const LOGVAR_MAX: f64 = 13.815_510_557_964_274;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Image channels (input of both encoders, output of the decoder).
    pub in_channels: usize,
    /// Channels `T` of the anatomical representation.
    pub anatomy_channels: usize,
    /// Length `Z` of the style code.
    pub style_dim: usize,
    /// U-Net widths at the five resolution scales.
    pub unet_channels: Vec<usize>,
    /// Widths of the stride-2 blocks of the style encoder.
    pub style_channels: Vec<usize>,
    /// Widths of the three AdaIN-modulated decoder blocks.
    pub decoder_channels: Vec<usize>,
    pub segmentor_hidden: usize,
    /// SRM hidden width; `None` means `max(Z, C'/2)`.
    pub srm_hidden: Option<usize>,
    pub num_classes: usize,
    pub leaky_slope: f64,
    pub activation: ActivationKind,
    pub gumbel_temperature: f64,
    pub adain_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            anatomy_channels: 8,
            style_dim: 16,
            unet_channels: vec![16, 32, 64, 128, 256],
            style_channels: vec![16, 32, 64, 128],
            decoder_channels: vec![32, 32, 32],
            segmentor_hidden: 16,
            srm_hidden: None,
            num_classes: 3,
            leaky_slope: 0.2,
            activation: ActivationKind::Tanh,
            gumbel_temperature: 0.5,
            adain_eps: 1e-8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[usize]| !v.is_empty() && v.iter().all(|&c| c > 0);
        if self.unet_channels.len() != 5 || !positive(&self.unet_channels) {
            return Err(CddsaError::Config("unet_channels needs five positive widths".into()));
        }
        if !positive(&self.style_channels) {
            return Err(CddsaError::Config("style_channels needs positive widths".into()));
        }
        if self.decoder_channels.len() != 3 || !positive(&self.decoder_channels) {
            return Err(CddsaError::Config("decoder_channels needs three positive widths".into()));
        }
        if self.in_channels == 0 || self.anatomy_channels == 0 || self.style_dim == 0 || self.segmentor_hidden == 0 {
            return Err(CddsaError::Config("channel counts must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(CddsaError::Config("num_classes must be at least 2".into()));
        }
        if !(self.gumbel_temperature > 0.0) {
            return Err(CddsaError::Config("gumbel_temperature must be positive".into()));
        }
        if self.anatomy_channels < self.num_classes {
            log::warn!("anatomy_channels {} < num_classes {}", self.anatomy_channels, self.num_classes);
        }
        Ok(())
    }

    pub fn srm_hidden(&self, channels: usize) -> usize {
        self.srm_hidden.unwrap_or_else(|| self.style_dim.max(channels / 2))
    }

    /// Spatial dims must survive four 2× poolings.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = match shape {
            [c, h, w] | [_, c, h, w] => (*c, *h, *w),
            _ => return Err(CddsaError::Shape(format!("expected (C,H,W) or (N,C,H,W), got {shape:?}"))),
        };
        if c != self.in_channels {
            return Err(CddsaError::Shape(format!("expected {} channels, got {c}", self.in_channels)));
        }
        let div = 1 << (self.unet_channels.len() - 1);
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(CddsaError::Shape(format!("spatial dims {h}x{w} must be divisible by {div}")));
        }
        Ok(())
    }
}

/// Anatomy tensor `(T, H, W)` of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnatomicalRepresentation<T> {
    pub tensor: Tensor<T>,
    pub kind: ActivationKind,
}

/// Diagonal Gaussian over style codes.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleDistribution<T> {
    pub mean: Vec<T>,
    pub variance: Vec<T>,
}

impl<T: Scalar> StyleDistribution<T> {
    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.variance.len() {
            return Err(CddsaError::Shape("mean and variance lengths differ".into()));
        }
        if self.variance.iter().any(|v| !(*v > T::zero()) || !v.is_finite()) {
            return Err(CddsaError::Validation("style variance must be positive and finite".into()));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(CddsaError::Validation("style mean must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleProvenance {
    Sampled,
    Mean,
    AugmentedLinear,
    AugmentedGaussian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode<T> {
    pub z: Vec<T>,
    pub provenance: StyleProvenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Reparameterized,
    Mean,
}

/// `z = u + sqrt(v) * eps` with `eps ~ N(0, I)`, or `z = u`.
pub fn sample_style<T: Scalar, R: Rng + ?Sized>(dist: &StyleDistribution<T>, mode: SampleMode, rng: &mut R) -> Result<StyleCode<T>> {
    dist.validate()?;
    match mode {
        SampleMode::Mean => Ok(StyleCode { z: dist.mean.clone(), provenance: StyleProvenance::Mean }),
        SampleMode::Reparameterized => {
            let eps: Vec<T> = (0..dist.mean.len()).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
            reparameterize(dist, &eps)
        }
    }
}

/// Reparameterisation with an explicit noise vector.
pub fn reparameterize<T: Scalar>(dist: &StyleDistribution<T>, eps: &[T]) -> Result<StyleCode<T>> {
    dist.validate()?;
    if eps.len() != dist.mean.len() {
        return Err(CddsaError::Shape("noise length differs from style dimension".into()));
    }
    let z = dist.mean.iter().zip(&dist.variance).zip(eps).map(|((&u, &v), &e)| u + v.sqrt() * e).collect();
    Ok(StyleCode { z, provenance: StyleProvenance::Sampled })
}

/// AdaIN on a single `(C, H, W)` feature map: every channel is whitened with
/// its population mean and std, `(F - μ) / (σ + eps)`, then scaled and shifted.
pub fn adain<T: Scalar>(feature: &Tensor<T>, scale: &[T], bias: &[T], eps: f64) -> Result<Tensor<T>> {
    if feature.rank() != 3 || scale.len() != feature.dim(0) || bias.len() != feature.dim(0) {
        return Err(CddsaError::Shape(format!(
            "adain feature {:?} with {} scales and {} biases",
            feature.shape(),
            scale.len(),
            bias.len()
        )));
    }
    let c = feature.dim(0);
    let tape = Tape::new();
    let x = tape.constant(batch_of_one(feature)?);
    let g = tape.constant(Tensor::from_vec(&[1, c], scale.to_vec())?);
    let b = tape.constant(Tensor::from_vec(&[1, c], bias.to_vec())?);
    let y = x.adain(g, b, T::of(eps))?;
    Ok((*y.value()).clone().reshape(feature.shape())?)
}

/// The disentanglement model: parameters plus the four network layouts.
#[derive(Clone, Debug)]
pub struct CddsaNet<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub anatomy: AnatomyEncoder,
    pub style: StyleEncoder,
    pub decoder: Decoder,
    pub segmentor: Segmentor,
}

impl<T: Scalar> CddsaNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let anatomy = AnatomyEncoder::new(&mut store, &config, &mut rng);
        let style = StyleEncoder::new(&mut store, &config, &mut rng);
        let decoder = Decoder::new(&mut store, &config, &mut rng);
        let segmentor = Segmentor::new(&mut store, &config, &mut rng);
        Ok(CddsaNet { config, store, anatomy, style, decoder, segmentor })
    }

    /// Same layout with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> CddsaNet<U> {
        CddsaNet {
            config: self.config.clone(),
            store: self.store.cast(),
            anatomy: self.anatomy.clone(),
            style: self.style.clone(),
            decoder: self.decoder.clone(),
            segmentor: self.segmentor.clone(),
        }
    }

    fn eval_binder<'t>(&'t self, tape: &'t Tape<T>) -> Binder<'t, T> {
        Binder::new(tape, &self.store, Mode::Eval).frozen()
    }

    fn as_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.config.check_input(images.shape())?;
        if images.rank() == 3 {
            batch_of_one(images)
        } else {
            Ok(images.clone())
        }
    }

    /// Anatomy of one `(C, H, W)` image (inference mode, noiseless activation).
    pub fn encode_anatomy(&self, image: &Tensor<T>) -> Result<AnatomicalRepresentation<T>> {
        if image.rank() != 3 {
            return Err(CddsaError::Shape("encode_anatomy expects a single (C,H,W) image".into()));
        }
        let tape = Tape::new();
        let b = self.eval_binder(&tape);
        let x = tape.constant(self.as_batch(image)?);
        let f = self.anatomy.forward(&b, x, &self.config, None)?;
        let v = (*f.value()).clone();
        let shape = v.shape()[1..].to_vec();
        Ok(AnatomicalRepresentation { tensor: v.reshape(&shape)?, kind: self.config.activation })
    }

    pub fn encode_style(&self, image: &Tensor<T>) -> Result<StyleDistribution<T>> {
        if image.rank() != 3 {
            return Err(CddsaError::Shape("encode_style expects a single (C,H,W) image".into()));
        }
        let tape = Tape::new();
        let b = self.eval_binder(&tape);
        let x = tape.constant(self.as_batch(image)?);
        let (mean, logvar) = self.style.forward(&b, x, &self.config)?;
        let variance = logvar
            .value()
            .data()
            .iter()
            .map(|&l| l.max(T::of(LOGVAR_MIN)).min(T::of(LOGVAR_MAX)).exp())
            .collect();
        Ok(StyleDistribution { mean: mean.value().data().to_vec(), variance })
    }

    /// AdaIN scale and bias predicted by SRM `block` for `style`.
    pub fn srm_params(&self, style: &StyleCode<T>, block: usize) -> Result<(Vec<T>, Vec<T>)> {
        let srm = self.decoder.srm(block)?;
        self.check_style(style)?;
        let tape = Tape::new();
        let b = self.eval_binder(&tape);
        let z = tape.constant(Tensor::from_vec(&[1, style.z.len()], style.z.clone())?);
        let (g, bias) = srm.forward(&b, z)?;
        Ok((g.value().data().to_vec(), bias.value().data().to_vec()))
    }

    fn check_style(&self, style: &StyleCode<T>) -> Result<()> {
        if style.z.len() != self.config.style_dim {
            return Err(CddsaError::Shape(format!("style code length {} != {}", style.z.len(), self.config.style_dim)));
        }
        if style.z.iter().any(|v| !v.is_finite()) {
            return Err(CddsaError::Validation("style code must be finite".into()));
        }
        Ok(())
    }

    fn check_anatomy(&self, anatomy: &AnatomicalRepresentation<T>) -> Result<()> {
        let s = anatomy.tensor.shape();
        if s.len() != 3 || s[0] != self.config.anatomy_channels {
            return Err(CddsaError::Shape(format!("anatomy shape {s:?} needs ({}, H, W)", self.config.anatomy_channels)));
        }
        Ok(())
    }

    /// Reconstructs a `(Co, H, W)` image from a style code and an anatomy.
    pub fn decode(&self, style: &StyleCode<T>, anatomy: &AnatomicalRepresentation<T>) -> Result<Tensor<T>> {
        self.check_style(style)?;
        self.check_anatomy(anatomy)?;
        let tape = Tape::new();
        let b = self.eval_binder(&tape);
        let z = tape.constant(Tensor::from_vec(&[1, style.z.len()], style.z.clone())?);
        let f = tape.constant(batch_of_one(&anatomy.tensor)?);
        let img = self.decoder.forward(&b, z, f, &self.config)?;
        let v = (*img.value()).clone();
        let shape = v.shape()[1..].to_vec();
        Ok(v.reshape(&shape)?)
    }

    /// Class probabilities `(K, H, W)`; the segmentor only sees the anatomy.
    pub fn segment(&self, anatomy: &AnatomicalRepresentation<T>) -> Result<Tensor<T>> {
        self.check_anatomy(anatomy)?;
        let tape = Tape::new();
        let b = self.eval_binder(&tape);
        let f = tape.constant(batch_of_one(&anatomy.tensor)?);
        let p = self.segmentor.forward(&b, f, &self.config)?;
        let v = (*p.value()).clone();
        let shape = v.shape()[1..].to_vec();
        Ok(v.reshape(&shape)?)
    }

    /// Probabilities for a batch `(N, C, H, W)` in inference mode.
    pub fn predict_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = self.eval_binder(&tape);
        let x = tape.constant(self.as_batch(images)?);
        let f = self.anatomy.forward(&b, x, &self.config, None)?;
        Ok((*self.segmentor.forward(&b, f, &self.config)?.value()).clone())
    }

    /// Reconstruction of one image with its own mean style code.
    pub fn reconstruct(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let anatomy = self.encode_anatomy(image)?;
        let dist = self.encode_style(image)?;
        let style = StyleCode { z: dist.mean, provenance: StyleProvenance::Mean };
        self.decode(&style, &anatomy)
    }

    /// Draws a fresh style for sampling-based generation.
    pub fn random_style<R: RngCore + ?Sized>(&self, rng: &mut R) -> StyleCode<T> {
        let z = (0..self.config.style_dim).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
        StyleCode { z, provenance: StyleProvenance::AugmentedGaussian }
    }
}

/// Per-pixel argmax of `(K, H, W)` probabilities.
pub fn argmax_labels<T: Scalar>(probs: &Tensor<T>) -> Vec<u8> {
    let (k, hw) = (probs.dim(0), probs.dim(1) * probs.dim(2));
    let d = probs.data();
    (0..hw)
        .map(|i| (0..k).fold(0usize, |best, c| if d[c * hw + i] > d[best * hw + i] { c } else { best }) as u8)
        .collect()
}
