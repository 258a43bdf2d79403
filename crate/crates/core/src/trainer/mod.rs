//! Mini-batch assembly, the joint training step, the epoch loop and the
//! leave-one-domain-out driver.

mod fit;
mod lodo;
mod schedule;

use std::fmt;
use std::str::FromStr;

use cddsa_autograd::{apply_stat_updates, Adam, Binder, Mode, Scalar, Tape, Tensor, Var};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::MultiDomainDataset;
use crate::error::{CddsaError, Result};
use crate::losses::{
    build_contrastive_pairs, dsct_loss_graph, kl_loss_graph, mean_abs_graph, one_hot, seg_loss_graph, total_loss,
    LossComponents, LossWeights,
};
use crate::model::{CddsaNet, LOGVAR_MAX, LOGVAR_MIN};
use crate::styleaug::draw_alphas;

pub use fit::{evaluate, fit, split_validation, EpochLog, FitResult, FitSetup};
pub use lodo::{run_lodo, FoldResult, HygieneAudit, LodoPlan, RunLayout};

pub use schedule::PlateauScheduler;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Contrastive loss plus anatomy consistency under linear style mixing.
    Cddsa,
    /// As `Cddsa` with augmented styles drawn from the unit Gaussian.
    CddsaGaussian,
    /// Segmentation, KL and reconstruction only.
    BaselineSdnet,
    PlusDsct,
    PlusSaac,
    /// Plain segmentation on the pooled source domains.
    InterDomain,
    /// Plain segmentation trained and tested inside each domain.
    IntraDomain,
}

/// Source of the augmented style code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentKind {
    Linear,
    Gaussian,
}

impl TrainMode {
    pub const ALL: [TrainMode; 7] = [
        TrainMode::Cddsa,
        TrainMode::CddsaGaussian,
        TrainMode::BaselineSdnet,
        TrainMode::PlusDsct,
        TrainMode::PlusSaac,
        TrainMode::InterDomain,
        TrainMode::IntraDomain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Cddsa => "cddsa",
            TrainMode::CddsaGaussian => "cddsa_gaussian",
            TrainMode::BaselineSdnet => "baseline_sdnet",
            TrainMode::PlusDsct => "plus_dsct",
            TrainMode::PlusSaac => "plus_saac",
            TrainMode::InterDomain => "inter_domain",
            TrainMode::IntraDomain => "intra_domain",
        }
    }

    /// Style encoder, decoder, KL and reconstruction are trained.
    pub fn uses_style(self) -> bool {
        !matches!(self, TrainMode::InterDomain | TrainMode::IntraDomain)
    }

    pub fn uses_dsct(self) -> bool {
        matches!(self, TrainMode::PlusDsct | TrainMode::Cddsa | TrainMode::CddsaGaussian)
    }

    pub fn augmentation(self) -> Option<AugmentKind> {
        match self {
            TrainMode::PlusSaac | TrainMode::Cddsa => Some(AugmentKind::Linear),
            TrainMode::CddsaGaussian => Some(AugmentKind::Gaussian),
            _ => None,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = CddsaError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| CddsaError::Config(format!("unknown mode `{s}`")))
    }
}

/// Geometric augmentations applied to sampled training images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasicAugment {
    pub hflip: bool,
    pub vflip: bool,
    /// Random multiple of 90 degrees (square images only).
    pub rot90: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples drawn from every training domain per step.
    pub per_domain_batch: usize,
    /// Steps per epoch; `None` means `ceil(largest domain / per_domain_batch)`.
    pub steps_per_epoch: Option<usize>,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_patience_epochs: usize,
    pub weights: LossWeights,
    pub mode: TrainMode,
    pub seed: u64,
    /// Share of each training domain held in for validation.
    pub val_fraction: f64,
    pub bn_momentum: f64,
    /// Forbid fixed points in the within-domain positive permutation.
    pub derangement: bool,
    /// Detach the augmented image before re-encoding it.
    pub saac_stop_gradient: bool,
    /// Also apply the segmentation loss to augmented images.
    pub segment_augmented: bool,
    /// Draw one augmented style per sample instead of one per batch.
    pub per_sample_augmentation: bool,
    pub augment: BasicAugment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            per_domain_batch: 8,
            steps_per_epoch: None,
            lr_init: 1e-3,
            lr_decay_factor: 0.95,
            lr_patience_epochs: 8,
            weights: LossWeights::default(),
            mode: TrainMode::Cddsa,
            seed: 0,
            val_fraction: 0.1,
            bn_momentum: 0.1,
            derangement: false,
            saac_stop_gradient: false,
            segment_augmented: false,
            per_sample_augmentation: false,
            augment: BasicAugment::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for three-channel images: 200 epochs, 8 per domain.
    pub fn color_preset() -> Self {
        TrainConfig::default()
    }

    /// Settings for single-channel images: 400 epochs, 6 per domain.
    pub fn gray_preset() -> Self {
        TrainConfig { epochs: 400, per_domain_batch: 6, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.per_domain_batch == 0 {
            return Err(CddsaError::Config("per_domain_batch must be positive".into()));
        }
        if self.mode.uses_dsct() && self.per_domain_batch < 2 {
            return Err(CddsaError::Config("contrastive modes need per_domain_batch >= 2".into()));
        }
        if self.lr_patience_epochs == 0 {
            return Err(CddsaError::Config("lr_patience_epochs must be at least 1".into()));
        }
        if !(self.lr_init > 0.0) || !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(CddsaError::Config("lr_init must be positive and lr_decay_factor in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CddsaError::Config("val_fraction must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(CddsaError::Config("bn_momentum must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Images `(N, C, H, W)` with labels and domains, grouped by domain.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<u8>,
    pub domains: Vec<usize>,
    /// Dataset indices of the drawn samples.
    pub sample_ids: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// Builds a batch from dataset indices without augmentation.
    pub fn from_indices(ds: &MultiDomainDataset<T>, ids: &[usize]) -> Result<Self> {
        if ids.is_empty() {
            return Err(CddsaError::Validation("empty batch".into()));
        }
        let images: Vec<Tensor<T>> = ids.iter().map(|&i| ds.samples[i].image.clone()).collect();
        Ok(Batch {
            images: Tensor::stack(&images)?,
            labels: ids.iter().flat_map(|&i| ds.samples[i].mask.labels.iter().copied()).collect(),
            domains: ids.iter().map(|&i| ds.samples[i].domain_id).collect(),
            sample_ids: ids.to_vec(),
        })
    }
}

/// Draws exactly `b` samples from every pool `(domain, indices)`. Pools with
/// at least `b` entries are sampled without replacement, smaller ones with.
pub fn make_minibatch<T: Scalar, R: Rng + ?Sized>(
    ds: &MultiDomainDataset<T>,
    pools: &[(usize, Vec<usize>)],
    b: usize,
    augment: &BasicAugment,
    rng: &mut R,
) -> Result<Batch<T>> {
    if pools.is_empty() || b == 0 {
        return Err(CddsaError::Validation("a mini-batch needs at least one domain and b >= 1".into()));
    }
    let mut ids = Vec::with_capacity(pools.len() * b);
    for (d, pool) in pools {
        if pool.is_empty() {
            return Err(CddsaError::Validation(format!("training domain {d} has no samples")));
        }
        let mut drawn: Vec<usize> = if pool.len() >= b {
            pool.choose_multiple(rng, b).copied().collect()
        } else {
            (0..b).map(|_| *pool.choose(rng).expect("non-empty pool")).collect()
        };
        drawn.shuffle(rng);
        ids.extend(drawn);
    }
    let mut batch = Batch::from_indices(ds, &ids)?;
    if augment.hflip || augment.vflip || augment.rot90 {
        apply_basic_augment(&mut batch, augment, rng)?;
    }
    Ok(batch)
}

fn apply_basic_augment<T: Scalar, R: Rng + ?Sized>(batch: &mut Batch<T>, aug: &BasicAugment, rng: &mut R) -> Result<()> {
    let s = batch.images.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    if aug.rot90 && h != w {
        return Err(CddsaError::Config("rot90 augmentation needs square images".into()));
    }
    let hw = h * w;
    for n in 0..batch.len() {
        let flip_h = aug.hflip && rng.random_bool(0.5);
        let flip_v = aug.vflip && rng.random_bool(0.5);
        let turns = if aug.rot90 { rng.random_range(0..4) } else { 0 };
        let map = |r: usize, col: usize| -> usize {
            let (mut r, mut col) = (r, col);
            if flip_h {
                col = w - 1 - col;
            }
            if flip_v {
                r = h - 1 - r;
            }
            for _ in 0..turns {
                (r, col) = (col, h - 1 - r);
            }
            r * w + col
        };
        let img = &mut batch.images.data_mut()[n * c * hw..(n + 1) * c * hw];
        let src = img.to_vec();
        let lab = &mut batch.labels[n * hw..(n + 1) * hw];
        let src_lab = lab.to_vec();
        for r in 0..h {
            for col in 0..w {
                let to = map(r, col);
                lab[to] = src_lab[r * w + col];
                for ch in 0..c {
                    img[ch * hw + to] = src[ch * hw + r * w + col];
                }
            }
        }
    }
    Ok(())
}

/// Loss values and the updated learning rate of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub components: LossComponents,
    pub total: f64,
}

/// Builds every active loss of `mode` on `binder`'s tape and returns the
/// weighted total with its components.
///
/// Random draws happen in a fixed order: anatomy noise (Gumbel kinds only),
/// reparameterisation noise, the positive permutation, then the augmentation
/// weights or Gaussian style. Modes that skip a draw leave the earlier ones
/// unchanged.
pub fn build_losses<'t, T: Scalar, R: RngCore>(
    net: &'t CddsaNet<T>,
    binder: &Binder<'t, T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Var<'t, T>, LossComponents)> {
    let tape = binder.tape;
    let mc = &net.config;
    let mode = cfg.mode;
    let w = &cfg.weights;
    let n = batch.len();
    let s = batch.images.shape();
    let targets = one_hot::<T>(&batch.labels, n, mc.num_classes, s[2], s[3])?;
    let gumbel = mc.activation.is_gumbel();
    let x = tape.constant(batch.images.clone());

    let f_a = net.anatomy.forward(binder, x, mc, if gumbel { Some(rng as &mut dyn RngCore) } else { None })?;
    let probs = net.segmentor.forward(binder, f_a, mc)?;
    let mut seg = seg_loss_graph(probs, &targets)?;
    let mut comps = LossComponents::default();

    if !mode.uses_style() {
        comps.seg = seg.item().as_f64();
        return Ok((seg, comps));
    }

    let (mean, logvar) = net.style.forward(binder, x, mc)?;
    let logvar = logvar.clamp(T::of(LOGVAR_MIN), T::of(LOGVAR_MAX));
    let z_dim = mc.style_dim;
    let eps = Tensor::from_fn(&[n, z_dim], |_| T::of(rng.sample::<f64, _>(StandardNormal)));
    let z = mean.try_add(logvar.scale(T::of(0.5)).exp().try_mul(tape.constant(eps))?)?;
    let x_hat = net.decoder.forward(binder, z, f_a, mc)?;
    let kl = kl_loss_graph(mean, logvar)?;
    let rec = mean_abs_graph(x, x_hat)?;
    // running statistics come from real images only
    let real_stats = binder.take_stat_updates();

    let mut dsct = None;
    if mode.uses_dsct() {
        let cb = build_contrastive_pairs(&batch.domains, cfg.per_domain_batch, w.tau, cfg.derangement, rng)?;
        dsct = Some(dsct_loss_graph(z, &cb)?);
    }

    let mut saac = None;
    if let Some(kind) = mode.augmentation() {
        let rows = if cfg.per_sample_augmentation { n } else { 1 };
        let z_aug = match kind {
            AugmentKind::Linear => {
                let alphas: Vec<T> = (0..rows).flat_map(|_| draw_alphas(n, rng)).map(T::of).collect();
                tape.constant(Tensor::from_vec(&[rows, n], alphas)?).matmul(z)?
            }
            AugmentKind::Gaussian => {
                let g = Tensor::from_fn(&[rows, z_dim], |_| T::of(rng.sample::<f64, _>(StandardNormal)));
                tape.constant(g)
            }
        };
        let z_aug = if rows == 1 { z_aug.index_select(&vec![0; n])? } else { z_aug };
        let mut x_aug = net.decoder.forward(binder, z_aug, f_a, mc)?;
        if cfg.saac_stop_gradient {
            x_aug = x_aug.detach();
        }
        let noise = if gumbel { Some(rng as &mut dyn RngCore) } else { None };
        let f_aug = net.anatomy.forward(binder, x_aug, mc, noise)?;
        saac = Some(mean_abs_graph(f_a, f_aug)?);
        if cfg.segment_augmented {
            let p_aug = net.segmentor.forward(binder, f_aug, mc)?;
            seg = seg.try_add(seg_loss_graph(p_aug, &targets)?)?.scale(T::of(0.5));
        }
    }
    binder.take_stat_updates();
    for u in real_stats {
        binder.record_stats(u);
    }

    comps.seg = seg.item().as_f64();
    comps.kl = kl.item().as_f64();
    comps.rec = rec.item().as_f64();
    let mut total = seg.try_add(kl.scale(T::of(w.lambda1)))?.try_add(rec.scale(T::of(w.lambda2)))?;
    if let Some(d) = dsct {
        comps.dsct = d.item().as_f64();
        total = total.try_add(d.scale(T::of(w.lambda3)))?;
    }
    if let Some(a) = saac {
        comps.saac = a.item().as_f64();
        total = total.try_add(a.scale(T::of(w.lambda4)))?;
    }
    Ok((total, comps))
}

/// Loss components of one step evaluated without updating anything.
pub fn step_losses<T: Scalar, R: RngCore>(net: &CddsaNet<T>, batch: &Batch<T>, cfg: &TrainConfig, rng: &mut R) -> Result<(f64, LossComponents)> {
    let tape = Tape::new();
    let binder = Binder::new(&tape, &net.store, Mode::Train);
    let (total, comps) = build_losses(net, &binder, batch, cfg, rng)?;
    Ok((total.item().as_f64(), comps))
}

/// One Adam update of all four networks on the mode's total loss.
pub fn train_step<T: Scalar, R: RngCore>(
    net: &mut CddsaNet<T>,
    adam: &mut Adam<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepRecord> {
    let (grads, updates, record) = {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &net.store, Mode::Train);
        let (total, components) = build_losses(net, &binder, batch, cfg, rng)?;
        let checked = total_loss(&components, &cfg.weights)?;
        let value = total.item().as_f64();
        if !value.is_finite() {
            return Err(CddsaError::NonFinite { term: "total", value });
        }
        let g = tape.backward(total);
        let grads = binder.param_grads(&g);
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            let name = net.store.iter().nth(id.0).map(|(_, p)| p.name.clone()).unwrap_or_default();
            log::error!("non-finite gradient for {name}");
            return Err(CddsaError::NonFinite { term: "gradient", value: f64::NAN });
        }
        debug_assert!((checked - value).abs() <= 1e-3 * (1.0 + value.abs()));
        (grads, binder.take_stat_updates(), StepRecord { components, total: value })
    };
    adam.update(&mut net.store, &grads);
    apply_stat_updates(&mut net.store, &updates, T::of(cfg.bn_momentum));
    Ok(record)
}
