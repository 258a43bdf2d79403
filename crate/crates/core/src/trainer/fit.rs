use std::collections::BTreeSet;

use cddsa_autograd::{Adam, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_minibatch, train_step, Batch, PlateauScheduler, TrainConfig};
use crate::datagen::{MultiDomainDataset, Split};
use crate::error::{CddsaError, Result};
use crate::losses::LossComponents;
use crate::metrics::{evaluate_case, CaseMetric};
use crate::model::{argmax_labels, CddsaNet};

const EVAL_CHUNK: usize = 8;

/// Training pools per domain and the held-in validation indices.
#[derive(Clone, Debug)]
pub struct FitSetup {
    pub train_pools: Vec<(usize, Vec<usize>)>,
    pub val_ids: Vec<usize>,
}

/// Holds out `fraction` of every domain's training split (at least one
/// sample when the domain has two or more) for validation.
pub fn split_validation<T: Scalar>(ds: &MultiDomainDataset<T>, domains: &[usize], fraction: f64, seed: u64) -> FitSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0a11);
    let mut train_pools = Vec::new();
    let mut val_ids = Vec::new();
    for &d in domains {
        let mut ids = ds.indices(d, Split::Train);
        ids.shuffle(&mut rng);
        let n_val = if fraction > 0.0 && ids.len() >= 2 { ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1) } else { 0 };
        val_ids.extend(ids.drain(..n_val));
        ids.sort_unstable();
        train_pools.push((d, ids));
    }
    val_ids.sort_unstable();
    FitSetup { train_pools, val_ids }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Means over the epoch's steps.
    pub losses: LossComponents,
    pub total: f64,
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    /// Parameters of the epoch with the best validation Dice (the last epoch
    /// when there is no validation set).
    pub net: CddsaNet<T>,
    pub adam: Adam<T>,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    /// Every dataset index that entered a training step.
    pub used_samples: BTreeSet<usize>,
}

/// Runs `cfg.epochs` epochs and keeps the best validated parameters.
pub fn fit<T: Scalar>(
    mut net: CddsaNet<T>,
    ds: &MultiDomainDataset<T>,
    setup: &FitSetup,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FitResult<T>> {
    cfg.validate()?;
    if cfg.mode.uses_dsct() && setup.train_pools.len() < 2 {
        return Err(CddsaError::Config(format!("mode {} needs at least two training domains", cfg.mode)));
    }
    let b = cfg.per_domain_batch;
    let largest = setup.train_pools.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| largest.div_ceil(b)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&net.store, cfg.lr_init);
    let mut sched = PlateauScheduler::new(cfg.lr_init, cfg.lr_decay_factor, cfg.lr_patience_epochs);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut used = BTreeSet::new();
    let mut best: Option<(f64, usize, cddsa_autograd::ParamStore<T>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = sched.lr;
        adam.lr = lr;
        let mut sum = LossComponents::default();
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = make_minibatch(ds, &setup.train_pools, b, &cfg.augment, &mut rng)?;
            used.extend(batch.sample_ids.iter().copied());
            let rec = train_step(&mut net, &mut adam, &batch, cfg, &mut rng)?;
            sum.seg += rec.components.seg;
            sum.kl += rec.components.kl;
            sum.rec += rec.components.rec;
            sum.dsct += rec.components.dsct;
            sum.saac += rec.components.saac;
            total += rec.total;
        }
        let k = steps as f64;
        let losses = LossComponents { seg: sum.seg / k, kl: sum.kl / k, rec: sum.rec / k, dsct: sum.dsct / k, saac: sum.saac / k };
        let val_dice = if setup.val_ids.is_empty() {
            None
        } else {
            let rows = evaluate(&net, ds, &setup.val_ids, (1.0, 1.0))?;
            Some(rows.iter().map(|r| r.dice_percent).sum::<f64>() / rows.len() as f64)
        };
        let entry = EpochLog { epoch, lr, steps, losses, total: total / k, val_dice };
        log::debug!("{} epoch {epoch}: total {:.4} val {:?}", cfg.mode, entry.total, val_dice);
        on_epoch(&entry);
        history.push(entry);
        if let Some(v) = val_dice {
            sched.step(v);
            if best.as_ref().is_none_or(|(bv, _, _)| v > *bv) {
                best = Some((v, epoch, net.store.clone()));
            }
        }
    }
    let (best_val, best_epoch) = match best {
        Some((v, e, store)) => {
            net.store = store;
            (Some(v), e)
        }
        None => (None, cfg.epochs.saturating_sub(1)),
    };
    Ok(FitResult { net, adam, history, best_epoch, best_val, used_samples: used })
}

/// Per-case foreground Dice and ASSD of `ids` in inference mode.
pub fn evaluate<T: Scalar>(net: &CddsaNet<T>, ds: &MultiDomainDataset<T>, ids: &[usize], spacing: (f64, f64)) -> Result<Vec<CaseMetric>> {
    if ids.is_empty() {
        return Err(CddsaError::Validation("nothing to evaluate".into()));
    }
    let mut rows = Vec::new();
    for chunk in ids.chunks(EVAL_CHUNK) {
        let batch = Batch::from_indices(ds, chunk)?;
        let probs = net.predict_batch(&batch.images)?;
        for (k, &id) in chunk.iter().enumerate() {
            let s = &ds.samples[id];
            let pred = argmax_labels(&probs.index0(k));
            rows.extend(evaluate_case(&s.case_id, s.domain_id, &pred, &s.mask.labels, s.mask.height, s.mask.width, ds.num_classes, spacing)?);
        }
    }
    Ok(rows)
}
