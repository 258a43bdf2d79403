use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cddsa_autograd::Scalar;
use serde::{Deserialize, Serialize};

use super::{evaluate, fit, split_validation, EpochLog, TrainConfig, TrainMode};
use crate::checkpoint::{self, Checkpoint};
use crate::datagen::{MultiDomainDataset, Split};
use crate::error::{CddsaError, Result};
use crate::imaging::{grid, labels_to_rgb, save_png, tensor_to_rgb};
use crate::metrics::{aggregate, MetricsReport};
use crate::model::{argmax_labels, CddsaNet, ModelConfig};

/// Domains used for training and the domain whose test split is evaluated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LodoPlan {
    pub held_out_domain: usize,
    pub train_domains: Vec<usize>,
}

impl LodoPlan {
    /// Trains on every domain except `held_out`.
    pub fn leave_out(held_out: usize, num_domains: usize) -> Result<Self> {
        if held_out >= num_domains || num_domains < 2 {
            return Err(CddsaError::Config(format!("cannot hold out domain {held_out} of {num_domains}")));
        }
        Ok(LodoPlan { held_out_domain: held_out, train_domains: (0..num_domains).filter(|&d| d != held_out).collect() })
    }

    /// Trains and tests inside one domain.
    pub fn within(domain: usize) -> Self {
        LodoPlan { held_out_domain: domain, train_domains: vec![domain] }
    }

    pub fn is_within_domain(&self) -> bool {
        self.train_domains == [self.held_out_domain]
    }
}

/// Record of which samples influenced the parameters of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HygieneAudit {
    pub held_out_domain: usize,
    pub train_domains: Vec<usize>,
    pub samples_used: usize,
    /// Training or validation samples that belong to a domain outside `train_domains`,
    /// or any test-split sample. Must be empty.
    pub violations: Vec<String>,
}

impl HygieneAudit {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct FoldResult<T> {
    pub plan: LodoPlan,
    pub net: CddsaNet<T>,
    pub report: MetricsReport,
    pub history: Vec<EpochLog>,
    pub audit: HygieneAudit,
    pub best_epoch: usize,
}

/// `runs/<name>/fold_<d>/{checkpoint, log.jsonl, report.csv, samples/}`.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
    /// Qualitative panels written per fold.
    pub sample_panels: usize,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into(), sample_panels: 4 }
    }

    pub fn fold_dir(&self, domain: usize) -> PathBuf {
        self.root.join(format!("fold_{domain}"))
    }

    pub fn checkpoint(&self, domain: usize) -> PathBuf {
        self.fold_dir(domain).join("checkpoint")
    }

    pub fn log(&self, domain: usize) -> PathBuf {
        self.fold_dir(domain).join("log.jsonl")
    }

    pub fn report(&self, domain: usize) -> PathBuf {
        self.fold_dir(domain).join("report.csv")
    }

    pub fn samples(&self, domain: usize) -> PathBuf {
        self.fold_dir(domain).join("samples")
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| CddsaError::io(p, e))
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Plan { plan: &'a LodoPlan, mode: TrainMode, train_samples: usize, val_samples: usize },
    Epoch(&'a EpochLog),
    Audit(&'a HygieneAudit),
    Note { text: &'a str },
}

struct JsonLog(Option<(BufWriter<File>, PathBuf)>);

impl JsonLog {
    fn open(path: Option<PathBuf>) -> Result<Self> {
        match path {
            None => Ok(JsonLog(None)),
            Some(p) => {
                let f = File::create(&p).map_err(|e| CddsaError::io(&p, e))?;
                Ok(JsonLog(Some((BufWriter::new(f), p))))
            }
        }
    }

    fn write(&mut self, line: &LogLine<'_>) -> Result<()> {
        if let Some((w, p)) = &mut self.0 {
            let s = serde_json::to_string(line).map_err(|e| CddsaError::Validation(e.to_string()))?;
            writeln!(w, "{s}").and_then(|_| w.flush()).map_err(|e| CddsaError::io(p.clone(), e))?;
        }
        Ok(())
    }
}

fn audit<T: Scalar>(ds: &MultiDomainDataset<T>, plan: &LodoPlan, touched: impl Iterator<Item = usize>) -> HygieneAudit {
    let mut samples_used = 0;
    let mut violations = Vec::new();
    for id in touched {
        samples_used += 1;
        let s = &ds.samples[id];
        if !plan.train_domains.contains(&s.domain_id) || s.split != Split::Train {
            violations.push(s.case_id.clone());
        }
    }
    HygieneAudit { held_out_domain: plan.held_out_domain, train_domains: plan.train_domains.clone(), samples_used, violations }
}

fn write_samples<T: Scalar>(net: &CddsaNet<T>, ds: &MultiDomainDataset<T>, ids: &[usize], dir: &Path) -> Result<()> {
    mkdir(dir)?;
    for &id in ids {
        let s = &ds.samples[id];
        let probs = net.segment(&net.encode_anatomy(&s.image)?)?;
        let pred = argmax_labels(&probs);
        let (h, w) = (s.mask.height, s.mask.width);
        let panels = [tensor_to_rgb(&s.image)?, labels_to_rgb(&s.mask.labels, h, w), labels_to_rgb(&pred, h, w)];
        save_png(&grid(&panels, 3)?, &dir.join(format!("{}.png", s.case_id)))?;
    }
    Ok(())
}

/// Trains and evaluates one fold per plan. Leave-one-domain-out modes hold
/// out each domain in `folds` (all domains when `None`); the within-domain
/// mode trains and tests inside each listed domain instead.
pub fn run_lodo<T: Scalar>(
    ds: &MultiDomainDataset<T>,
    model: &ModelConfig,
    train: &TrainConfig,
    folds: Option<&[usize]>,
    spacing: (f64, f64),
    layout: Option<&RunLayout>,
) -> Result<Vec<FoldResult<T>>> {
    train.validate()?;
    ds.check_lodo_ready()?;
    if ds.num_domains < 2 && train.mode != TrainMode::IntraDomain {
        return Err(CddsaError::Config("leave-one-domain-out needs at least two domains".into()));
    }
    let domains: Vec<usize> = match folds {
        Some(f) => f.to_vec(),
        None => (0..ds.num_domains).collect(),
    };
    let mut results = Vec::with_capacity(domains.len());
    for &d in &domains {
        let plan = if train.mode == TrainMode::IntraDomain { LodoPlan::within(d) } else { LodoPlan::leave_out(d, ds.num_domains)? };
        let fold_seed = train.seed.wrapping_mul(0x9E37_79B9).wrapping_add(d as u64);
        let cfg = TrainConfig { seed: fold_seed, ..train.clone() };
        let setup = split_validation(ds, &plan.train_domains, cfg.val_fraction, fold_seed);
        if let Some(l) = layout {
            mkdir(&l.fold_dir(d))?;
        }
        let mut log = JsonLog::open(layout.map(|l| l.log(d)))?;
        let train_samples = setup.train_pools.iter().map(|(_, p)| p.len()).sum();
        log.write(&LogLine::Plan { plan: &plan, mode: cfg.mode, train_samples, val_samples: setup.val_ids.len() })?;
        if matches!(cfg.mode, TrainMode::InterDomain) {
            log.write(&LogLine::Note { text: "pooled-source segmentation uses the hybrid Dice + cross-entropy loss" })?;
        }
        log::info!("fold {d}: mode {} trains on {:?}", cfg.mode, plan.train_domains);

        let net = CddsaNet::<T>::new(model.clone(), fold_seed)?;
        let mut epoch_err = None;
        let result = fit(net, ds, &setup, &cfg, &mut |e| {
            if let Err(err) = log.write(&LogLine::Epoch(e)) {
                epoch_err.get_or_insert(err);
            }
        })?;
        if let Some(e) = epoch_err {
            return Err(e);
        }
        let touched = result.used_samples.iter().copied().chain(setup.val_ids.iter().copied());
        let audit = audit(ds, &plan, touched);
        log.write(&LogLine::Audit(&audit))?;
        if !audit.passed() {
            return Err(CddsaError::Validation(format!("fold {d} touched held-out samples: {:?}", audit.violations)));
        }
        let test_ids = ds.indices(plan.held_out_domain, Split::Test);
        let report = aggregate(evaluate(&result.net, ds, &test_ids, spacing)?)?;

        if let Some(l) = layout {
            let ck = Checkpoint {
                net: result.net.clone(),
                adam: Some(result.adam.clone()),
                epoch: result.best_epoch,
                seeds: vec![fold_seed, cfg.seed],
                train: serde_json::to_value(&cfg).map_err(|e| CddsaError::Validation(e.to_string()))?,
            };
            checkpoint::save(&ck, &l.checkpoint(d))?;
            report.write_csv(&l.report(d))?;
            let n = l.sample_panels.min(test_ids.len());
            write_samples(&result.net, ds, &test_ids[..n], &l.samples(d))?;
        }
        results.push(FoldResult { plan, net: result.net, report, history: result.history, audit, best_epoch: result.best_epoch });
    }
    Ok(results)
}
