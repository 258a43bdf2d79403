use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Child;

use cddsa::checkpoint::{self, Checkpoint};
use cddsa::config::{ExperimentConfig, SEED_ENV};
use cddsa::datagen::{build_dataset, load_dataset, read_image, write_dataset, LoadOptions, MultiDomainDataset, Split};
use cddsa::imaging::{grid, save_png, tensor_to_rgb};
use cddsa::metrics::{aggregate, wilcoxon_signed_rank, MetricsReport};
use cddsa::model::{sample_style, SampleMode};
use cddsa::styleaug::{augment_gaussian, augment_linear, collect_bank, synthesize_augmented};
use cddsa::trainer::{evaluate, run_lodo, RunLayout, TrainMode};
use cddsa::{CddsaError, Net32};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::{content_hash, now, RunManifest, MANIFEST_FILE};
use crate::{AugmentArgs, Command, EvalArgs, Failure, GenDataArgs, Overrides, ReconstructArgs, ReportArgs, TrainArgs};

/// Style codes per domain in the `augment` bank.
const BANK_PER_DOMAIN: usize = 8;

type Outcome = Result<(), Failure>;

pub fn run(cmd: Command) -> Outcome {
    execute(cmd, None)
}

/// Runs `cmd`; `preset` replaces config resolution when re-running a manifest.
fn execute(cmd: Command, preset: Option<ExperimentConfig>) -> Outcome {
    let started = now();
    match &cmd {
        Command::GenData(a) => gen_data(&cmd, a, preset, started),
        Command::Train(a) => train(&cmd, a, preset, started),
        Command::Eval(a) => eval(&cmd, a, preset, started),
        Command::Reconstruct(a) => reconstruct(&cmd, a, preset, started),
        Command::Augment(a) => augment(&cmd, a, preset, started),
        Command::Report(a) => report(a),
        Command::Rerun(a) => {
            let m = RunManifest::read(&a.manifest).map_err(Failure::Config)?;
            if matches!(m.command, Command::Rerun(_)) {
                return Err(Failure::Config(CddsaError::Config("a manifest cannot record a rerun".into())));
            }
            execute(m.command, Some(m.config))
        }
    }
}

fn resolve(path: Option<&Path>, overrides: Option<&Overrides>, preset: Option<ExperimentConfig>) -> Result<ExperimentConfig, Failure> {
    if let Some(cfg) = preset {
        cfg.validate().map_err(Failure::Config)?;
        return Ok(cfg);
    }
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).map_err(Failure::Config)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref()).map_err(Failure::Config)?;
    if let Some(o) = overrides {
        let t = &mut cfg.train;
        if let Some(m) = o.mode {
            t.mode = m;
        }
        if let Some(v) = o.epochs {
            t.epochs = v;
        }
        if o.steps_per_epoch.is_some() {
            t.steps_per_epoch = o.steps_per_epoch;
        }
        if let Some(v) = o.per_domain_batch {
            t.per_domain_batch = v;
        }
        let w = &mut t.weights;
        for (dst, src) in [(&mut w.lambda1, o.lambda1), (&mut w.lambda2, o.lambda2), (&mut w.lambda3, o.lambda3), (&mut w.lambda4, o.lambda4), (&mut w.tau, o.tau)] {
            if let Some(v) = src {
                *dst = v;
            }
        }
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn finish(cmd: &Command, cfg: &ExperimentConfig, inputs: &[&Path], started: String, path: &Path) -> Outcome {
    let m = RunManifest {
        command: cmd.clone(),
        config: cfg.clone(),
        input_hash: content_hash(cfg, inputs)?,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at: started,
        finished_at: now(),
    };
    Ok(m.write(path)?)
}

/// Manifest path for a command whose output is a single file.
fn sidecar(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "output".into());
    out.with_file_name(format!("{stem}.{MANIFEST_FILE}"))
}

fn mkdir(p: &Path) -> Result<(), CddsaError> {
    fs::create_dir_all(p).map_err(|e| CddsaError::io(p, e))
}

fn load_data(path: &Path, cfg: &ExperimentConfig) -> Result<MultiDomainDataset<f32>, Failure> {
    let opts = LoadOptions { num_classes: cfg.model.num_classes, ..LoadOptions::default() };
    let ds = load_dataset(path, &opts).map_err(Failure::Data)?;
    if ds.num_classes != cfg.model.num_classes {
        return Err(Failure::Config(CddsaError::Config(format!(
            "dataset has {} classes but model.num_classes = {}",
            ds.num_classes, cfg.model.num_classes
        ))));
    }
    Ok(ds)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>, Failure> {
    checkpoint::load(path).map_err(Failure::Data)
}

fn gen_data(cmd: &Command, a: &GenDataArgs, preset: Option<ExperimentConfig>, started: String) -> Outcome {
    let cfg = resolve(a.config.as_deref(), None, preset)?;
    let ds = build_dataset::<f32>(&cfg.data, cfg.data.domains.len() >= 2)?;
    mkdir(&a.out)?;
    write_dataset(&ds, &a.out, Some(&cfg.data))?;
    println!("wrote {} images in {} domains to {}", ds.samples.len(), ds.num_domains, a.out.display());
    finish(cmd, &cfg, &[], started, &a.out.join(MANIFEST_FILE))
}

fn train(cmd: &Command, a: &TrainArgs, preset: Option<ExperimentConfig>, started: String) -> Outcome {
    let cfg = resolve(a.config.as_deref(), Some(&a.overrides), preset)?;
    let ds = load_data(&a.data, &cfg)?;
    let folds: Vec<usize> = if a.holdout.is_empty() { (0..ds.num_domains).collect() } else { a.holdout.clone() };
    if let Some(&bad) = folds.iter().find(|&&d| d >= ds.num_domains) {
        return Err(Failure::Config(CddsaError::Config(format!("--holdout {bad} but the dataset has {} domains", ds.num_domains))));
    }
    mkdir(&a.out)?;
    if a.jobs > 1 && folds.len() > 1 {
        train_in_children(a, &cfg, &folds)?;
    } else {
        let layout = RunLayout { root: a.out.clone(), sample_panels: cfg.eval.sample_panels };
        for r in run_lodo(&ds, &cfg.model, &cfg.train, Some(&folds), cfg.eval.spacing, Some(&layout))? {
            println!("fold {} ({}, best epoch {}): held-out Dice {:.2}", r.plan.held_out_domain, cfg.train.mode, r.best_epoch, r.report.mean_dice());
        }
    }
    if a.child {
        return Ok(());
    }
    let combined = combine_folds(&a.out, &folds)?;
    combined.write_csv(&a.out.join("report.csv"))?;
    print!("{}", combined.to_table());
    finish(cmd, &cfg, &[&a.data], started, &a.out.join(MANIFEST_FILE))
}

fn train_in_children(a: &TrainArgs, cfg: &ExperimentConfig, folds: &[usize]) -> Result<(), Failure> {
    let exe = std::env::current_exe().map_err(|e| CddsaError::io("current executable", e))?;
    let snapshot = a.out.join("config.resolved.toml");
    fs::write(&snapshot, cfg.to_toml()?).map_err(|e| CddsaError::io(&snapshot, e))?;
    let mut pending = folds.iter().copied();
    let mut running: Vec<(usize, Child)> = Vec::new();
    let mut failed = Vec::new();
    loop {
        while running.len() < a.jobs {
            let Some(d) = pending.next() else { break };
            let child = std::process::Command::new(&exe)
                .arg("train")
                .arg("--config")
                .arg(&snapshot)
                .arg("--data")
                .arg(&a.data)
                .arg("--out")
                .arg(&a.out)
                .args(["--holdout", &d.to_string(), "--child"])
                .env(SEED_ENV, cfg.train.seed.to_string())
                .spawn()
                .map_err(|e| CddsaError::io(&exe, e))?;
            running.push((d, child));
        }
        let Some((d, mut child)) = (!running.is_empty()).then(|| running.remove(0)) else { break };
        let status = child.wait().map_err(|e| CddsaError::io(&exe, e))?;
        if !status.success() {
            failed.push(d);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(CddsaError::Validation(format!("folds {failed:?} failed"))))
    }
}

fn combine_folds(root: &Path, folds: &[usize]) -> Result<MetricsReport, Failure> {
    let layout = RunLayout::new(root);
    let mut rows = Vec::new();
    for &d in folds {
        rows.extend(MetricsReport::read_csv(&layout.report(d)).map_err(Failure::Data)?.per_case);
    }
    Ok(aggregate(rows)?)
}

fn eval(cmd: &Command, a: &EvalArgs, preset: Option<ExperimentConfig>, started: String) -> Outcome {
    let mut cfg = resolve(a.config.as_deref(), None, preset)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    cfg.model = ck.net.config.clone();
    let ds = load_data(&a.data, &cfg)?;
    if a.domain >= ds.num_domains {
        return Err(Failure::Config(CddsaError::Config(format!("--domain {} but the dataset has {} domains", a.domain, ds.num_domains))));
    }
    let ids = ds.indices(a.domain, Split::Test);
    if ids.is_empty() {
        return Err(Failure::Data(CddsaError::ingest(&a.data, format!("domain {} has an empty test split", a.domain))));
    }
    let report = aggregate(evaluate(&ck.net, &ds, &ids, cfg.eval.spacing)?)?;
    mkdir(&a.out)?;
    report.write_csv(&a.out.join("report.csv"))?;
    print!("{}", report.to_table());
    finish(cmd, &cfg, &[&a.checkpoint, &a.data], started, &a.out.join(MANIFEST_FILE))
}

fn read_input(path: &Path, net: &Net32) -> Result<cddsa::Tensor<f32>, Failure> {
    let img = read_image::<f32>(path).map_err(Failure::Data)?;
    if img.dim(0) != net.config.in_channels {
        return Err(Failure::Data(CddsaError::ingest(path, format!("image has {} channels, model expects {}", img.dim(0), net.config.in_channels))));
    }
    net.config.check_input(&[1, img.dim(0), img.dim(1), img.dim(2)]).map_err(Failure::Data)?;
    Ok(img)
}

fn checkpoint_config(ck: &Checkpoint<f32>, preset: Option<ExperimentConfig>) -> ExperimentConfig {
    let mut cfg = preset.unwrap_or_default();
    cfg.model = ck.net.config.clone();
    cfg.data.channels = cfg.model.in_channels;
    cfg
}

fn reconstruct(cmd: &Command, a: &ReconstructArgs, preset: Option<ExperimentConfig>, started: String) -> Outcome {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = checkpoint_config(&ck, preset);
    let img = read_input(&a.image, &ck.net)?;
    let rec = ck.net.reconstruct(&img)?;
    save_png(&grid(&[tensor_to_rgb(&img)?, tensor_to_rgb(&rec)?], 2)?, &a.out)?;
    println!("wrote {}", a.out.display());
    finish(cmd, &cfg, &[&a.checkpoint, &a.image], started, &sidecar(&a.out))
}

fn augment(cmd: &Command, a: &AugmentArgs, preset: Option<ExperimentConfig>, started: String) -> Outcome {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = checkpoint_config(&ck, preset);
    let net = &ck.net;
    let img = read_input(&a.image, net)?;
    let anatomy = net.encode_anatomy(&img)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let bank = match &a.bank {
        None => None,
        Some(dir) => {
            let ds = load_data(dir, &cfg)?;
            let mut styles = Vec::new();
            for d in 0..ds.num_domains {
                let ids = ds.indices(d, Split::Train);
                for &i in ids.choose_multiple(&mut rng, BANK_PER_DOMAIN) {
                    let dist = net.encode_style(&ds.samples[i].image)?;
                    styles.push((sample_style(&dist, SampleMode::Reparameterized, &mut rng)?, d));
                }
            }
            Some(collect_bank(styles).map_err(Failure::Data)?)
        }
    };
    let mut panels = vec![tensor_to_rgb(&img)?];
    for _ in 0..a.n {
        let style = match &bank {
            Some(b) => augment_linear(b, &mut rng),
            None => augment_gaussian(net.config.style_dim, &mut rng)?,
        };
        panels.push(tensor_to_rgb(&synthesize_augmented(net, &anatomy, &style)?)?);
    }
    let cols = panels.len().min(6);
    save_png(&grid(&panels, cols)?, &a.out)?;
    println!("wrote {} panels to {}", panels.len(), a.out.display());
    let mut inputs: Vec<&Path> = vec![&a.checkpoint, &a.image];
    if let Some(b) = &a.bank {
        inputs.push(b);
    }
    finish(cmd, &cfg, &inputs, started, &sidecar(&a.out))
}

fn fold_reports(run: &Path) -> Result<BTreeMap<usize, MetricsReport>, Failure> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(run).map_err(|e| Failure::Data(CddsaError::io(run, e)))?;
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        let Some(d) = name.strip_prefix("fold_").and_then(|s| s.parse::<usize>().ok()) else { continue };
        let csv = e.path().join("report.csv");
        if csv.exists() {
            out.insert(d, MetricsReport::read_csv(&csv).map_err(Failure::Data)?);
        }
    }
    if out.is_empty() {
        return Err(Failure::Data(CddsaError::ingest(run, "no fold_<d>/report.csv found")));
    }
    Ok(out)
}

fn run_mode(run: &Path) -> Option<TrainMode> {
    RunManifest::read(&run.join(MANIFEST_FILE)).ok().map(|m| m.config.train.mode)
}

fn report(a: &ReportArgs) -> Outcome {
    let folds = fold_reports(&a.run)?;
    let label = |p: &Path| run_mode(p).map_or_else(|| p.display().to_string(), |m| format!("{} ({m})", p.display()));
    println!("run {}", label(&a.run));
    for (d, r) in &folds {
        println!("held-out domain {d}: mean Dice {:.2}", r.mean_dice());
    }
    let all = aggregate(folds.values().flat_map(|r| r.per_case.clone()).collect())?;
    print!("{}", all.to_table());
    if let Some(other) = &a.compare {
        let theirs = aggregate(fold_reports(other)?.into_values().flat_map(|r| r.per_case).collect())?;
        let key = |c: &cddsa::metrics::CaseMetric| (c.case_id.clone(), c.class);
        let index: BTreeMap<_, f64> = theirs.per_case.iter().map(|c| (key(c), c.dice_percent)).collect();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for c in &all.per_case {
            if let Some(&v) = index.get(&key(c)) {
                x.push(c.dice_percent);
                y.push(v);
            }
        }
        if x.is_empty() {
            return Err(Failure::Data(CddsaError::Validation("the two runs share no evaluated cases".into())));
        }
        let w = wilcoxon_signed_rank(&x, &y)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "vs {}: {} paired rows, mean Dice {:.2} vs {:.2}, Wilcoxon signed-rank W+ = {:.1}, p = {:.4}",
            label(other),
            x.len(),
            mean(&x),
            mean(&y),
            w.w_plus,
            w.p_value
        );
    }
    Ok(())
}
