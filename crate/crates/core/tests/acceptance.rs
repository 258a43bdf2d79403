//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `ACCEPTANCE_ONLY=1,4,9` to run a subset.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use cddsa::datagen::Split;
use cddsa::losses::{
    build_contrastive_pairs, ce_loss, dice_loss, dsct_loss, kl_loss, rec_loss, saac_loss, ContrastiveBatch, DICE_SMOOTH, PROB_FLOOR,
};
use cddsa::metrics::{assd, dice_score, evaluate_case, style_separation, BinaryMask};
use cddsa::model::{
    adain, argmax_labels, sample_style, ActivationKind, AnatomicalRepresentation, CddsaNet, ModelConfig, SampleMode, StyleDistribution,
};
use cddsa::styleaug::{augment_linear, collect_bank, synthesize_augmented};
use cddsa::trainer::{
    build_losses, fit, run_lodo, split_validation, step_losses, train_step, Batch, FoldResult, PlateauScheduler, TrainConfig,
    TrainMode,
};
use cddsa::{Scalar, Tensor};
use cddsa_autograd::{gradcheck, Adam, Binder, Mode, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// State shared by the training criteria.
#[derive(Default)]
struct Shared {
    /// One trained `cddsa` fold reused by the augmentation check.
    cddsa_fold: Option<FoldResult<f32>>,
    audits: Vec<(String, bool)>,
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|s| s.contains(&id));
    let mut shared = Shared::default();
    type Check = fn(&mut Shared) -> Verdict;
    let criteria: [(u32, &str, f64, Check); 9] = [
        (1, "closed-form loss oracles", 60.0, c1_loss_oracles),
        (2, "finite-difference gradients of every loss", 300.0, c2_gradients),
        (3, "AdaIN output moments", f64::INFINITY, c3_adain),
        (4, "Dice/ASSD against brute force", f64::INFINITY, c4_metrics),
        (5, "style codes separate by domain", 1800.0, c5_disentanglement),
        (6, "reconstruction fidelity: tanh vs Gumbel-hard", f64::INFINITY, c6_reconstruction),
        (7, "held-out-domain Dice trend", f64::INFINITY, c7_generalisation),
        (8, "anatomy preserved under style augmentation", f64::INFINITY, c8_augmentation),
        (9, "protocol audits", f64::INFINITY, c9_protocol),
    ];
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        if !wanted(id) {
            continue;
        }
        let t = Instant::now();
        let v = check(&mut shared);
        let secs = t.elapsed().as_secs_f64();
        let in_time = secs < budget;
        let pass = v.pass && in_time;
        let budget_note = if budget.is_finite() { format!(", budget {budget:.0}s") } else { String::new() };
        println!(
            "[{}] criterion {id}: {name}: {}{} ({secs:.1}s{budget_note})",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            if in_time { "" } else { "; over time budget" }
        );
        if !pass {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}

// ---- 1 --------------------------------------------------------------------

fn random_probs(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[k, h, w], |_| rng.random_range(0.0..1.0f64).powi(3) + 1e-3);
    let hw = h * w;
    for i in 0..hw {
        let s: f64 = (0..k).map(|c| t.data()[c * hw + i]).sum();
        for c in 0..k {
            t.data_mut()[c * hw + i] /= s;
        }
    }
    t
}

fn c1_loss_oracles(_: &mut Shared) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut kl_err: f64 = 0.0;
    for _ in 0..1000 {
        let z = rng.random_range(1..=8);
        let mean: Vec<f64> = (0..z).map(|_| rng.random_range(-3.0..3.0)).collect();
        let variance: Vec<f64> = (0..z).map(|_| rng.random_range(0.05..5.0)).collect();
        let oracle: f64 = mean.iter().zip(&variance).map(|(&u, &v)| common::gaussian_kl(u, v)).sum();
        let got = kl_loss(&StyleDistribution { mean, variance }).unwrap();
        kl_err = kl_err.max((got - oracle).abs());
    }

    let case = |sim_p: [f64; 2], neg: [f64; 2]| {
        let cb = ContrastiveBatch { domains: vec![0, 0, 1], anchors: vec![0], positives: vec![1], negatives: vec![vec![2]], tau: 0.1 };
        dsct_loss(&[vec![1.0, 0.0], sim_p.to_vec(), neg.to_vec()], &cb).unwrap()
    };
    // sim(a,p) = 1, sim(a,n) = 0
    let d1 = case([2.0, 0.0], [0.0, 3.0]);
    let e1 = (1.0f64 + (-10.0f64).exp()).ln();
    // sim(a,p) = 0, sim(a,n) = 0
    let d2 = case([0.0, 1.0], [0.0, -2.0]);
    let e2 = 2.0f64.ln();
    let dsct_err = (d1 - e1).abs().max((d2 - e2).abs());

    let mut brute_err: f64 = 0.0;
    for _ in 0..50 {
        let (k, h, w) = (rng.random_range(2..=4), rng.random_range(2..=9), rng.random_range(2..=9));
        let p = random_probs(&mut rng, k, h, w);
        let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..k) as u8).collect();
        let hw = h * w;
        let mut dice_sum = 0.0;
        for c in 1..k {
            let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
            for i in 0..hw {
                let pc = p.data()[c * hw + i];
                let y = f64::from(u8::from(labels[i] as usize == c));
                inter += pc * y;
                sp += pc;
                sy += y;
            }
            dice_sum += 1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + sy + DICE_SMOOTH);
        }
        let dice_oracle = dice_sum / (k - 1) as f64;
        let ce_oracle = (0..hw).map(|i| -p.data()[labels[i] as usize * hw + i].max(PROB_FLOOR).ln()).sum::<f64>() / hw as f64;
        brute_err = brute_err.max((dice_loss(&p, &labels).unwrap() - dice_oracle).abs());
        brute_err = brute_err.max((ce_loss(&p, &labels).unwrap() - ce_oracle).abs());

        let shape = [rng.random_range(1..=3), h, w];
        let a = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0f64));
        let b = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0f64));
        let mae = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        brute_err = brute_err.max((rec_loss(&a, &b).unwrap() - mae).abs());
        let fa = AnatomicalRepresentation { tensor: a, kind: ActivationKind::Tanh };
        let fb = AnatomicalRepresentation { tensor: b, kind: ActivationKind::Tanh };
        brute_err = brute_err.max((saac_loss(&fa, &fb).unwrap() - mae).abs());
    }
    let pass = kl_err < 1e-6 && dsct_err < 1e-6 && brute_err < 1e-9;
    verdict(
        pass,
        format!(
            "max |KL - closed form| = {kl_err:.1e} (< 1e-6), contrastive cases {d1:.4e} / {d2:.6} err {dsct_err:.1e} (< 1e-6), \
             dice/ce/rec/saac vs summation {brute_err:.1e} (< 1e-9)"
        ),
    )
}

// ---- 2 --------------------------------------------------------------------

/// Probe outcome over every parameter tensor.
#[derive(Default)]
struct GradAgreement {
    worst: f64,
    checked: usize,
    skipped: usize,
}

/// Backprop against central differences of the total loss for every
/// parameter tensor. The network is piecewise smooth (leaky ReLU, max-pool),
/// so probes whose one-sided slopes disagree sit on a kink and are skipped.
fn param_grad_agreement(net: &CddsaNet<f64>, batch: &Batch<f64>, cfg: &TrainConfig, probes: usize) -> GradAgreement {
    let seed = 11;
    let tape = Tape::new();
    let binder = Binder::new(&tape, &net.store, Mode::Train);
    let (total, _) = build_losses(net, &binder, batch, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let grads = binder.param_grads(&tape.backward(total));
    let mut out = GradAgreement::default();
    let mut probe_net = net.clone();
    for (id, analytic) in grads {
        let x = net.store.get(id).clone();
        let report = gradcheck::check_piecewise(
            &x,
            &analytic,
            |p| {
                probe_net.store.set(id, p.clone()).unwrap();
                step_losses(&probe_net, batch, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().0
            },
            1e-6,
            1e-4,
            1e-4,
            probes,
        );
        probe_net.store.set(id, x).unwrap();
        out.worst = out.worst.max(report.max_rel_error);
        out.checked += report.checked;
        out.skipped += report.skipped;
    }
    out
}

fn c2_gradients(_: &mut Shared) -> Verdict {
    let ds = common::dataset::<f64>(16, 2, 1, 5);
    let ids: Vec<usize> = (0..2).flat_map(|d| ds.indices(d, Split::Train)).collect();
    let mut batch = Batch::from_indices(&ds, &ids).unwrap();
    // flat synthetic regions leave exact max-pool ties; jitter them apart
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for v in batch.images.data_mut() {
        *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    let net = CddsaNet::<f64>::new(common::toy_model(), 3).unwrap();
    let base = TrainConfig { per_domain_batch: 2, ..TrainConfig::default() };
    let with = |mode: TrainMode, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = TrainConfig { mode, ..base.clone() };
        c.weights.lambda1 = 0.0;
        c.weights.lambda2 = 0.0;
        c.weights.lambda3 = 0.0;
        c.weights.lambda4 = 0.0;
        f(&mut c);
        c
    };
    let cases: Vec<(&str, TrainConfig)> = vec![
        ("seg", with(TrainMode::InterDomain, &|_| {})),
        ("seg+kl", with(TrainMode::BaselineSdnet, &|c| c.weights.lambda1 = 1.0)),
        ("seg+rec", with(TrainMode::BaselineSdnet, &|c| c.weights.lambda2 = 1.0)),
        ("seg+dsct", with(TrainMode::PlusDsct, &|c| c.weights.lambda3 = 1.0)),
        ("seg+saac", with(TrainMode::PlusSaac, &|c| c.weights.lambda4 = 1.0)),
        ("all, default weights", TrainConfig { mode: TrainMode::Cddsa, ..base.clone() }),
    ];
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    let mut parts = Vec::new();
    for (name, cfg) in &cases {
        let g = param_grad_agreement(&net, &batch, cfg, 6);
        worst = worst.max(g.worst);
        checked += g.checked;
        skipped += g.skipped;
        parts.push(format!("{name} {:.1e} ({}/{} on kinks)", g.worst, g.skipped, g.checked + g.skipped));
    }
    // a check that mostly skips would be vacuous
    let skip_share = skipped as f64 / (checked + skipped).max(1) as f64;
    verdict(
        worst < 1e-4 && skip_share < 0.5,
        format!(
            "max relative error {worst:.2e} (< 1e-4) over {checked} parameter probes, {:.0}% of candidates on kinks (< 50%) [{}]",
            100.0 * skip_share,
            parts.join(", ")
        ),
    )
}

// ---- 3 --------------------------------------------------------------------

fn c3_adain(_: &mut Shared) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, h, w) = (8, 32, 32);
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for _ in 0..10 {
        let offsets: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let scales: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..3.0)).collect();
        let f = Tensor::from_fn(&[c, h, w], |i| offsets[i / (h * w)] + scales[i / (h * w)] * rng.sample::<f64, _>(StandardNormal));
        let gamma: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
        let beta: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = adain(&f, &gamma, &beta, 1e-8).unwrap();
        for ch in 0..c {
            let vals = &y.data()[ch * h * w..(ch + 1) * h * w];
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            worst_mean = worst_mean.max((m - beta[ch]).abs());
            worst_std = worst_std.max((sd - gamma[ch]).abs());
        }
    }
    verdict(
        worst_mean < 1e-5 && worst_std < 1e-5,
        format!("max |mean - beta| = {worst_mean:.1e}, max |std - gamma| = {worst_std:.1e} (both < 1e-5)"),
    )
}

// ---- 4 --------------------------------------------------------------------

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let density = rng.random_range(0.0..0.8);
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(density)).collect()).unwrap()
}

fn c4_metrics(_: &mut Shared) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut dice_mismatch = 0;
    let mut assd_err: f64 = 0.0;
    let mut undefined_mismatch = 0;
    let mut doubling_mismatch = 0;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        if dice_score(&a, &b).unwrap() != common::brute_dice(&a, &b) {
            dice_mismatch += 1;
        }
        let spacing = (rng.random_range(0.3..2.0), rng.random_range(0.3..2.0));
        let got = assd(&a, &b, spacing).unwrap();
        match (got, common::brute_assd(&a, &b, spacing)) {
            (Some(x), Some(y)) => assd_err = assd_err.max((x - y).abs()),
            (None, None) => {}
            _ => undefined_mismatch += 1,
        }
        let doubled = assd(&a, &b, (2.0 * spacing.0, 2.0 * spacing.1)).unwrap();
        if doubled != got.map(|v| 2.0 * v) {
            doubling_mismatch += 1;
        }
    }
    verdict(
        dice_mismatch == 0 && undefined_mismatch == 0 && doubling_mismatch == 0 && assd_err < 1e-9,
        format!(
            "200 pairs: dice mismatches {dice_mismatch}, max |assd - brute| = {assd_err:.1e} (< 1e-9), \
             undefined-case mismatches {undefined_mismatch}, spacing-doubling mismatches {doubling_mismatch}"
        ),
    )
}

// ---- 5 --------------------------------------------------------------------

fn separation_after_training(mode: TrainMode, seed: u64) -> f64 {
    let ds = common::dataset::<f32>(64, 20, 10, seed);
    let setup = split_validation(&ds, &[0, 1, 2, 3], 0.1, seed);
    let cfg = TrainConfig { mode, epochs: 30, seed, ..TrainConfig::default() };
    let net = CddsaNet::<f32>::new(common::small_model(), seed).unwrap();
    let trained = fit(net, &ds, &setup, &cfg, &mut |_| {}).unwrap().net;
    let test: Vec<usize> = (0..4).flat_map(|d| ds.indices(d, Split::Test)).collect();
    let codes: Vec<Vec<f64>> = test
        .iter()
        .map(|&i| trained.encode_style(&ds.samples[i].image).unwrap().mean.iter().map(|v| v.as_f64()).collect())
        .collect();
    let domains: Vec<usize> = test.iter().map(|&i| ds.samples[i].domain_id).collect();
    style_separation(&codes, &domains).unwrap().gap()
}

fn c5_disentanglement(_: &mut Shared) -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let dsct = separation_after_training(TrainMode::PlusDsct, seed);
        let base = separation_after_training(TrainMode::BaselineSdnet, seed);
        let ok = dsct >= 0.2 && dsct > base;
        wins += usize::from(ok);
        parts.push(format!("seed {seed}: {dsct:.3} vs {base:.3}{}", if ok { "" } else { " (miss)" }));
    }
    verdict(wins >= 2, format!("intra-minus-inter cosine gap, plus_dsct vs baseline_sdnet: {}; {wins}/3 seeds meet gap >= 0.2 and > baseline", parts.join(", ")))
}

// ---- 6 --------------------------------------------------------------------

/// Inference-mode reconstruction MAE on 16 images after `steps` full-batch
/// updates.
fn overfit_reconstruction(activation: ActivationKind, steps: usize) -> f64 {
    let ds = common::dataset::<f32>(32, 4, 1, 6);
    let ids: Vec<usize> = (0..4).flat_map(|d| ds.indices(d, Split::Train)).collect();
    let batch = Batch::from_indices(&ds, &ids).unwrap();
    let model = ModelConfig { activation, ..common::small_model() };
    let mut net = CddsaNet::<f32>::new(model, 0).unwrap();
    let cfg = TrainConfig { mode: TrainMode::BaselineSdnet, per_domain_batch: 4, ..TrainConfig::default() };
    let mut adam = Adam::new(&net.store, cfg.lr_init);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..steps {
        train_step(&mut net, &mut adam, &batch, &cfg, &mut rng).unwrap();
    }
    let total: f64 = ids
        .iter()
        .map(|&i| {
            let x = &ds.samples[i].image;
            rec_loss(x, &net.reconstruct(x).unwrap()).unwrap().as_f64()
        })
        .sum();
    total / ids.len() as f64
}

fn c6_reconstruction(_: &mut Shared) -> Verdict {
    let steps = 2000;
    let tanh = overfit_reconstruction(ActivationKind::Tanh, steps);
    let hard = overfit_reconstruction(ActivationKind::GumbelHard, steps);
    verdict(
        tanh < 0.05 && hard > tanh,
        format!("reconstruction MAE on 16 images after {steps} steps: tanh {tanh:.4} (< 0.05), Gumbel-hard {hard:.4} (> tanh)"),
    )
}

// ---- 7 --------------------------------------------------------------------

const C7_SEEDS: u64 = 3;
const C7_EPOCHS: usize = 80;

/// Reconstruction-active weighting: at the default KL/reconstruction weights
/// the style posterior collapses on this data and the decoder cannot render
/// new styles, which leaves the augmentation without effect.
fn c7_config(mode: TrainMode, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { mode, epochs: C7_EPOCHS, seed, ..TrainConfig::default() };
    cfg.weights.lambda1 = 0.01;
    cfg.weights.lambda2 = 1.0;
    cfg
}

fn c7_data(seed: u64) -> cddsa::Dataset32 {
    common::dataset::<f32>(32, 20, 10, seed)
}

fn c7_generalisation(shared: &mut Shared) -> Verdict {
    let modes = [TrainMode::InterDomain, TrainMode::Cddsa, TrainMode::IntraDomain];
    let mut dice: Vec<Vec<f64>> = vec![Vec::new(); modes.len()];
    for seed in 0..C7_SEEDS {
        let ds = c7_data(seed);
        for (k, &mode) in modes.iter().enumerate() {
            let mut folds = run_lodo(&ds, &common::small_model(), &c7_config(mode, seed), None, (1.0, 1.0), None).unwrap();
            for f in &folds {
                dice[k].push(f.report.mean_dice());
                shared.audits.push((format!("{mode} seed {seed} fold {}", f.plan.held_out_domain), f.audit.passed()));
            }
            if mode == TrainMode::Cddsa && seed == 0 {
                shared.cddsa_fold = Some(folds.swap_remove(0));
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (inter, cddsa, intra) = (mean(&dice[0]), mean(&dice[1]), mean(&dice[2]));
    let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.1}")).collect::<Vec<_>>().join(" ");
    verdict(
        cddsa - inter >= 2.0 && intra > cddsa && intra > inter,
        format!(
            "mean held-out Dice over 4 folds x {C7_SEEDS} seeds: cddsa {cddsa:.2}, inter_domain {inter:.2} (need +2.00, got {:+.2}), \
             intra_domain {intra:.2} (must exceed both); per fold cddsa [{}] inter [{}] intra [{}]",
            cddsa - inter,
            fmt(&dice[1]),
            fmt(&dice[0]),
            fmt(&dice[2])
        ),
    )
}

// ---- 8 --------------------------------------------------------------------

fn c8_augmentation(shared: &mut Shared) -> Verdict {
    let fold = match shared.cddsa_fold.take() {
        Some(f) => f,
        None => run_lodo(&c7_data(0), &common::small_model(), &c7_config(TrainMode::Cddsa, 0), Some(&[0]), (1.0, 1.0), None)
            .unwrap()
            .remove(0),
    };
    let net = &fold.net;
    let train_ds = c7_data(0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // a bank shaped like one training batch: 8 sampled codes per source domain
    let mut styles = Vec::new();
    for &d in &fold.plan.train_domains {
        for &i in train_ds.indices(d, Split::Train).iter().take(8) {
            let dist = net.encode_style(&train_ds.samples[i].image).unwrap();
            styles.push((sample_style(&dist, SampleMode::Reparameterized, &mut rng).unwrap(), d));
        }
    }
    let bank = collect_bank(styles).unwrap();
    let cases = common::dataset::<f32>(32, 1, 13, 808);
    let ids: Vec<usize> = (0..4).flat_map(|d| cases.indices(d, Split::Test)).take(50).collect();
    let mut scores = Vec::with_capacity(ids.len());
    for &i in &ids {
        let x = &cases.samples[i].image;
        let anatomy = net.encode_anatomy(x).unwrap();
        let reference = argmax_labels(&net.segment(&anatomy).unwrap());
        let style = augment_linear(&bank, &mut rng);
        let x_aug = synthesize_augmented(net, &anatomy, &style).unwrap();
        let again = argmax_labels(&net.segment(&net.encode_anatomy(&x_aug).unwrap()).unwrap());
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let rows = evaluate_case("aug", 0, &again, &reference, h, w, net.config.num_classes, (1.0, 1.0)).unwrap();
        scores.push(rows.iter().map(|r| r.dice_percent).sum::<f64>() / rows.len() as f64);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let worst = scores.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        mean >= 95.0,
        format!(
            "{} cases, Dice of segmentation after vs before a random linear style swap: mean {mean:.2} (>= 95), worst case {worst:.2}",
            scores.len()
        ),
    )
}

// ---- 9 --------------------------------------------------------------------

fn c9_protocol(shared: &mut Shared) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;

    // held-out hygiene on a short run of every fold
    let ds = common::dataset::<f32>(16, 4, 2, 9);
    let cfg = TrainConfig { mode: TrainMode::Cddsa, epochs: 1, per_domain_batch: 2, ..TrainConfig::default() };
    match run_lodo(&ds, &common::toy_model(), &cfg, None, (1.0, 1.0), None) {
        Ok(folds) => {
            for f in &folds {
                let clean = f.audit.passed() && !f.audit.train_domains.contains(&f.plan.held_out_domain) && f.audit.samples_used > 0;
                ok &= clean;
            }
            notes.push(format!("{} folds audited clean", folds.len()));
        }
        Err(e) => {
            ok = false;
            notes.push(format!("lodo run failed: {e}"));
        }
    }
    let extra_clean = shared.audits.iter().all(|(_, c)| *c);
    ok &= extra_clean;
    if !shared.audits.is_empty() {
        notes.push(format!("{} training-criterion folds audited, all clean: {extra_clean}", shared.audits.len()));
    }

    // contrastive pairing counts
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (d, b) in [(3usize, 2usize), (3, 8), (4, 5)] {
        let domains: Vec<usize> = (0..d).flat_map(|k| std::iter::repeat_n(k, b)).collect();
        let cb = build_contrastive_pairs(&domains, b, 0.1, false, &mut rng).unwrap();
        let counts_ok = cb.anchors.len() == b * d
            && cb.negatives.iter().all(|n| n.len() == b * (d - 1))
            && cb.anchors.iter().zip(&cb.positives).all(|(&a, &p)| domains[a] == domains[p]);
        ok &= counts_ok;
        notes.push(format!("D={d} b={b}: {} negatives per anchor", cb.negatives[0].len()));
    }

    // learning-rate decay after 8 stagnant epochs
    let mut sched = PlateauScheduler::new(1e-3, 0.95, 8);
    let lrs: Vec<f64> = (0..10).map(|_| sched.step(0.5)).collect();
    let decay_ok = lrs[..8].iter().all(|&l| l == 1e-3) && (lrs[8] - 9.5e-4).abs() < 1e-15;
    ok &= decay_ok;
    notes.push(format!("lr after 8 stagnant epochs {:.3e} -> {:.3e}", lrs[0], lrs[8]));

    // Adam built from a fresh store starts at the configured rate
    let net = CddsaNet::<f32>::new(common::toy_model(), 0).unwrap();
    ok &= Adam::new(&net.store, 1e-3).lr == 1e-3;
    verdict(ok, notes.join("; "))
}
