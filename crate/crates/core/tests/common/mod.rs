//! Shared fixtures and brute-force reference implementations for the
//! integration tests.
#![allow(dead_code)]

use cddsa::datagen::{build_dataset, GeneratorConfig, MultiDomainDataset};
use cddsa::metrics::BinaryMask;
use cddsa::model::ModelConfig;

/// Minimal network: anatomy width 4, style dimension 4.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        anatomy_channels: 4,
        style_dim: 4,
        unet_channels: vec![4, 4, 4, 4, 4],
        style_channels: vec![4, 4],
        decoder_channels: vec![4, 4, 4],
        segmentor_hidden: 4,
        ..ModelConfig::default()
    }
}

/// Reduced-width network used by the training experiments.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        unet_channels: vec![8, 16, 32, 32, 32],
        style_channels: vec![8, 16, 32, 32],
        decoder_channels: vec![16, 16, 16],
        segmentor_hidden: 8,
        ..ModelConfig::default()
    }
}

pub fn dataset<T: cddsa::Scalar>(size: usize, train: usize, test: usize, seed: u64) -> MultiDomainDataset<T> {
    let g = GeneratorConfig { train_per_domain: train, test_per_domain: test, image_size: size, seed, ..GeneratorConfig::default() };
    build_dataset(&g, true).expect("generator config is valid")
}

/// Foreground pixels with a background 4-neighbour or on the image border.
pub fn brute_surface(m: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height, m.width);
    let on = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && m.data[r as usize * w + c as usize];
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if on(r, c) && !(on(r - 1, c) && on(r + 1, c) && on(r, c - 1) && on(r, c + 1)) {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

/// O(n²) average symmetric surface distance.
pub fn brute_assd(a: &BinaryMask, b: &BinaryMask, spacing: (f64, f64)) -> Option<f64> {
    let (sa, sb) = (brute_surface(a), brute_surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let nearest = |p: &(usize, usize), set: &[(usize, usize)]| {
        set.iter()
            .map(|q| {
                let dr = (p.0 as f64 - q.0 as f64) * spacing.0;
                let dc = (p.1 as f64 - q.1 as f64) * spacing.1;
                (dr * dr + dc * dc).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let total: f64 = sa.iter().map(|p| nearest(p, &sb)).sum::<f64>() + sb.iter().map(|p| nearest(p, &sa)).sum::<f64>();
    Some(total / (sa.len() + sb.len()) as f64)
}

pub fn brute_dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let mut inter = 0u64;
    let mut total = 0u64;
    for (x, y) in a.data.iter().zip(&b.data) {
        inter += u64::from(*x && *y);
        total += u64::from(*x) + u64::from(*y);
    }
    if total == 0 {
        100.0
    } else {
        (2 * inter) as f64 * 100.0 / total as f64
    }
}

/// Closed-form KL(N(u, v) || N(0, 1)) of one dimension via log σ.
pub fn gaussian_kl(u: f64, v: f64) -> f64 {
    let sigma = v.sqrt();
    -sigma.ln() + (v + u * u) / 2.0 - 0.5
}
