//! Training objectives, at graph level (on [`Var`]s, differentiable) and at
//! value level (on plain tensors, for evaluation and tests).

use cddsa_autograd::{Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CddsaError, Result};

/// Smoothing constant in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Added to style-code norms before the cosine similarity.
pub const NORM_GUARD: f64 = 1e-12;
/// Probabilities are floored here before the log in the cross entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// KL weight.
    pub lambda1: f64,
    /// Reconstruction weight.
    pub lambda2: f64,
    /// Domain-style contrastive weight.
    pub lambda3: f64,
    /// Anatomical consistency weight.
    pub lambda4: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 0.001, lambda3: 0.01, lambda4: 1.0, tau: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(CddsaError::Config(format!("loss weights must be finite and non-negative: {ws:?}")));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CddsaError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Loss terms of one step. Inactive terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub seg: f64,
    pub kl: f64,
    pub rec: f64,
    pub dsct: f64,
    pub saac: f64,
}

/// `seg + λ1 kl + λ2 rec + λ3 dsct + λ4 saac`, rejecting non-finite terms.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (term, value) in [("seg", c.seg), ("kl", c.kl), ("rec", c.rec), ("dsct", c.dsct), ("saac", c.saac)] {
        if !value.is_finite() {
            return Err(CddsaError::NonFinite { term, value });
        }
    }
    Ok(c.seg + w.lambda1 * c.kl + w.lambda2 * c.rec + w.lambda3 * c.dsct + w.lambda4 * c.saac)
}

/// One-hot encoding `(N, K, H, W)` of `N` label maps stored back to back.
pub fn one_hot<T: Scalar>(labels: &[u8], n: usize, k: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(CddsaError::Shape(format!("{} labels for {n} maps of {h}x{w}", labels.len())));
    }
    let mut out = Tensor::zeros(&[n, k, h, w]);
    let d = out.data_mut();
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= k {
            return Err(CddsaError::Validation(format!("label {l} is not below the class count {k}")));
        }
        let (s, p) = (i / hw, i % hw);
        d[(s * k + l) * hw + p] = T::one();
    }
    Ok(out)
}

fn check_probs(p: &[usize], y: &[usize]) -> Result<()> {
    if p.len() != 4 || p != y {
        return Err(CddsaError::Shape(format!("probabilities {p:?} and one-hot targets {y:?} must be equal (N,K,H,W)")));
    }
    if p[1] < 2 {
        return Err(CddsaError::Shape("need at least two classes".into()));
    }
    Ok(())
}

/// Per-sample soft Dice loss `(N,)` averaged over the foreground classes.
pub fn dice_loss_graph<'t, T: Scalar>(p: Var<'t, T>, y: &Tensor<T>) -> Result<Var<'t, T>> {
    let shape = p.shape();
    check_probs(&shape, y.shape())?;
    let (n, k) = (shape[0], shape[1]);
    let y = p.tape().constant(y.clone());
    let s = T::of(DICE_SMOOTH);
    let inter = p.try_mul(y)?.sum_axes(&[2, 3]);
    let denom = p.sum_axes(&[2, 3]).try_add(y.sum_axes(&[2, 3]))?.add_scalar(s);
    let ratio = inter.scale(T::of(2.0)).add_scalar(s).try_div(denom)?;
    let fg = ratio.narrow(1, 1, k - 1)?.reshape(&[n, k - 1])?;
    Ok(fg.mean_axes(&[1]).reshape(&[n])?.neg().add_scalar(T::one()))
}

/// Per-sample pixel-mean cross entropy `(N,)`.
pub fn ce_loss_graph<'t, T: Scalar>(p: Var<'t, T>, y: &Tensor<T>) -> Result<Var<'t, T>> {
    let shape = p.shape();
    check_probs(&shape, y.shape())?;
    let n = shape[0];
    let y = p.tape().constant(y.clone());
    let picked = p.try_mul(y)?.sum_axes(&[1]).clamp(T::of(PROB_FLOOR), T::one());
    Ok(picked.ln().mean_axes(&[1, 2, 3]).reshape(&[n])?.neg())
}

/// `0.5 · mean_n (dice_n + ce_n)`.
pub fn seg_loss_graph<'t, T: Scalar>(p: Var<'t, T>, y: &Tensor<T>) -> Result<Var<'t, T>> {
    if p.shape().first() == Some(&0) {
        return Err(CddsaError::Validation("segmentation loss of an empty batch".into()));
    }
    let d = dice_loss_graph(p, y)?;
    let c = ce_loss_graph(p, y)?;
    Ok(d.try_add(c)?.mean().scale(T::of(0.5)))
}

/// Batch mean of the Gaussian KL to `N(0, I)` given `(N, Z)` mean and log-variance.
pub fn kl_loss_graph<'t, T: Scalar>(mean: Var<'t, T>, logvar: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = mean.shape()[0];
    let per = mean.square().try_add(logvar.exp())?.try_sub(logvar)?.add_scalar(-T::one());
    Ok(per.sum().scale(T::of(0.5) / T::of_usize(n)))
}

/// Mean absolute difference over all elements.
pub fn mean_abs_graph<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(CddsaError::Shape(format!("mean-abs of {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(a.try_sub(b)?.abs().mean())
}

/// Anchor/positive/negative index structure over a list of style codes.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub domains: Vec<usize>,
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
    pub tau: f64,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<()> {
        let m = self.domains.len();
        if self.anchors.len() != self.positives.len() || self.anchors.len() != self.negatives.len() || self.anchors.is_empty() {
            return Err(CddsaError::Validation("anchor, positive and negative lists must align and be non-empty".into()));
        }
        let width = self.negatives[0].len();
        for ((&a, &p), negs) in self.anchors.iter().zip(&self.positives).zip(&self.negatives) {
            if a >= m || p >= m || negs.iter().any(|&n| n >= m) {
                return Err(CddsaError::Validation("contrastive index out of range".into()));
            }
            if self.domains[p] != self.domains[a] {
                return Err(CddsaError::Validation(format!("positive {p} is not in the domain of anchor {a}")));
            }
            if negs.is_empty() || negs.len() != width || negs.iter().any(|&n| self.domains[n] == self.domains[a]) {
                return Err(CddsaError::Validation(format!("negatives of anchor {a} must be {width} other-domain codes")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(CddsaError::Validation("tau must be positive".into()));
        }
        Ok(())
    }

    /// Flat indices into the `M×M` similarity matrix, one row
    /// `[positive, negatives...]` per anchor.
    fn logit_indices(&self) -> (Vec<usize>, usize) {
        let m = self.domains.len();
        let width = 1 + self.negatives[0].len();
        let mut idx = Vec::with_capacity(self.anchors.len() * width);
        for ((&a, &p), negs) in self.anchors.iter().zip(&self.positives).zip(&self.negatives) {
            idx.push(a * m + p);
            idx.extend(negs.iter().map(|&n| a * m + n));
        }
        (idx, width)
    }
}

/// Pairs `b` codes per domain: every code is an anchor, its positive is its
/// image under a random within-domain permutation, and its negatives are all
/// `b(D-1)` codes of the other domains. `domains[i]` labels code `i`.
pub fn build_contrastive_pairs<R: Rng + ?Sized>(
    domains: &[usize],
    b: usize,
    tau: f64,
    derangement: bool,
    rng: &mut R,
) -> Result<ContrastiveBatch> {
    let mut ids: Vec<usize> = domains.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(CddsaError::Config("contrastive pairing needs at least two domains".into()));
    }
    let members: Vec<Vec<usize>> = ids.iter().map(|&d| (0..domains.len()).filter(|&i| domains[i] == d).collect()).collect();
    if members.iter().any(|m| m.len() != b) || b == 0 {
        let counts: Vec<usize> = members.iter().map(Vec::len).collect();
        return Err(CddsaError::Validation(format!("expected exactly {b} codes per domain, got {counts:?}")));
    }
    if derangement && b < 2 {
        return Err(CddsaError::Config("a derangement needs at least two codes per domain".into()));
    }
    let mut positive = vec![0; domains.len()];
    for m in &members {
        let mut perm = m.clone();
        loop {
            perm.shuffle(rng);
            if !derangement || perm.iter().zip(m).all(|(p, a)| p != a) {
                break;
            }
        }
        for (&a, &p) in m.iter().zip(&perm) {
            positive[a] = p;
        }
    }
    let anchors: Vec<usize> = (0..domains.len()).collect();
    let negatives = anchors.iter().map(|&a| (0..domains.len()).filter(|&n| domains[n] != domains[a]).collect()).collect();
    let cb = ContrastiveBatch { domains: domains.to_vec(), anchors, positives: positive, negatives, tau };
    cb.validate()?;
    Ok(cb)
}

/// Mean over anchors of the InfoNCE loss on cosine similarities of the rows of `codes` `(M, Z)`.
pub fn dsct_loss_graph<'t, T: Scalar>(codes: Var<'t, T>, cb: &ContrastiveBatch) -> Result<Var<'t, T>> {
    cb.validate()?;
    let shape = codes.shape();
    if shape.len() != 2 || shape[0] != cb.domains.len() {
        return Err(CddsaError::Shape(format!("codes {shape:?} for {} labelled entries", cb.domains.len())));
    }
    let norms = codes.square().sum_axes(&[1]).sqrt();
    if norms.value().data().iter().any(|&v| v == T::zero()) {
        return Err(CddsaError::Validation("zero-norm style code in contrastive loss".into()));
    }
    let unit = codes.try_div(norms.add_scalar(T::of(NORM_GUARD)))?;
    let sims = unit.matmul_t(unit, false, true)?.scale(T::one() / T::of(cb.tau));
    let (idx, width) = cb.logit_indices();
    let logits = sims.gather(&idx, &[cb.anchors.len(), width])?;
    let positive = logits.narrow(1, 0, 1)?;
    Ok(logits.logsumexp(1).try_sub(positive)?.mean())
}

// Value-level wrappers.

fn labels_to_onehot<T: Scalar>(p: &Tensor<T>, labels: &[u8]) -> Result<Tensor<T>> {
    if p.rank() != 3 {
        return Err(CddsaError::Shape(format!("expected (K,H,W) probabilities, got {:?}", p.shape())));
    }
    one_hot(labels, 1, p.dim(0), p.dim(1), p.dim(2))
}

fn eval_single<T: Scalar>(
    p: &Tensor<T>,
    labels: &[u8],
    f: impl for<'t> Fn(Var<'t, T>, &Tensor<T>) -> Result<Var<'t, T>>,
) -> Result<T> {
    let y = labels_to_onehot(p, labels)?;
    let tape = Tape::new();
    let mut shape = vec![1];
    shape.extend_from_slice(p.shape());
    let pv = tape.constant(p.clone().reshape(&shape)?);
    Ok(f(pv, &y)?.value().data()[0])
}

/// Soft Dice loss of one `(K, H, W)` probability map against row-major labels.
pub fn dice_loss<T: Scalar>(p: &Tensor<T>, labels: &[u8]) -> Result<T> {
    eval_single(p, labels, dice_loss_graph)
}

pub fn ce_loss<T: Scalar>(p: &Tensor<T>, labels: &[u8]) -> Result<T> {
    eval_single(p, labels, ce_loss_graph)
}

/// Hybrid loss of a batch given as `(N, K, H, W)` probabilities and `N·H·W` labels.
pub fn seg_loss<T: Scalar>(p: &Tensor<T>, labels: &[u8]) -> Result<T> {
    if p.rank() != 4 {
        return Err(CddsaError::Shape(format!("expected (N,K,H,W) probabilities, got {:?}", p.shape())));
    }
    let s = p.shape();
    let y = one_hot(labels, s[0], s[1], s[2], s[3])?;
    let tape = Tape::new();
    Ok(seg_loss_graph(tape.constant(p.clone()), &y)?.item())
}

/// `Σ_z 0.5 (u² + v − ln v − 1)`.
pub fn kl_loss<T: Scalar>(dist: &crate::model::StyleDistribution<T>) -> Result<T> {
    dist.validate()?;
    let half = T::of(0.5);
    Ok(dist.mean.iter().zip(&dist.variance).map(|(&u, &v)| half * (u * u + v - v.ln() - T::one())).sum())
}

fn mean_abs<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    let tape = Tape::new();
    Ok(mean_abs_graph(tape.constant(a.clone()), tape.constant(b.clone()))?.item())
}

pub fn rec_loss<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<T> {
    mean_abs(x, x_hat)
}

pub fn saac_loss<T: Scalar>(
    anatomy: &crate::model::AnatomicalRepresentation<T>,
    reencoded: &crate::model::AnatomicalRepresentation<T>,
) -> Result<T> {
    mean_abs(&anatomy.tensor, &reencoded.tensor)
}

/// Contrastive loss of style vectors (one per entry of `cb.domains`).
pub fn dsct_loss<T: Scalar>(codes: &[Vec<T>], cb: &ContrastiveBatch) -> Result<T> {
    let z = codes.first().map_or(0, Vec::len);
    if codes.iter().any(|c| c.len() != z) || z == 0 {
        return Err(CddsaError::Shape("style codes must share a non-zero length".into()));
    }
    let flat: Vec<T> = codes.iter().flatten().copied().collect();
    let tape = Tape::new();
    let v = tape.constant(Tensor::from_vec(&[codes.len(), z], flat)?);
    Ok(dsct_loss_graph(v, cb)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StyleDistribution;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs_from_onehot(labels: &[u8], k: usize, h: usize, w: usize) -> Tensor<f64> {
        let t: Tensor<f64> = one_hot(labels, 1, k, h, w).unwrap();
        t.reshape(&[k, h, w]).unwrap()
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let labels = [0u8, 1, 1, 0, 2, 2, 1, 0, 0];
        let p = probs_from_onehot(&labels, 3, 3, 3);
        assert!(dice_loss(&p, &labels).unwrap().abs() < 1e-5);
        let wrong: Vec<u8> = labels.iter().map(|&l| (l + 1) % 3).collect();
        let q = probs_from_onehot(&wrong, 3, 3, 3);
        assert!((dice_loss(&q, &labels).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn dice_half_probability_binary() {
        let labels = [1u8; 16];
        let p = Tensor::full(&[2, 4, 4], 0.5);
        let expect = 1.0 - (2.0 * 8.0 + DICE_SMOOTH) / (8.0 + 16.0 + DICE_SMOOTH);
        assert!((dice_loss(&p, &labels).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn ce_values() {
        let labels = [0u8, 1, 1, 0];
        assert!(ce_loss(&probs_from_onehot(&labels, 2, 2, 2), &labels).unwrap().abs() < 1e-12);
        let u = Tensor::full(&[4, 2, 2], 0.25);
        assert!((ce_loss(&u, &labels).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let p = Tensor::full(&[2, 1, 2], 0.5f64);
        assert!(matches!(dice_loss(&p, &[0, 2]), Err(CddsaError::Validation(_))));
        assert!(ce_loss(&p, &[0, 5]).is_err());
    }

    #[test]
    fn seg_loss_batch_invariance() {
        let p1 = Tensor::full(&[2, 4, 4], 0.5);
        let labels = [1u8; 16];
        let single = seg_loss(&p1.clone().reshape(&[1, 2, 4, 4]).unwrap(), &labels).unwrap();
        let expect = 0.5 * (dice_loss(&p1, &labels).unwrap() + 2f64.ln());
        assert!((single - expect).abs() < 1e-12);
        assert!((single - 0.5132).abs() < 1e-4);
        let batch = Tensor::stack(&[p1.clone(), p1.clone(), p1]).unwrap();
        let l3: Vec<u8> = labels.iter().cycle().take(48).copied().collect();
        assert!((seg_loss(&batch, &l3).unwrap() - single).abs() < 1e-12);
        assert!(seg_loss(&Tensor::<f64>::zeros(&[0, 2, 4, 4]), &[]).is_err());
    }

    #[test]
    fn kl_closed_form_cases() {
        let d = |u: f64, v: f64| kl_loss(&StyleDistribution { mean: vec![u], variance: vec![v] }).unwrap();
        assert_eq!(d(0.0, 1.0), 0.0);
        assert!((d(1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((d(0.0, std::f64::consts::E) - 0.359_140_914_229_522_6).abs() < 1e-12);
        assert!(kl_loss(&StyleDistribution { mean: vec![0.0], variance: vec![-1.0] }).is_err());
    }

    #[test]
    fn kl_graph_matches_value_level() {
        let tape = Tape::new();
        let u = tape.constant(Tensor::from_vec(&[2, 2], vec![0.3, -0.2, 1.0, 0.0]).unwrap());
        let lv = tape.constant(Tensor::from_vec(&[2, 2], vec![0.1, -0.5, 0.0, 1.0]).unwrap());
        let g = kl_loss_graph(u, lv).unwrap().item();
        let mut total = 0.0;
        for r in 0..2 {
            let mean = u.value().data()[r * 2..r * 2 + 2].to_vec();
            let variance = lv.value().data()[r * 2..r * 2 + 2].iter().map(|l: &f64| l.exp()).collect();
            total += kl_loss(&StyleDistribution { mean, variance }).unwrap();
        }
        assert!((g - total / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mean_abs_offset() {
        let x = Tensor::full(&[2, 3], 0.4f64);
        assert_eq!(rec_loss(&x, &x).unwrap(), 0.0);
        assert!((rec_loss(&x, &x.map(|v| v + 0.1)).unwrap() - 0.1).abs() < 1e-12);
        assert!(rec_loss(&x, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn contrastive_counts() {
        let domains: Vec<usize> = (0..3).flat_map(|d| [d, d]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = build_contrastive_pairs(&domains, 2, 0.1, false, &mut rng).unwrap();
        assert_eq!(cb.anchors.len(), 6);
        for (a, negs) in cb.anchors.iter().zip(&cb.negatives) {
            assert_eq!(negs.len(), 4);
            assert_eq!(domains[cb.positives[*a]], domains[*a]);
        }
        assert!(build_contrastive_pairs(&[0, 0], 2, 0.1, false, &mut rng).is_err());
        assert!(build_contrastive_pairs(&[0, 0, 1], 2, 0.1, false, &mut rng).is_err());
        let der = build_contrastive_pairs(&domains, 2, 0.1, true, &mut rng).unwrap();
        assert!(der.anchors.iter().zip(&der.positives).all(|(a, p)| a != p));
    }

    fn manual(anchor: usize, positive: usize, negatives: Vec<usize>, domains: Vec<usize>) -> ContrastiveBatch {
        ContrastiveBatch { domains, anchors: vec![anchor], positives: vec![positive], negatives: vec![negatives], tau: 0.1 }
    }

    #[test]
    fn dsct_worked_cases() {
        let codes = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 3.0]];
        let cb = manual(0, 1, vec![2], vec![0, 0, 1]);
        let expect = (1.0 + (-10f64).exp()).ln();
        assert!((dsct_loss(&codes, &cb).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 4.54e-5).abs() < 1e-7);

        let codes = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -2.0]];
        let cb = manual(0, 1, vec![2], vec![0, 0, 1]);
        assert!((dsct_loss(&codes, &cb).unwrap() - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn dsct_zero_norm_rejected() {
        let codes = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(dsct_loss(&codes, &manual(0, 1, vec![2], vec![0, 0, 1])).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        let ones = LossComponents { seg: 1.0, kl: 1.0, rec: 1.0, dsct: 1.0, saac: 1.0 };
        assert!((total_loss(&ones, &w).unwrap() - 3.011).abs() < 1e-12);
        assert_eq!(total_loss(&LossComponents::default(), &w).unwrap(), 0.0);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0, tau: 0.1 };
        assert_eq!(total_loss(&LossComponents { seg: 0.7, ..ones }, &zero).unwrap(), 0.7);
        let bad = LossComponents { rec: f64::NAN, ..ones };
        assert!(matches!(total_loss(&bad, &w), Err(CddsaError::NonFinite { term: "rec", .. })));
    }
}
