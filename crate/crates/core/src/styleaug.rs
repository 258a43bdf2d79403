//! Style code bank and synthesis of novel style codes.

use cddsa_autograd::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};

use crate::error::{CddsaError, Result};
use crate::model::{AnatomicalRepresentation, CddsaNet, StyleCode, StyleProvenance};

/// Style codes of one batch with their domain labels, in batch order.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCodeBank<T> {
    codes: Vec<StyleCode<T>>,
    domains: Vec<usize>,
}

impl<T: Scalar> StyleCodeBank<T> {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[StyleCode<T>] {
        &self.codes
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    pub fn style_dim(&self) -> usize {
        self.codes[0].z.len()
    }
}

pub fn collect_bank<T: Scalar>(styles: Vec<(StyleCode<T>, usize)>) -> Result<StyleCodeBank<T>> {
    let Some(first) = styles.first() else {
        return Err(CddsaError::Validation("style code bank needs at least one code".into()));
    };
    let z = first.0.z.len();
    if z == 0 || styles.iter().any(|(c, _)| c.z.len() != z) {
        return Err(CddsaError::Shape("style codes in a bank must share a non-zero length".into()));
    }
    let (codes, domains) = styles.into_iter().unzip();
    Ok(StyleCodeBank { codes, domains })
}

/// Weights `α_i ~ U[-1, 1]`, one per bank entry.
pub fn draw_alphas<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid bounds");
    (0..n).map(|_| rng.sample(u)).collect()
}

/// `Σ α_i F_i` with explicit weights. No normalisation is applied.
pub fn combine<T: Scalar>(bank: &StyleCodeBank<T>, alphas: &[f64]) -> Result<StyleCode<T>> {
    if alphas.len() != bank.len() {
        return Err(CddsaError::Shape(format!("{} weights for a bank of {}", alphas.len(), bank.len())));
    }
    let mut z = vec![T::zero(); bank.style_dim()];
    for (code, &a) in bank.codes.iter().zip(alphas) {
        let a = T::of(a);
        for (acc, &v) in z.iter_mut().zip(&code.z) {
            *acc += a * v;
        }
    }
    Ok(StyleCode { z, provenance: StyleProvenance::AugmentedLinear })
}

/// Random linear combination of the bank.
pub fn augment_linear<T: Scalar, R: Rng + ?Sized>(bank: &StyleCodeBank<T>, rng: &mut R) -> StyleCode<T> {
    let alphas = draw_alphas(bank.len(), rng);
    combine(bank, &alphas).expect("one weight per bank entry")
}

/// `z ~ N(0, I_Z)`.
pub fn augment_gaussian<T: Scalar, R: Rng + ?Sized>(z: usize, rng: &mut R) -> Result<StyleCode<T>> {
    if z == 0 {
        return Err(CddsaError::Validation("style dimension must be at least 1".into()));
    }
    let z = (0..z).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
    Ok(StyleCode { z, provenance: StyleProvenance::AugmentedGaussian })
}

/// Repaints `anatomy` with `style` through the decoder.
pub fn synthesize_augmented<T: Scalar>(
    net: &CddsaNet<T>,
    anatomy: &AnatomicalRepresentation<T>,
    style: &StyleCode<T>,
) -> Result<Tensor<T>> {
    net.decode(style, anatomy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn code(z: Vec<f64>) -> StyleCode<f64> {
        StyleCode { z, provenance: StyleProvenance::Sampled }
    }

    #[test]
    fn bank_round_trip() {
        let styles: Vec<_> = (0..24).map(|i| (code(vec![i as f64, 1.0]), i / 8)).collect();
        let bank = collect_bank(styles.clone()).unwrap();
        assert_eq!(bank.len(), 24);
        for (i, (c, d)) in styles.iter().enumerate() {
            assert_eq!(&bank.codes()[i], c);
            assert_eq!(bank.domains()[i], *d);
        }
        assert_eq!(collect_bank(vec![(code(vec![1.0]), 0)]).unwrap().len(), 1);
        assert!(collect_bank::<f64>(vec![]).is_err());
    }

    #[test]
    fn forced_weights() {
        let f = vec![1.0, -2.0, 0.5];
        let g = vec![3.0, 0.0, -1.0];
        let one = collect_bank(vec![(code(f.clone()), 0)]).unwrap();
        assert_eq!(combine(&one, &[1.0]).unwrap().z, f);
        assert_eq!(combine(&one, &[-1.0]).unwrap().z, vec![-1.0, 2.0, -0.5]);
        let two = collect_bank(vec![(code(f.clone()), 0), (code(g.clone()), 1)]).unwrap();
        let mid = combine(&two, &[0.5, 0.5]).unwrap();
        assert_eq!(mid.z, vec![2.0, -1.0, -0.25]);
        assert_eq!(mid.provenance, StyleProvenance::AugmentedLinear);
        assert_eq!(combine(&two, &[0.0, 1.0]).unwrap().z, g);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let draws: Vec<StyleCode<f64>> = (0..n).map(|_| augment_gaussian(4, &mut rng).unwrap()).collect();
        for j in 0..4 {
            let m = draws.iter().map(|d| d.z[j]).sum::<f64>() / n as f64;
            let v = draws.iter().map(|d| (d.z[j] - m).powi(2)).sum::<f64>() / n as f64;
            assert!(m.abs() < 0.04);
            assert!((v - 1.0).abs() < 0.05);
        }
        let a: StyleCode<f64> = augment_gaussian(4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, augment_gaussian(4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap());
        assert!(augment_gaussian::<f64, _>(0, &mut rng).is_err());
    }
}
