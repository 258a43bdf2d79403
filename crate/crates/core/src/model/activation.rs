use cddsa_autograd::{Scalar, Tensor, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{CddsaError, Result};

/// Final activation of the anatomy encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    /// Soft values in `[-1, 1]`.
    Tanh,
    /// Per-pixel distribution over the `T` channels.
    Softmax,
    /// Straight-through one-hot Gumbel-softmax sample.
    GumbelHard,
    /// Relaxed Gumbel-softmax sample.
    GumbelSoft,
}

impl std::str::FromStr for ActivationKind {
    type Err = CddsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(ActivationKind::Tanh),
            "softmax" => Ok(ActivationKind::Softmax),
            "gumbel_hard" | "gumbel-h" => Ok(ActivationKind::GumbelHard),
            "gumbel_soft" | "gumbel-s" => Ok(ActivationKind::GumbelSoft),
            other => Err(CddsaError::Config(format!("unknown activation kind `{other}`"))),
        }
    }
}

impl ActivationKind {
    pub fn is_gumbel(self) -> bool {
        matches!(self, ActivationKind::GumbelHard | ActivationKind::GumbelSoft)
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Tanh => "tanh",
            ActivationKind::Softmax => "softmax",
            ActivationKind::GumbelHard => "gumbel_hard",
            ActivationKind::GumbelSoft => "gumbel_soft",
        }
    }
}

/// One-hot of the per-pixel argmax over axis 1 of an NCHW tensor.
pub fn one_hot_argmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let mut out = Tensor::zeros(x.shape());
    let (od, xd) = (out.data_mut(), x.data());
    for b in 0..n {
        for i in 0..hw {
            let at = |k: usize| (b * c + k) * hw + i;
            let best = (0..c).fold(0, |best, k| if xd[at(k)] > xd[at(best)] { k } else { best });
            od[at(best)] = T::one();
        }
    }
    out
}

/// Applies `kind` over the channel axis of NCHW `logits`. Gumbel noise is
/// drawn from `noise` when given; without it the Gumbel kinds reduce to the
/// noiseless tempered softmax (and its argmax for the hard kind).
pub fn anatomy_activation<'t, T: Scalar>(
    logits: Var<'t, T>,
    kind: ActivationKind,
    temperature: f64,
    noise: Option<&mut dyn RngCore>,
) -> Result<Var<'t, T>> {
    if logits.shape().len() != 4 {
        return Err(CddsaError::Shape("anatomy activation expects NCHW logits".into()));
    }
    match kind {
        ActivationKind::Tanh => Ok(logits.tanh()),
        ActivationKind::Softmax => Ok(logits.softmax(1)),
        ActivationKind::GumbelHard | ActivationKind::GumbelSoft => {
            if !(temperature > 0.0) {
                return Err(CddsaError::Config("gumbel temperature must be positive".into()));
            }
            let perturbed = match noise {
                Some(rng) => {
                    let shape = logits.shape();
                    let g = Tensor::from_fn(&shape, |_| {
                        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                        T::of(-(-u.ln()).ln())
                    });
                    logits + logits.tape().constant(g)
                }
                None => logits,
            };
            let soft = perturbed.scale(T::of(1.0 / temperature)).softmax(1);
            if kind == ActivationKind::GumbelHard {
                let hard = one_hot_argmax(&soft.value());
                Ok(soft.straight_through(hard)?)
            } else {
                Ok(soft)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cddsa_autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits(tape: &Tape<f64>, seed: u64) -> Var<'_, f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tape.constant(Tensor::from_fn(&[2, 8, 5, 5], |_| rng.random_range(-3.0..3.0)))
    }

    #[test]
    fn equal_logits_softmax_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 8, 3, 3], 0.7));
        let y = anatomy_activation(x, ActivationKind::Softmax, 1.0, None).unwrap().value();
        assert!(y.data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let y = anatomy_activation(x, ActivationKind::Tanh, 1.0, None).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gumbel_hard_is_one_hot() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = anatomy_activation(logits(&tape, 1), ActivationKind::GumbelHard, 0.5, Some(&mut rng)).unwrap().value();
        for b in 0..2 {
            for i in 0..25 {
                let col: Vec<f64> = (0..8).map(|k| y.data()[(b * 8 + k) * 25 + i]).collect();
                assert_eq!(col.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(col.iter().filter(|&&v| v == 0.0).count(), 7);
            }
        }
    }

    #[test]
    fn gumbel_soft_low_temperature_concentrates() {
        // oracle: argmax of the perturbed logits, recomputed from the same noise stream
        let tape = Tape::<f64>::new();
        let x = logits(&tape, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = anatomy_activation(x, ActivationKind::GumbelSoft, 0.01, Some(&mut rng)).unwrap().value();
        let mut replay = ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<f64> = (0..x.value().len())
            .map(|_| {
                let u: f64 = replay.random_range(f64::MIN_POSITIVE..1.0);
                -(-u.ln()).ln()
            })
            .collect();
        let xv = x.value();
        let mut mass = 0.0;
        for b in 0..2 {
            for i in 0..25 {
                let at = |k: usize| (b * 8 + k) * 25 + i;
                let arg = (0..8).max_by(|&p, &q| (xv.data()[at(p)] + noise[at(p)]).total_cmp(&(xv.data()[at(q)] + noise[at(q)]))).unwrap();
                mass += y.data()[at(arg)] / 50.0;
            }
        }
        assert!(mass >= 0.99, "mean argmax mass {mass}");
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let tape = Tape::<f64>::new();
        assert!(anatomy_activation(logits(&tape, 0), ActivationKind::GumbelSoft, 0.0, None).is_err());
        assert!("bogus".parse::<ActivationKind>().is_err());
    }
}
