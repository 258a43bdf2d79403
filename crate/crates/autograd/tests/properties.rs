use cddsa_autograd::{Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 24)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2, 4, 3], vals).unwrap());
        let y = x.softmax(1).value();
        for n in 0..2 {
            for i in 0..3 {
                let s: f64 = (0..4).map(|k| y.data()[(n * 4 + k) * 3 + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logsumexp_bounds(vals in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let n = vals.len();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, n], vals).unwrap());
        let l = x.logsumexp(1).item();
        prop_assert!(l >= max - 1e-12 && l <= max + (n as f64).ln() + 1e-12);
    }

    #[test]
    fn sum_axes_preserves_total(vals in prop::collection::vec(-5.0f64..5.0, 60)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[3, 4, 5], vals.clone()).unwrap());
        let total: f64 = vals.iter().sum();
        for axes in [vec![0], vec![1, 2], vec![0, 2]] {
            let s = x.sum_axes(&axes).sum().item();
            prop_assert!((s - total).abs() < 1e-9);
        }
    }
}
