//! Dense tensors with reverse-mode gradients: just the operators the
//! encoder and the training losses need.
//!
//! Values are stored and accumulated in `f64`; files written by this module
//! use `f32`.

mod params;
mod tape;
mod tensor;

pub use params::{AdamConfig, Bindings, ParamSet};
pub use tape::{Gradients, ListGroup, Tape, Var};
pub use tensor::Tensor2;

use rand::Rng;
use std::sync::Arc;

use crate::error::Result;

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Arc<Vec<f64>> {
    let keep = 1.0 - rate;
    let scale = if keep > 0.0 { 1.0 / keep } else { 0.0 };
    Arc::new(
        (0..len)
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect(),
    )
}

/// Mean softmax cross-entropy of `logits` against `targets`, evaluated
/// without keeping a tape around.
pub fn softmax_xent(logits: &Tensor2, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone())?;
    let l = tape.softmax_xent(x, targets)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0, 2.0]])).unwrap();
        let w = tape.leaf(Tensor2::identity(2)).unwrap();
        let zero = tape.leaf(Tensor2::zeros(1, 2)).unwrap();
        let ones = tape.leaf(t(&[&[1.0, 1.0]])).unwrap();
        let y0 = tape.linear(x, w, zero).unwrap();
        assert_eq!(tape.value(y0), &t(&[&[1.0, 2.0]]));
        let y1 = tape.linear(x, w, ones).unwrap();
        assert_eq!(tape.value(y1), &t(&[&[2.0, 3.0]]));
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor2::zeros(1, 3)).unwrap();
        let w = tape.leaf(Tensor2::zeros(2, 2)).unwrap();
        assert!(matches!(tape.matmul(x, w), Err(Error::Shape { .. })));
        let y = tape.leaf(Tensor2::zeros(1, 2)).unwrap();
        let b = tape.leaf(Tensor2::zeros(1, 3)).unwrap();
        assert!(tape.add_bias(y, b).is_err());
    }

    #[test]
    fn mean_rows_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0, 3.0], &[3.0, 1.0]])).unwrap();
        let same = tape.mean_rows(x, Arc::new(vec![vec![0], vec![1]])).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        let pooled = tape.mean_rows(x, Arc::new(vec![vec![0, 1], vec![]])).unwrap();
        assert_eq!(tape.value(pooled), &t(&[&[2.0, 2.0], &[0.0, 0.0]]));
        assert!(matches!(
            tape.mean_rows(x, Arc::new(vec![vec![2]])),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn relu_and_normalize() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[-1.0, 0.0, 2.0]])).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &t(&[&[0.0, 0.0, 2.0]]));
        let y = tape.leaf(t(&[&[3.0, 4.0], &[0.0, 0.0]])).unwrap();
        let n = tape.l2_normalize_rows(y).unwrap();
        let v = tape.value(n);
        assert!((v.get(0, 0) - 0.6).abs() < 1e-15 && (v.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(v.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn xent_values() {
        for c in [2usize, 5, 40] {
            let l = softmax_xent(&Tensor2::zeros(3, c), &[0, 1, c - 1]).unwrap();
            assert!((l - (c as f64).ln()).abs() < 1e-12);
        }
        let l = softmax_xent(&t(&[&[10.0, -10.0]]), &[0]).unwrap();
        let expect = (-20f64).exp().ln_1p();
        assert!((l - expect).abs() < 1e-20, "{l} vs {expect}");
        assert!(softmax_xent(&t(&[&[0.0, 0.0]]), &[2]).is_err());
    }

    #[test]
    fn xent_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.5, -0.5, 0.25]])).unwrap();
        let l = tape.softmax_xent(x, &[1]).unwrap();
        let g = tape.backward(l).unwrap();
        let row = [1.5f64, -0.5, 0.25];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (j, v) in row.iter().enumerate() {
            let expect = v.exp() / z - if j == 1 { 1.0 } else { 0.0 };
            assert!((g.wrt(x).unwrap().get(0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_and_matmul_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));

        let w = tape.leaf(t(&[&[1.0, -1.0, 0.5], &[2.0, 0.0, 1.0]])).unwrap();
        let xw = tape.matmul(x, w).unwrap();
        let s = tape.sum(xw).unwrap();
        let g = tape.backward(s).unwrap();
        // dW = x^T * ones: every column equals the column sums of x
        let dw = g.wrt(w).unwrap();
        for c in 0..3 {
            assert_eq!(dw.get(0, c), 9.0);
            assert_eq!(dw.get(1, c), 12.0);
        }
    }

    #[test]
    fn backward_rejects_foreign_or_nonscalar() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor2::scalar(1.0)).unwrap();
        let _ = b.leaf(Tensor2::scalar(1.0)).unwrap();
        assert!(b.backward(x).is_err());
        let m = a.leaf(Tensor2::zeros(2, 2)).unwrap();
        assert!(a.backward(m).is_err());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor2::scalar(1e300)).unwrap();
        assert!(matches!(tape.scale(x, 1e300), Err(Error::NonFinite { .. })));
        assert!(tape.leaf(Tensor2::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn listwise_singleton_and_pair() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor2::from_vec(3, 1, vec![0.3, 1.0, 0.0]).unwrap()).unwrap();
        let groups = vec![
            ListGroup { start: 0, len: 1, positives: vec![(0, 1.0)] },
        ];
        let l = tape.listwise_nll(s, &groups, 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let groups = vec![ListGroup { start: 1, len: 2, positives: vec![(0, 1.0)] }];
        let l = tape.listwise_nll(s, &groups, 1.0).unwrap();
        assert!((tape.value(l).item() - (-1f64).exp().ln_1p()).abs() < 1e-15);
    }

    #[test]
    fn dropout_mask_statistics() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let m = dropout_mask(10_000, 0.5, &mut rng);
        let kept = m.iter().filter(|&&v| v > 0.0).count();
        assert!((4700..5300).contains(&kept));
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[&[0.1, 0.7], &[-0.3, 0.2]])).unwrap();
            let w = tape.leaf(t(&[&[0.4, -1.1], &[0.9, 0.05]])).unwrap();
            let y = tape.matmul(x, w).unwrap();
            let y = tape.l2_normalize_rows(y).unwrap();
            let l = tape.softmax_xent(y, &[0, 1]).unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(l).item().to_bits(), g.wrt(w).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
