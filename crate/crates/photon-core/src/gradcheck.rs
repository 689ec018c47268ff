//! Central finite differences. This is the independent oracle that every
//! reverse-mode gradient in the crate is validated against; it never touches
//! the tape's backward path.

use crate::tensor::{Element, Tensor};

/// Central-difference gradient of `f` at `x0`, perturbing every coordinate.
pub fn central_diff<E: Element>(
    x0: &Tensor<E>,
    h: f64,
    mut f: impl FnMut(&Tensor<E>) -> E,
) -> Tensor<E> {
    let mut grad = Tensor::zeros(x0.shape().to_vec());
    let mut x = x0.clone();
    for i in 0..x0.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + E::from_f64(h);
        let fp = f(&x).as_f64();
        x.data_mut()[i] = orig - E::from_f64(h);
        let fm = f(&x).as_f64();
        x.data_mut()[i] = orig;
        grad.data_mut()[i] = E::from_f64((fp - fm) / (2.0 * h));
    }
    grad
}

/// Central-difference derivative for a subset of coordinates.
pub fn central_diff_at<E: Element>(
    x0: &Tensor<E>,
    idx: &[usize],
    h: f64,
    mut f: impl FnMut(&Tensor<E>) -> E,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len());
    let mut x = x0.clone();
    for &i in idx {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + E::from_f64(h);
        let fp = f(&x).as_f64();
        x.data_mut()[i] = orig - E::from_f64(h);
        let fm = f(&x).as_f64();
        x.data_mut()[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Largest relative error between paired values, with an absolute floor so
/// near-zero gradients compare on absolute terms.
pub fn max_rel_err<E: Element>(analytic: &[E], numeric: &[E]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        worst = worst.max(rel_err(a.as_f64(), n.as_f64()));
    }
    worst
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}
