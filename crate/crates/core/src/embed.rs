//! Sinusoidal time features shared by the score and velocity networks.

use crate::numcore::{Matrix, Scalar};

/// Number of time features: sin and cos at frequencies `2^k π`, `k = 0..4`.
pub const TIME_FEATURES: usize = 8;

/// `n x 8` feature matrix for per-row times.
pub fn time_features<T: Scalar>(t: &[T]) -> Matrix<T> {
    let pi = T::PI();
    Matrix::from_fn(t.len(), TIME_FEATURES, |r, c| {
        let freq = T::from_usize_lossy(1 << (c / 2)) * pi;
        let a = freq * t[r];
        if c % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// `[x | features(t)]`.
pub fn with_time<T: Scalar>(x: &Matrix<T>, t: &[T]) -> Matrix<T> {
    x.hcat(&time_features(t)).expect("time vector length matches batch")
}
