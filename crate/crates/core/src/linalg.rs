//! Small numeric helpers on top of `ndarray`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub type Vector = Array1<f64>;
pub type Matrix = Array2<f64>;

/// Probability clamp applied before any `ln` in binary cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `label`, with the
/// probability clamped to `[PROB_EPS, 1 - PROB_EPS]`.
///
/// Returns `(loss, dloss/dlogit)`. Inside the clamp region the derivative is
/// the usual `p - y`; once clamped it is zero.
pub fn bce_with_logit(logit: f64, label: bool) -> (f64, f64) {
    let p = sigmoid(logit);
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let clamped = pc != p;
    let y = if label { 1.0 } else { 0.0 };
    let loss = if label { -pc.ln() } else { -(1.0 - pc).ln() };
    let grad = if clamped { 0.0 } else { p - y };
    (loss, grad)
}

/// Numerically stable `ln sum exp`.
pub fn logsumexp(xs: ArrayView1<f64>) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: ArrayView1<f64>) -> Vector {
    let lse = logsumexp(xs);
    xs.mapv(|x| (x - lse).exp())
}

pub fn l2_norm(xs: ArrayView1<f64>) -> f64 {
    xs.dot(&xs).sqrt()
}

pub fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian initialisation with standard deviation `std`.
pub fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Glorot-style initialisation for a `fan_in x fan_out` weight.
pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal_matrix(fan_in, fan_out, std, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sigmoid_is_symmetric() {
        for x in [-30.0, -2.0, 0.0, 0.5, 40.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_saturates_at_clamp() {
        let (l, g) = bce_with_logit(100.0, true);
        assert!((l - (-(1.0 - PROB_EPS).ln())).abs() < 1e-15);
        assert_eq!(g, 0.0);
        let (l, _) = bce_with_logit(100.0, false);
        assert!((l - (-(PROB_EPS).ln())).abs() < 1e-9);
    }

    #[test]
    fn softmax_sums_to_one() {
        let s = softmax(array![1.0, 2.0, 1000.0].view());
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }
}
