//! Numerical checks of the structural results behind the local optimizer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// For the one-layer linear model with loss `0.5 ||y - W x||^2`, checks that
/// the backpropagated gradient `-(y - W x) x^T` equals `B W C - A` with
/// `A = y x^T`, `B = I`, `C = x x^T`, and that `A - B W C` is its negation.
pub fn reversible_form_oracle(x: &DVector<f64>, y: &DVector<f64>, w: &DMatrix<f64>) -> bool {
    if w.shape() != (y.len(), x.len()) {
        return false;
    }
    let residual = y - w * x;
    let grad = -(&residual * x.transpose());
    let a = y * x.transpose();
    let b = DMatrix::<f64>::identity(y.len(), y.len());
    let c = x * x.transpose();
    let bwc = &b * w * &c;
    let tol = 1e-12 * (1.0 + grad.abs().max() + a.abs().max() + bwc.abs().max());
    let forward = (&bwc - &a - &grad).abs().max() <= tol;
    let reversed = (&a - &bwc + &grad).abs().max() <= tol;
    forward && reversed
}

/// Monte Carlo estimate of `E || f f^T - f' f'^T ||_F^2` for independent
/// standard normal `f, f'` in `R^d`.
pub fn covariance_drift_oracle<R: Rng + ?Sized>(d: usize, n_samples: usize, rng: &mut R) -> f64 {
    if d == 0 || n_samples == 0 {
        return 0.0;
    }
    let mut f = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut total = 0.0;
    for _ in 0..n_samples {
        f.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        g.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                let diff = f[i] * f[j] - g[i] * g[j];
                s += diff * diff;
            }
        }
        total += s;
    }
    total / n_samples as f64
}
