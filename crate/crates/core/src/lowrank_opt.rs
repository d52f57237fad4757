//! Memory-efficient local optimizer: two-sided gradient down-projection,
//! Adam with `r x r` moment states, up-projected weight updates and the
//! per-round increment accumulator.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::projector::ProjectorPair;

/// Divisors used to bias-correct the moment estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdamBiasMode {
    /// Fixed divisors `1 - beta1` and `1 - beta2`.
    #[default]
    Fixed,
    /// Step-dependent divisors `1 - beta1^n` and `1 - beta2^n`.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub bias_mode: AdamBiasMode,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-3, bias_mode: AdamBiasMode::Fixed }
    }
}

/// Adam moments kept in the compressed `r x r` space.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMoments {
    pub m: DMatrix<f64>,
    /// Second moment; entrywise non-negative.
    pub s: DMatrix<f64>,
    pub step: u64,
    pub params: AdamParams,
}

impl CompressedMoments {
    pub fn new(rank: usize, params: AdamParams) -> Self {
        Self { m: DMatrix::zeros(rank, rank), s: DMatrix::zeros(rank, rank), step: 0, params }
    }

    pub fn rank(&self) -> usize {
        self.m.nrows()
    }

    pub fn reset(&mut self) {
        self.m.fill(0.0);
        self.s.fill(0.0);
        self.step = 0;
    }

    pub fn param_count(&self) -> usize {
        self.m.len() + self.s.len()
    }
}

/// Running sum of the `R~` matrices applied since the last upload.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementAccumulator {
    pub u: DMatrix<f64>,
    pub eta: f64,
    pub count: usize,
}

impl IncrementAccumulator {
    pub fn new(rank: usize, eta: f64) -> Self {
        Self { u: DMatrix::zeros(rank, rank), eta, count: 0 }
    }

    pub fn accumulate(&mut self, r_tilde: &DMatrix<f64>) {
        self.u += r_tilde;
        self.count += 1;
    }

    pub fn reset(&mut self) {
        self.u.fill(0.0);
        self.count = 0;
    }

    /// `eta * U`, the compressed increment a client transmits.
    pub fn compressed_increment(&self) -> DMatrix<f64> {
        &self.u * self.eta
    }

    /// `eta * P^T U Q^T`, the full-size increment it represents.
    pub fn full_increment(&self, proj: &ProjectorPair) -> DMatrix<f64> {
        proj.p.transpose() * self.compressed_increment() * proj.q.transpose()
    }
}

/// `P G Q`.
pub fn compress_gradient(g: &DMatrix<f64>, proj: &ProjectorPair) -> Result<DMatrix<f64>> {
    ensure(g.shape() == (proj.rows(), proj.cols()), || {
        format!("gradient is {:?} but projectors expect {}x{}", g.shape(), proj.rows(), proj.cols())
    })?;
    Ok(&proj.p * g * &proj.q)
}

/// One Adam update in the compressed space; mutates `moments` and returns
/// `R~ = M~ / sqrt(S~ + eps)`.
pub fn adam_step(r: &DMatrix<f64>, moments: &mut CompressedMoments) -> Result<DMatrix<f64>> {
    ensure(r.shape() == moments.m.shape(), || {
        format!("compressed gradient is {:?}, moments are {:?}", r.shape(), moments.m.shape())
    })?;
    let AdamParams { beta1, beta2, epsilon, bias_mode } = moments.params;
    moments.step += 1;
    moments.m.zip_apply(r, |m, g| *m = beta1 * *m + (1.0 - beta1) * g);
    moments.s.zip_apply(r, |s, g| *s = beta2 * *s + (1.0 - beta2) * g * g);
    let (c1, c2) = match bias_mode {
        AdamBiasMode::Fixed => (1.0 - beta1, 1.0 - beta2),
        AdamBiasMode::Standard => {
            let n = moments.step.min(i32::MAX as u64) as i32;
            (1.0 - beta1.powi(n), 1.0 - beta2.powi(n))
        }
    };
    Ok(moments.m.zip_map(&moments.s, |m, s| (m / c1) / (s / c2 + epsilon).sqrt()))
}

/// `W + eta * P^T R~ Q^T`.
pub fn apply_local_update(
    w: &DMatrix<f64>,
    r_tilde: &DMatrix<f64>,
    proj: &ProjectorPair,
    eta: f64,
) -> Result<DMatrix<f64>> {
    ensure(w.shape() == (proj.rows(), proj.cols()), || {
        format!("weight is {:?} but projectors expect {}x{}", w.shape(), proj.rows(), proj.cols())
    })?;
    ensure(r_tilde.shape() == (proj.rank, proj.rank), || {
        format!("update is {:?}, expected {}x{}", r_tilde.shape(), proj.rank, proj.rank)
    })?;
    Ok(w + (proj.p.transpose() * r_tilde * proj.q.transpose()) * eta)
}

/// Optimizer-side parameter count for one layer as tabulated for the
/// method: `(m + d + r) * r`.
pub fn optimizer_state_params(m: usize, d: usize, r: usize) -> usize {
    (m + d + r) * r
}
