//! Synthetic uplink sensing data for a uniform linear array and the
//! unsupervised reconstruction objective used to train the estimator.
//!
//! Angles are in radians throughout. The steering convention is
//! `[a(theta)]_k = exp(-j 2 pi s k sin(theta))` for element `k = 0..n-1`
//! and spacing `s` in wavelengths.

use std::io::{Read, Write};
use std::path::Path;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Error, Result};

pub const DEG: f64 = std::f64::consts::PI / 180.0;

/// One received block `Y` (`N_NB x T`) with its ground-truth angles.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalBatch {
    pub y: DMatrix<Complex64>,
    pub theta_true: Vec<f64>,
    pub snr_db: f64,
    pub gnb_id: u32,
}

impl SignalBatch {
    pub fn n_antennas(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_snapshots(&self) -> usize {
        self.y.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// `N_NB`.
    pub n_antennas: usize,
    /// `N_p`; path 1 is line of sight.
    pub n_paths: usize,
    /// Rician factor drawn uniformly from this range per block.
    pub rician_rho: (f64, f64),
    pub n_ue_antennas: usize,
    /// Element spacing at the base station, in wavelengths.
    pub spacing_nb: f64,
    pub spacing_ue: f64,
    pub wavelength: f64,
    /// SNR in dB drawn uniformly per block. `+inf` means noiseless.
    pub snr_db: (f64, f64),
    /// Support of the scattered-path arrival angles.
    pub scatter_support: (f64, f64),
    /// Per-UE transmit power; `0` leaves only noise.
    pub tx_power: f64,
    pub fading: Fading,
}

/// How often the complex path gains are redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fading {
    /// Once per block: all paths of a UE add coherently.
    Block,
    /// Every snapshot: paths decorrelate across the block.
    #[default]
    Snapshot,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        use std::f64::consts::FRAC_PI_3;
        Self {
            n_antennas: 64,
            n_paths: 9,
            rician_rho: (0.0, 15.0),
            n_ue_antennas: 1,
            spacing_nb: 0.5,
            spacing_ue: 0.5,
            wavelength: 0.1,
            snr_db: (0.0, 20.0),
            scatter_support: (-FRAC_PI_3, FRAC_PI_3),
            tx_power: 1.0,
            fading: Fading::default(),
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.n_antennas >= 1, || "n_antennas must be >= 1".into())?;
        ensure(self.n_paths >= 1, || "n_paths must be >= 1".into())?;
        ensure(self.n_ue_antennas >= 1, || "n_ue_antennas must be >= 1".into())?;
        ensure(self.rician_rho.0 >= 0.0 && self.rician_rho.0 <= self.rician_rho.1, || {
            format!("rician_rho range {:?} must be non-negative and ordered", self.rician_rho)
        })?;
        ensure(self.spacing_nb > 0.0 && self.spacing_ue > 0.0 && self.wavelength > 0.0, || {
            "spacings and wavelength must be positive".into()
        })?;
        ensure(self.snr_db.0 <= self.snr_db.1, || format!("snr range {:?} is not ordered", self.snr_db))?;
        ensure(self.tx_power >= 0.0, || "tx_power must be non-negative".into())
    }

    /// Expected per-element received signal power per UE at unit transmit
    /// power: `N_NB N_ue (rho + N_p - 1) / ((rho + 1) N_p)`.
    pub fn per_ue_signal_power(&self, rho: f64) -> f64 {
        let np = self.n_paths as f64;
        (self.n_antennas * self.n_ue_antennas) as f64 * (rho + np - 1.0) / ((rho + 1.0) * np)
    }
}

pub fn steering_vector(theta: f64, n: usize, spacing: f64) -> DVector<Complex64> {
    let phase = -2.0 * std::f64::consts::PI * spacing * theta.sin();
    DVector::from_fn(n, |k, _| Complex64::from_polar(1.0, phase * k as f64))
}

/// `d a(theta) / d theta`.
pub fn steering_derivative(theta: f64, n: usize, spacing: f64) -> DVector<Complex64> {
    let w = -2.0 * std::f64::consts::PI * spacing;
    let phase = w * theta.sin();
    let dphase = w * theta.cos();
    DVector::from_fn(n, |k, _| Complex64::from_polar(1.0, phase * k as f64) * Complex64::new(0.0, dphase * k as f64))
}

/// `A(theta)` with one steering vector per column.
pub fn steering_matrix(thetas: &[f64], n: usize, spacing: f64) -> DMatrix<Complex64> {
    let mut a = DMatrix::zeros(n, thetas.len());
    for (u, &t) in thetas.iter().enumerate() {
        a.set_column(u, &steering_vector(t, n, spacing));
    }
    a
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

fn cn<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// A synthesized block with its signal and noise parts kept apart.
#[derive(Debug, Clone)]
pub struct BlockComponents {
    pub signal: DMatrix<Complex64>,
    pub noise: DMatrix<Complex64>,
    pub snr_db: f64,
    pub noise_power: f64,
    pub rho: f64,
}

/// Multipath Rician block with zero path delays: LoS from `thetas`,
/// `N_p - 1` scattered paths per UE, complex Gaussian gains and symbols,
/// and AWGN at an SNR drawn from the configured range.
pub fn synthesize_components<R: Rng + ?Sized>(
    cfg: &ChannelConfig,
    rng: &mut R,
    thetas: &[f64],
    t: usize,
) -> Result<BlockComponents> {
    cfg.validate()?;
    ensure(!thetas.is_empty() && t >= 1, || "need at least one UE and one snapshot".into())?;
    let n = cfg.n_antennas;
    let nue = cfg.n_ue_antennas;
    let rho = uniform(rng, cfg.rician_rho);
    let snr_db = uniform(rng, cfg.snr_db);
    let np = cfg.n_paths as f64;
    let los_amp = (rho * (n * nue) as f64 / ((rho + 1.0) * np)).sqrt();
    let nlos_amp = ((n * nue) as f64 / ((rho + 1.0) * np)).sqrt();

    let mut signal = DMatrix::<Complex64>::zeros(n, t);
    for &theta in thetas {
        // a_UE(phi)^H x_u(t) for every snapshot; x has total power tx_power.
        let symbols: Vec<DVector<Complex64>> =
            (0..t).map(|_| DVector::from_fn(nue, |_, _| cn(rng, cfg.tx_power / nue as f64))).collect();
        for p in 0..cfg.n_paths {
            let (angle, amp) = if p == 0 { (theta, los_amp) } else { (uniform(rng, cfg.scatter_support), nlos_amp) };
            let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let block_beta = cn(rng, 1.0);
            let a_nb = steering_vector(angle, n, cfg.spacing_nb);
            let a_ue = steering_vector(phi, nue, cfg.spacing_ue);
            for (col, x) in symbols.iter().enumerate() {
                let beta = match cfg.fading {
                    Fading::Block => block_beta,
                    Fading::Snapshot => cn(rng, 1.0),
                };
                let s = beta * amp * a_ue.dotc(x);
                let mut c = signal.column_mut(col);
                c.zip_apply(&a_nb, |y, a| *y += a * s);
            }
        }
    }

    let nominal = cfg.per_ue_signal_power(rho) * thetas.len() as f64;
    let noise_power = if snr_db == f64::INFINITY { 0.0 } else { nominal / 10f64.powf(snr_db / 10.0) };
    let noise = DMatrix::from_fn(n, t, |_, _| cn(rng, noise_power));
    Ok(BlockComponents { signal, noise, snr_db, noise_power, rho })
}

pub fn synthesize_batch<R: Rng + ?Sized>(
    cfg: &ChannelConfig,
    rng: &mut R,
    thetas: &[f64],
    t: usize,
) -> Result<SignalBatch> {
    let parts = synthesize_components(cfg, rng, thetas, t)?;
    Ok(SignalBatch { y: parts.signal + parts.noise, theta_true: thetas.to_vec(), snr_db: parts.snr_db, gnb_id: 0 })
}

/// `U` angles drawn uniformly from `support`.
pub fn draw_thetas<R: Rng + ?Sized>(rng: &mut R, u: usize, support: (f64, f64)) -> Vec<f64> {
    (0..u).map(|_| uniform(rng, support)).collect()
}

struct LsFit {
    a: DMatrix<Complex64>,
    /// `(A^H A + gamma I)^{-1}`.
    g_inv: DMatrix<Complex64>,
    /// `G^{-1} A^H Y`.
    x: DMatrix<Complex64>,
    y_hat: DMatrix<Complex64>,
}

fn ls_fit(y: &DMatrix<Complex64>, theta_hat: &[f64], gamma: f64, spacing: f64) -> Result<LsFit> {
    ensure(gamma > 0.0, || format!("gamma={gamma} must be positive"))?;
    let a = steering_matrix(theta_hat, y.nrows(), spacing);
    let ah = a.adjoint();
    let mut g = &ah * &a;
    for i in 0..g.nrows() {
        g[(i, i)] += Complex64::new(gamma, 0.0);
    }
    let g_inv = g.try_inverse().ok_or_else(|| invalid("regularized Gram matrix is singular"))?;
    let x = &g_inv * (&ah * y);
    let y_hat = &a * &x;
    Ok(LsFit { a, g_inv, x, y_hat })
}

/// `A (A^H A + gamma I)^{-1} A^H Y` at half-wavelength spacing.
pub fn reconstruct_signal(y: &DMatrix<Complex64>, theta_hat: &[f64], gamma: f64) -> Result<DMatrix<Complex64>> {
    Ok(ls_fit(y, theta_hat, gamma, 0.5)?.y_hat)
}

/// `(1/T) ||Y - Y_hat||_F^2`.
pub fn unsupervised_loss(y: &DMatrix<Complex64>, theta_hat: &[f64], gamma: f64) -> Result<f64> {
    let fit = ls_fit(y, theta_hat, gamma, 0.5)?;
    Ok((y - fit.y_hat).norm_squared() / y.ncols() as f64)
}

/// Loss and its analytic gradient with respect to each estimated angle.
///
/// With `E = Y - Y_hat`, `H = A G^{-1} A^H` and `X = G^{-1} A^H Y`,
/// `dL/dtheta_u = -(2/T) Re[ X_u. ((I-H)E)^H a'_u + a'_u^H E E^H (A G^{-1})_.u ]`.
pub fn loss_and_gradient(
    y: &DMatrix<Complex64>,
    theta_hat: &[f64],
    gamma: f64,
    spacing: f64,
) -> Result<(f64, Vec<f64>)> {
    let fit = ls_fit(y, theta_hat, gamma, spacing)?;
    let t = y.ncols() as f64;
    let n = y.nrows();
    let e = y - &fit.y_hat;
    let loss = e.norm_squared() / t;

    let b = &fit.a * &fit.g_inv;
    let f = &e - &b * (fit.a.adjoint() * &e);
    let mut grad = Vec::with_capacity(theta_hat.len());
    for (u, &theta) in theta_hat.iter().enumerate() {
        let da = steering_derivative(theta, n, spacing);
        let fh_da = f.adjoint() * &da;
        let term1: Complex64 = fit.x.row(u).iter().zip(fh_da.iter()).map(|(x, v)| x * v).sum();
        let eh_da = e.adjoint() * &da;
        let eh_b = e.adjoint() * b.column(u);
        let term2 = eh_da.dotc(&eh_b);
        grad.push(-2.0 / t * (term1 + term2).re);
    }
    Ok((loss, grad))
}

/// Sample covariance `Y Y^H / T`.
pub fn sample_covariance(y: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    (y * y.adjoint()) / Complex64::new(y.ncols() as f64, 0.0)
}

/// Network input built from the sample covariance: the upper triangle is
/// averaged along each diagonal (lags `1..N`), normalized by the mean
/// diagonal power and laid out as `[1, Re r_1, Im r_1, Re r_2, ...]`, then
/// zero-padded or truncated to `width`. The leading constant acts as a bias.
pub fn covariance_features(y: &DMatrix<Complex64>, width: usize) -> Vec<f64> {
    let r = sample_covariance(y);
    let n = r.nrows();
    let power = (0..n).map(|i| r[(i, i)].re).sum::<f64>() / n as f64;
    let norm = if power > 0.0 { 1.0 / power } else { 0.0 };
    let mut out = Vec::with_capacity(width.max(2 * n));
    out.push(1.0);
    for lag in 1..n {
        let avg: Complex64 = (0..n - lag).map(|i| r[(i, i + lag)]).sum::<Complex64>() / (n - lag) as f64;
        out.push(avg.re * norm);
        out.push(avg.im * norm);
    }
    out.resize(width, 0.0);
    out
}

/// Spectral MUSIC on a grid of `step` radians over `support`.
pub fn music_estimate(
    y: &DMatrix<Complex64>,
    n_sources: usize,
    support: (f64, f64),
    step: f64,
    spacing: f64,
) -> Result<Vec<f64>> {
    let n = y.nrows();
    ensure(n_sources < n, || format!("cannot resolve {n_sources} sources with {n} antennas"))?;
    if n_sources == 0 {
        return Ok(Vec::new());
    }
    ensure(step > 0.0 && support.0 < support.1, || "MUSIC grid needs a positive step and ordered support".into())?;
    let eig = sample_covariance(y).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let noise_cols: Vec<usize> = order[..n - n_sources].to_vec();
    let en = eig.eigenvectors.select_columns(&noise_cols);
    let enh = en.adjoint();

    let points = ((support.1 - support.0) / step).round() as usize + 1;
    let grid: Vec<f64> = (0..points).map(|i| support.0 + i as f64 * step).collect();
    let spectrum: Vec<f64> =
        grid.iter().map(|&th| 1.0 / (&enh * steering_vector(th, n, spacing)).norm_squared().max(1e-300)).collect();

    let mut peaks: Vec<usize> = (0..points)
        .filter(|&i| {
            let left = i == 0 || spectrum[i] > spectrum[i - 1];
            let right = i + 1 == points || spectrum[i] >= spectrum[i + 1];
            left && right
        })
        .collect();
    peaks.sort_by(|&a, &b| spectrum[b].total_cmp(&spectrum[a]));
    peaks.truncate(n_sources);
    if peaks.len() < n_sources {
        let mut rest: Vec<usize> = (0..points).filter(|i| !peaks.contains(i)).collect();
        rest.sort_by(|&a, &b| spectrum[b].total_cmp(&spectrum[a]));
        peaks.extend(rest.into_iter().take(n_sources - peaks.len()));
    }
    let mut out: Vec<f64> = peaks.into_iter().map(|i| grid[i]).collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// `min_pi (1/U) sum_u (theta_u - theta_hat_pi(u))^2`.
pub fn mse_metric(theta_true: &[f64], theta_hat: &[f64]) -> Result<f64> {
    ensure(theta_true.len() == theta_hat.len(), || {
        format!("{} true angles vs {} estimates", theta_true.len(), theta_hat.len())
    })?;
    let u = theta_true.len();
    if u == 0 {
        return Ok(0.0);
    }
    let best = (0..u)
        .permutations(u)
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| (theta_true[i] - theta_hat[j]).powi(2)).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    Ok(best / u as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Iid,
    Noniid,
}

/// The global angular range `[-60, 60]` degrees.
pub const GLOBAL_SUPPORT: (f64, f64) = (-60.0 * DEG, 60.0 * DEG);
pub const SECTOR_WIDTH: f64 = 30.0 * DEG;

/// Angular support for one base station. Non-IID stations get a contiguous
/// 30 degree sector placed uniformly inside the global range.
pub fn partition_angles<R: Rng + ?Sized>(mode: Partition, rng: &mut R) -> (f64, f64) {
    match mode {
        Partition::Iid => GLOBAL_SUPPORT,
        Partition::Noniid => {
            let lo = rng.random_range(GLOBAL_SUPPORT.0..=GLOBAL_SUPPORT.1 - SECTOR_WIDTH);
            (lo, lo + SECTOR_WIDTH)
        }
    }
}

/// Writes blocks as consecutive records: `{N_NB u32, T u32, U u32}`, then
/// `Y` column-major as interleaved `f64` (re, im) pairs, then the `U` true
/// angles and the SNR as `f64`. All little-endian.
pub fn write_batches(path: &Path, batches: &[SignalBatch]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for b in batches {
        for dim in [b.y.nrows(), b.y.ncols(), b.theta_true.len()] {
            let dim = u32::try_from(dim).map_err(|_| invalid("dimension exceeds u32"))?;
            w.write_all(&dim.to_le_bytes())?;
        }
        for z in b.y.iter() {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
        for x in b.theta_true.iter().chain(std::iter::once(&b.snr_db)) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_batches(path: &Path, gnb_id: u32) -> Result<Vec<SignalBatch>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();
    let mut out = Vec::new();
    let take = |cur: &mut &[u8], n: usize| -> Result<Vec<u8>> {
        if cur.len() < n {
            return Err(Error::Format("truncated batch record".into()));
        }
        let (h, t) = cur.split_at(n);
        *cur = t;
        Ok(h.to_vec())
    };
    let f64_at = |b: &[u8], i: usize| f64::from_le_bytes(b[8 * i..8 * i + 8].try_into().unwrap());
    while !cur.is_empty() {
        let hdr = take(&mut cur, 12)?;
        let dims: Vec<usize> = hdr.chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
        let (n, t, u) = (dims[0], dims[1], dims[2]);
        let body = take(&mut cur, 16 * n * t)?;
        let y = DMatrix::from_iterator(
            n,
            t,
            (0..n * t).map(|i| Complex64::new(f64_at(&body, 2 * i), f64_at(&body, 2 * i + 1))),
        );
        let tail = take(&mut cur, 8 * (u + 1))?;
        let theta_true = (0..u).map(|i| f64_at(&tail, i)).collect();
        out.push(SignalBatch { y, theta_true, snr_db: f64_at(&tail, u), gnb_id });
    }
    Ok(out)
}
