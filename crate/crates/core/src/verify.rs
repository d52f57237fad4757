//! Empirical property suite: measurement routines for the structural
//! guarantees of the pipeline, plus a quick pass/fail report.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::aoa::{draw_thetas, synthesize_batch, ChannelConfig, GLOBAL_SUPPORT};
use crate::codec::{
    combine_layers, dequantize, devectorize, payload_bits, quantize_sr, recover_layer, up_project, vectorize,
};
use crate::error::{ensure, Result};
use crate::model::{Head, Network};
use crate::projector::{generate_combiner, generate_projectors, Combiner, ProjectorPair};
use crate::rng::{derive_seed, stream};
use crate::theory::covariance_drift_oracle;

/// `(violations, entries)` for `|[V^T V - I]_ij| >= eps` over the upper
/// triangle (diagonal included) of a Gaussian combiner with `n_cols`
/// columns.
pub fn orthogonality_tail(seed: u64, r_a: usize, n_cols: usize, eps: &[f64]) -> Result<(Vec<usize>, usize)> {
    let comb = Combiner::gaussian(seed, n_cols, 1, r_a)?;
    let gram = comb.v.tr_mul(&comb.v);
    let mut counts = vec![0; eps.len()];
    let mut total = 0;
    for j in 0..n_cols {
        for i in 0..=j {
            let dev = (gram[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs();
            for (c, &e) in counts.iter_mut().zip(eps) {
                if dev >= e {
                    *c += 1;
                }
            }
            total += 1;
        }
    }
    Ok((counts, total))
}

/// Whether a Gaussian `r_a x dim` map keeps every pairwise squared distance
/// of `n` random vectors within a factor `1 +- eps`.
pub fn jl_trial(seed: u64, n: usize, dim: usize, r_a: usize, eps: f64) -> Result<bool> {
    let comb = Combiner::gaussian(seed, dim, 1, r_a)?;
    let mut rng = stream(seed, &[0x4a4c]);
    let pts: Vec<DVector<f64>> =
        (0..n).map(|_| DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng))).collect();
    let img: Vec<DVector<f64>> = pts.iter().map(|p| &comb.v * p).collect();
    for i in 0..n {
        for j in i + 1..n {
            let d = (&pts[i] - &pts[j]).norm_squared();
            let e = (&img[i] - &img[j]).norm_squared();
            if e < (1.0 - eps) * d || e > (1.0 + eps) * d {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Per-entry error statistics of repeated stochastic rounding of `v`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SrStats {
    pub mean_error: Vec<f64>,
    pub std_error: Vec<f64>,
    /// Mean of `||Q(v) - v||^2` over the draws.
    pub mean_sq_error: f64,
    pub draws: usize,
}

pub fn sr_statistics<R: Rng + ?Sized>(v: &[f64], q: u8, draws: usize, rng: &mut R) -> Result<SrStats> {
    ensure(draws >= 2, || "need at least two draws".into())?;
    let n = v.len();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    for _ in 0..draws {
        let x = dequantize(&quantize_sr(v, q, rng)?);
        for i in 0..n {
            let e = x[i] - v[i];
            sum[i] += e;
            sum_sq[i] += e * e;
        }
    }
    let d = draws as f64;
    let mean_error: Vec<f64> = sum.iter().map(|s| s / d).collect();
    let std_error =
        (0..n).map(|i| ((sum_sq[i] - d * mean_error[i] * mean_error[i]) / (d - 1.0)).max(0.0).sqrt()).collect();
    Ok(SrStats { mean_error, std_error, mean_sq_error: sum_sq.iter().sum::<f64>() / d, draws })
}

/// Random compressed increments for `k` stations and the shared matrices
/// of one superposition round.
#[derive(Debug, Clone)]
pub struct SuperpositionCase {
    pub projectors: Vec<ProjectorPair>,
    pub combiner: Combiner,
    /// `[station][layer]`, each `r x r`.
    pub compressed: Vec<Vec<DMatrix<f64>>>,
    pub weights: Vec<f64>,
}

impl SuperpositionCase {
    /// Layer `l` has shape `(r + 2 + l) x (r + 4 + 2l)`; increments are
    /// uniform in `[-scale, scale]`.
    pub fn random(seed: u64, k: usize, n_w: usize, r: usize, r_a: usize, scale: f64) -> Result<Self> {
        let projectors = (0..n_w)
            .map(|l| generate_projectors(derive_seed(seed, &[1, l as u64]), r + 2 + l, r + 4 + 2 * l, r))
            .collect::<Result<Vec<_>>>()?;
        let combiner = generate_combiner(derive_seed(seed, &[2]), r, n_w, r_a)?;
        let mut rng = stream(seed, &[3]);
        let compressed = (0..k)
            .map(|_| (0..n_w).map(|_| DMatrix::from_fn(r, r, |_, _| rng.random_range(-scale..=scale))).collect())
            .collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..4.0)).collect();
        let total: f64 = raw.iter().sum();
        Ok(Self { projectors, combiner, compressed, weights: raw.iter().map(|w| w / total).collect() })
    }

    /// Full-precision weighted average of the up-projected increments.
    pub fn fedavg(&self) -> Vec<DMatrix<f64>> {
        self.projectors
            .iter()
            .enumerate()
            .map(|(l, p)| {
                self.compressed.iter().zip(&self.weights).fold(DMatrix::zeros(p.rows(), p.cols()), |acc, (c, w)| {
                    acc + p.p.transpose() * &c[l] * p.q.transpose() * *w
                })
            })
            .collect()
    }

    /// Largest entry magnitude over all up-projected station increments.
    pub fn max_entry(&self) -> f64 {
        self.compressed
            .iter()
            .flat_map(|c| {
                self.projectors
                    .iter()
                    .enumerate()
                    .map(move |(l, p)| (p.p.transpose() * &c[l] * p.q.transpose()).abs().max())
            })
            .fold(0.0, f64::max)
    }

    /// Superpose, quantize at `q_u`, aggregate, re-quantize at `q_d`,
    /// recover and up-project every layer.
    pub fn transmit<R: Rng + ?Sized>(&self, q_u: u8, q_d: u8, rng: &mut R) -> Result<Vec<DMatrix<f64>>> {
        let n = self.combiner.r_a * self.combiner.r_a;
        let mut global = vec![0.0; n];
        for (c, w) in self.compressed.iter().zip(&self.weights) {
            let cons = combine_layers(c, &self.combiner)?;
            let up = dequantize(&quantize_sr(&vectorize(&cons.data), q_u, rng)?);
            for (g, x) in global.iter_mut().zip(up) {
                *g += w * x;
            }
        }
        let down = devectorize(&dequantize(&quantize_sr(&global, q_d, rng)?), self.combiner.r_a)?;
        let cons = crate::codec::ConsolidatedUpdate::new(down);
        self.projectors
            .iter()
            .enumerate()
            .map(|(l, p)| up_project(&recover_layer(&cons, &self.combiner, l)?, p))
            .collect()
    }
}

/// Per-layer mean of `||recovered_l - fedavg_l||_F^2` over `draws`.
pub fn discrepancy(case: &SuperpositionCase, q_u: u8, q_d: u8, draws: usize, seed: u64) -> Result<Vec<f64>> {
    let reference = case.fedavg();
    // Every setting replays the same random stream (common random numbers).
    let mut rng = stream(seed, &[]);
    let mut acc = vec![0.0; reference.len()];
    for _ in 0..draws {
        for (a, (got, want)) in acc.iter_mut().zip(case.transmit(q_u, q_d, &mut rng)?.iter().zip(&reference)) {
            *a += (got - want).norm_squared();
        }
    }
    Ok(acc.iter().map(|a| a / draws as f64).collect())
}

/// Worst relative gradient error (analytic vs central differences) over the
/// layers of a small random instance.
pub fn gradient_check(seed: u64) -> Result<f64> {
    let n_antennas = 5 + (seed % 4) as usize;
    let u = 1 + (seed % 2) as usize;
    let cfg = ChannelConfig { n_antennas, ..ChannelConfig::default() };
    let head = if seed.is_multiple_of(3) { Head::Ordered } else { Head::Tanh };
    let net = Network::new(&[(8, 8), (8, 6), (6, 2 * u)], u, GLOBAL_SUPPORT, seed)?.with_head(head);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = (0..3)
        .map(|_| {
            let th = draw_thetas(&mut rng, u, GLOBAL_SUPPORT);
            synthesize_batch(&cfg, &mut rng, &th, 10)
        })
        .collect::<Result<Vec<_>>>()?;
    let gamma = 1e-2;
    let analytic = net.backward(&batch, gamma)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for l in 0..net.n_layers() {
        let (m, d) = net.layers[l].w.shape();
        let mut numeric = DMatrix::zeros(m, d);
        for i in 0..m {
            for j in 0..d {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.layers[l].w[(i, j)] += h;
                minus.layers[l].w[(i, j)] -= h;
                numeric[(i, j)] = (plus.loss(&batch, gamma)? - minus.loss(&batch, gamma)?) / (2.0 * h);
            }
        }
        let rel = (&analytic.per_layer[l] - &numeric).norm() / numeric.norm().max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Bits of a real superposed upload for `n_w` layers of rank `r`.
pub fn upload_bits(seed: u64, n_w: usize, r: usize, r_a: usize, q_u: u8) -> Result<u64> {
    let case = SuperpositionCase::random(seed, 1, n_w, r, r_a, 1.0)?;
    let cons = combine_layers(&case.compressed[0], &case.combiner)?;
    let mut rng = stream(seed, &[4]);
    Ok(quantize_sr(&vectorize(&cons.data), q_u, &mut rng)?.bit_count())
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn check(name: &str, passed: bool, detail: serde_json::Value) -> CheckResult {
    CheckResult { name: name.into(), passed, detail }
}

/// Reduced-size version of every property check.
pub fn run_suite(seed: u64) -> Result<Report> {
    use serde_json::json;
    let mut checks = Vec::new();

    let eps = [0.2, 0.4];
    let (counts, total) = orthogonality_tail(derive_seed(seed, &[10]), 256, 256, &eps)?;
    let rows: Vec<_> = eps
        .iter()
        .zip(&counts)
        .map(|(&e, &c)| (e, c as f64 / total as f64, 4.0 * (-e * e * 256.0 / 8.0).exp()))
        .collect();
    checks.push(check(
        "orthogonality_tail",
        rows.iter().all(|(_, f, b)| f <= b),
        json!({"r_a": 256, "entries": total, "eps_freq_bound": rows}),
    ));

    let trials = 100;
    let ok =
        (0..trials).filter(|&t| jl_trial(derive_seed(seed, &[11, t]), 20, 1000, 288, 0.5).unwrap_or(false)).count();
    let frac = ok as f64 / trials as f64;
    checks.push(check(
        "jl_preservation",
        frac >= 0.92,
        json!({"r_a": 288, "trials": trials, "success_fraction": frac}),
    ));

    let mut rng = stream(seed, &[12]);
    let mut unbiased = true;
    let mut worst_ratio: f64 = 0.0;
    for q in [2u8, 4, 8] {
        for _ in 0..5 {
            let v: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
            let s = sr_statistics(&v, q, 20_000, &mut rng)?;
            let n = s.draws as f64;
            unbiased &= s.mean_error.iter().zip(&s.std_error).all(|(m, sd)| m.abs() <= 4.0 * sd / n.sqrt());
            let bound = v.iter().map(|x| x * x).sum::<f64>() / ((1u64 << q) as f64 - 1.0).powi(2);
            worst_ratio = worst_ratio.max(s.mean_sq_error / bound);
        }
    }
    checks.push(check("sr_unbiased", unbiased, json!({"q": [2, 4, 8]})));
    checks.push(check(
        "sr_variance_bound",
        worst_ratio <= 1.0,
        json!({"worst_ratio_to_bound": worst_ratio, "bound": "||v||^2 / (2^q - 1)^2"}),
    ));

    let mut worst_rel: f64 = 0.0;
    for c in 0..5 {
        let case = SuperpositionCase::random(derive_seed(seed, &[13, c]), 3, 3, 4, 12 + c as usize, 1.0)?;
        let got = case.transmit(32, 32, &mut stream(seed, &[14]))?;
        for (g, w) in got.iter().zip(case.fedavg()) {
            worst_rel = worst_rel.max((g - &w).norm() / w.norm().max(1e-300));
        }
    }
    checks.push(check("case1_exact_recovery", worst_rel <= 1e-8, json!({"worst_relative_error": worst_rel})));

    let case = SuperpositionCase::random(derive_seed(seed, &[15]), 3, 3, 4, 12, 0.01)?;
    let m = case.max_entry();
    let d_p = case.projectors.iter().map(|p| p.p.norm()).fold(0.0, f64::max);
    let d_v = case.combiner.blocks().map(|b| b.norm()).fold(0.0, f64::max);
    let bound = |qu: u8, qd: u8| {
        let (pu, pd) = ((1u64 << qu) as f64, (1u64 << qd) as f64);
        (pd * d_p * d_v * 3.0 * 144.0 * m / ((pd - 1.0) * (pu - 1.0))).powi(2)
    };
    let mut within = true;
    let mut trace = Vec::new();
    for qu in [2u8, 4, 8] {
        let d = discrepancy(&case, qu, 8, 50, seed)?;
        within &= d.iter().all(|x| *x <= bound(qu, 8));
        trace.push(d.iter().sum::<f64>());
    }
    let monotone = trace.windows(2).all(|w| w[1] <= w[0]);
    checks.push(check(
        "discrepancy_bound",
        within && monotone,
        json!({"q_U": [2, 4, 8], "q_D": 8, "total_mse": trace}),
    ));

    let worst_grad = (0..5)
        .map(|s| gradient_check(derive_seed(seed, &[16, s])))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    checks.push(check("gradient_check", worst_grad < 1e-4, json!({"worst_relative_error": worst_grad})));

    let drift = covariance_drift_oracle(8, 50_000, &mut stream(seed, &[17]));
    checks.push(check(
        "covariance_drift_constant",
        (drift / 120.0 - 1.0).abs() <= 0.03,
        json!({"d": 8, "estimate": drift, "expected": 120.0}),
    ));

    let mut constant = true;
    for n_w in [2, 3, 6] {
        for r in [4, 8] {
            constant &= upload_bits(seed, n_w, r, 40, 2)? == payload_bits(2, 1600);
        }
    }
    checks.push(check("payload_constancy", constant, json!({"r_a": 40, "bits": payload_bits(2, 1600)})));

    Ok(Report { passed: checks.iter().all(|c| c.passed), checks })
}
