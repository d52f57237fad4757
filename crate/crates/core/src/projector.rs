//! Seed-driven generation of the shared random matrices: the per-layer
//! projector pairs `(P, Q)` and the superposition combiner `V`.
//!
//! Nothing here is cached. A projector pair is a pure function of
//! `(seed, m, d, r)` and a combiner of `(seed, r, n_w, r_a)`, which is what
//! lets every client and the server agree on the subspaces while storing
//! only seeds.

use nalgebra::{DMatrix, DMatrixView};

use crate::error::{ensure, Error, Result};
use crate::rng::{counter_normal, tag};

/// Left/right down-projectors for one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorPair {
    pub layer_index: usize,
    /// `r x m`, orthonormal rows.
    pub p: DMatrix<f64>,
    /// `d x r`, orthonormal columns.
    pub q: DMatrix<f64>,
    pub seed: u64,
    pub rank: usize,
}

impl ProjectorPair {
    /// Row count `m` of the weight this pair projects.
    pub fn rows(&self) -> usize {
        self.p.ncols()
    }

    /// Column count `d` of the weight this pair projects.
    pub fn cols(&self) -> usize {
        self.q.nrows()
    }

    pub fn with_layer_index(mut self, layer_index: usize) -> Self {
        self.layer_index = layer_index;
        self
    }
}

/// How the combiner columns were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombinerMode {
    /// `r_a >= r * n_w`: exactly orthonormal columns.
    Orthonormal,
    /// `r_a < r * n_w`: i.i.d. `N(0, 1/r_a)` entries.
    Gaussian,
}

/// The shared matrix `V` (`r_a x r*n_w`) whose column blocks carry each
/// layer's compressed update.
#[derive(Debug, Clone, PartialEq)]
pub struct Combiner {
    pub v: DMatrix<f64>,
    pub mode: CombinerMode,
    pub seed: u64,
    pub rank: usize,
    pub n_layers: usize,
    pub r_a: usize,
}

impl Combiner {
    /// Block `V_l`, the `r` columns assigned to layer `l` (0-based).
    pub fn block(&self, layer: usize) -> Result<DMatrixView<'_, f64>> {
        if layer >= self.n_layers {
            return Err(Error::IndexOutOfRange { index: layer, len: self.n_layers });
        }
        Ok(self.v.columns(layer * self.rank, self.rank))
    }

    pub fn blocks(&self) -> impl Iterator<Item = DMatrixView<'_, f64>> {
        (0..self.n_layers).map(move |l| self.v.columns(l * self.rank, self.rank))
    }

    /// Gaussian-mode combiner regardless of the dimension relation.
    pub fn gaussian(seed: u64, r: usize, n_w: usize, r_a: usize) -> Result<Self> {
        check_combiner_dims(r, n_w, r_a)?;
        let scale = 1.0 / (r_a as f64).sqrt();
        let v = DMatrix::from_fn(r_a, r * n_w, |i, j| counter_normal(seed, tag::COMBINER, i as u64, j as u64) * scale);
        Ok(Self { v, mode: CombinerMode::Gaussian, seed, rank: r, n_layers: n_w, r_a })
    }

    /// Orthonormal-mode combiner; requires `r_a >= r * n_w`.
    pub fn orthonormal(seed: u64, r: usize, n_w: usize, r_a: usize) -> Result<Self> {
        check_combiner_dims(r, n_w, r_a)?;
        let cols = r * n_w;
        ensure(r_a >= cols, || format!("orthonormal combiner needs r_a >= r*n_w ({r_a} < {cols})"))?;
        let g = DMatrix::from_fn(r_a, cols, |i, j| counter_normal(seed, tag::COMBINER, i as u64, j as u64));
        let (u, _, _) = sorted_svd(&g, cols)?;
        Ok(Self { v: u, mode: CombinerMode::Orthonormal, seed, rank: r, n_layers: n_w, r_a })
    }
}

fn check_combiner_dims(r: usize, n_w: usize, r_a: usize) -> Result<()> {
    ensure(r >= 1 && n_w >= 1 && r_a >= 1, || {
        format!("combiner dimensions must be positive (r={r}, n_w={n_w}, r_a={r_a})")
    })
}

/// Seeded `m x d` standard normal matrix.
pub fn generate_omega(seed: u64, m: usize, d: usize) -> Result<DMatrix<f64>> {
    ensure(m >= 1 && d >= 1, || format!("omega dimensions must be positive ({m}x{d})"))?;
    Ok(DMatrix::from_fn(m, d, |i, j| counter_normal(seed, tag::OMEGA, i as u64, j as u64)))
}

/// Top-`r` singular subspaces of the seeded `Omega`: `P = U^T`, `Q = V`.
pub fn generate_projectors(seed: u64, m: usize, d: usize, r: usize) -> Result<ProjectorPair> {
    ensure(r >= 1 && r <= m.min(d), || format!("rank r={r} must satisfy 1 <= r <= min(m, d) = {}", m.min(d)))?;
    let omega = generate_omega(seed, m, d)?;
    let (u, _, v) = sorted_svd(&omega, r)?;
    Ok(ProjectorPair { layer_index: 0, p: u.transpose(), q: v, seed, rank: r })
}

/// Combiner for `n_w` blocks of width `r` in transmission dimension `r_a`,
/// choosing the orthonormal construction whenever it fits.
pub fn generate_combiner(seed: u64, r: usize, n_w: usize, r_a: usize) -> Result<Combiner> {
    if r_a >= r * n_w {
        Combiner::orthonormal(seed, r, n_w, r_a)
    } else {
        Combiner::gaussian(seed, r, n_w, r_a)
    }
}

/// Thin SVD truncated to `k` components, ordered by decreasing singular
/// value, with each pair's sign fixed so the largest-magnitude entry of the
/// left vector is positive.
pub(crate) fn sorted_svd(a: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.ok_or_else(|| crate::error::invalid("SVD did not produce U"))?;
    let v_t = svd.v_t.ok_or_else(|| crate::error::invalid("SVD did not produce V^T"))?;
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&x, &y| s[y].total_cmp(&s[x]).then(x.cmp(&y)));
    let k = k.min(order.len());

    let mut uk = DMatrix::zeros(a.nrows(), k);
    let mut vk = DMatrix::zeros(a.ncols(), k);
    let mut sk = Vec::with_capacity(k);
    for (dst, &src) in order.iter().take(k).enumerate() {
        let ucol = u.column(src);
        let pivot = ucol
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (i, &x)| if x.abs() > best.1.abs() { (i, x) } else { best })
            .1;
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        uk.set_column(dst, &(ucol * sign));
        vk.set_column(dst, &(v_t.row(src).transpose() * sign));
        sk.push(s[src]);
    }
    Ok((uk, sk, vk))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_dev_from_identity(g: &DMatrix<f64>) -> f64 {
        let n = g.nrows();
        (g - DMatrix::<f64>::identity(n, n)).abs().max()
    }

    #[test]
    fn omega_is_deterministic_and_seed_sensitive() {
        let a = generate_omega(42, 3, 3).unwrap();
        let b = generate_omega(42, 3, 3).unwrap();
        let c = generate_omega(43, 3, 3).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn omega_moments() {
        let o = generate_omega(7, 200, 100).unwrap();
        let n = o.len() as f64;
        let mean = o.sum() / n;
        let var = o.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.05, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.1, "var {var}");
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(generate_omega(1, 0, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(generate_omega(1, 3, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn full_rank_projectors_are_orthonormal() {
        let pq = generate_projectors(1, 4, 4, 4).unwrap();
        assert!(max_dev_from_identity(&(&pq.p * pq.p.transpose())) <= 1e-9);
        assert!(max_dev_from_identity(&(pq.q.transpose() * &pq.q)) <= 1e-9);
    }

    #[test]
    fn rectangular_projectors_are_orthonormal() {
        for &(m, d, r) in &[(64, 32, 8), (5, 9, 3), (48, 64, 24)] {
            let pq = generate_projectors(3, m, d, r).unwrap();
            assert_eq!(pq.p.shape(), (r, m));
            assert_eq!(pq.q.shape(), (d, r));
            assert!(max_dev_from_identity(&(&pq.p * pq.p.transpose())) <= 1e-9);
            assert!(max_dev_from_identity(&(pq.q.transpose() * &pq.q)) <= 1e-9);
        }
    }

    #[test]
    fn projection_is_non_expansive() {
        let pq = generate_projectors(1, 64, 32, 8).unwrap();
        for s in 0..10 {
            let g = generate_omega(100 + s, 64, 32).unwrap();
            assert!((&pq.p * &g * &pq.q).norm() <= g.norm());
        }
    }

    #[test]
    fn projector_rank_bounds() {
        assert!(generate_projectors(1, 4, 3, 4).is_err());
        assert!(generate_projectors(1, 4, 3, 0).is_err());
        assert!(generate_projectors(1, 4, 3, 3).is_ok());
    }

    #[test]
    fn projectors_regenerate_bit_identically() {
        let a = generate_projectors(9, 12, 10, 4).unwrap();
        let b = generate_projectors(9, 12, 10, 4).unwrap();
        assert!(a.p.iter().zip(b.p.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.q.iter().zip(b.q.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    /// Cyclic Jacobi eigensolver for symmetric matrices; independent of the
    /// library SVD used by the implementation.
    fn jacobi_eigen(mut a: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let n = a.nrows();
        let mut v = DMatrix::<f64>::identity(n, n);
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)].powi(2))
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[(i, i)]).collect(), v)
    }

    #[test]
    fn projectors_match_jacobi_oracle() {
        let (seed, m, d, r) = (5, 6, 5, 2);
        let omega = generate_omega(seed, m, d).unwrap();
        let (evals, evecs) = jacobi_eigen(omega.transpose() * &omega);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| evals[b].total_cmp(&evals[a]));
        let pq = generate_projectors(seed, m, d, r).unwrap();
        for (k, &idx) in order.iter().take(r).enumerate() {
            let sigma = evals[idx].sqrt();
            let mut v = evecs.column(idx).into_owned();
            let mut u = &omega * &v / sigma;
            let pivot = u.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            if pivot < 0.0 {
                u = -u;
                v = -v;
            }
            for i in 0..m {
                assert!((pq.p[(k, i)] - u[i]).abs() <= 1e-8, "P[{k},{i}]");
            }
            for j in 0..d {
                assert!((pq.q[(j, k)] - v[j]).abs() <= 1e-8, "Q[{j},{k}]");
            }
        }
    }

    #[test]
    fn combiner_modes() {
        let c = generate_combiner(3, 2, 3, 8).unwrap();
        assert_eq!(c.mode, CombinerMode::Orthonormal);
        assert!(max_dev_from_identity(&(c.v.transpose() * &c.v)) <= 1e-9);

        let g = generate_combiner(3, 24, 14, 60).unwrap();
        assert_eq!(g.mode, CombinerMode::Gaussian);
        assert_eq!(g.v.shape(), (60, 336));
    }

    #[test]
    fn gaussian_combiner_variance() {
        let c = Combiner::gaussian(17, 8, 40, 100).unwrap();
        let n = c.v.len() as f64;
        let mean = c.v.sum() / n;
        let var = c.v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.005);
        assert!((var * 100.0 - 1.0).abs() < 0.05, "var*r_a = {}", var * 100.0);
    }

    #[test]
    fn gaussian_combiner_tail_frequency() {
        let c = generate_combiner(21, 4, 14, 40).unwrap();
        assert_eq!(c.mode, CombinerMode::Gaussian);
        let gram = c.v.transpose() * &c.v - DMatrix::<f64>::identity(56, 56);
        let exceed = gram.iter().filter(|x| x.abs() >= 1.0).count() as f64 / gram.len() as f64;
        assert!(exceed <= 4.0 * (-40.0f64 / 8.0).exp(), "frequency {exceed}");
    }

    #[test]
    fn blocks_are_column_slices() {
        let c = generate_combiner(5, 3, 4, 9).unwrap();
        for l in 0..4 {
            let b = c.block(l).unwrap();
            assert_eq!(b.shape(), (9, 3));
            for j in 0..3 {
                for i in 0..9 {
                    assert_eq!(b[(i, j)].to_bits(), c.v[(i, l * 3 + j)].to_bits());
                }
            }
        }
        assert!(matches!(c.block(4), Err(Error::IndexOutOfRange { index: 4, len: 4 })));
        assert_eq!(c.blocks().count(), 4);
    }
}
