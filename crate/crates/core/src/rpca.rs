//! Robust PCA by the inexact augmented Lagrange multiplier method.
//!
//! Splits `C` into a low-rank `A` and a sparse `E` by alternating entrywise
//! shrinkage on `E` and singular value thresholding on `A`, with multiplier
//! updates `Y += μ (C − A − E)` and a geometric `μ` schedule.
//!
//! Small problems use a dense SVD of the full iterate. Larger ones
//! (`min(m, n) > 512`) only need the singular triplets above the current
//! threshold; those come from a warm-started block subspace iteration whose
//! width tracks the current rank plus ten.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{singular_values, thin_svd};

/// Largest `min(m, n)` handled with a dense SVD under [`SvdBackend::Auto`].
pub const FULL_SVD_LIMIT: usize = 512;
/// Iterate sizes (entries) up to which the subspace backend materializes
/// `C − E + Y/μ`; larger problems apply it implicitly to save one matrix.
const MATERIALIZE_LIMIT: usize = 25_000_000;
const RHO: f64 = 1.5;
const MU_BAR_RATIO: f64 = 1e7;
const SUBSPACE_OVERSAMPLE: usize = 10;
const SUBSPACE_POWER_ITERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SvdBackend {
    #[default]
    Auto,
    Full,
    Subspace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpcaConfig {
    /// Sparse-term weight; `None` means `1/√max(m, n)`.
    pub lambda: Option<f64>,
    pub tol: f64,
    pub max_iters: usize,
    #[serde(default)]
    pub svd: SvdBackend,
}

impl Default for RpcaConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            tol: 1e-7,
            max_iters: 1000,
            svd: SvdBackend::Auto,
        }
    }
}

/// `A = U diag(σ) Vᵀ` kept in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl LowRank {
    fn empty(m: usize, n: usize) -> Self {
        Self {
            u: DMatrix::zeros(m, 0),
            sigma: DVector::zeros(0),
            v: DMatrix::zeros(n, 0),
        }
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.nrows(), self.v.nrows())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (k, s) in self.sigma.iter().enumerate() {
            us.column_mut(k).scale_mut(*s);
        }
        us * self.v.transpose()
    }

    /// `Σ_ij A_ij` without forming `A`.
    pub fn sum(&self) -> f64 {
        (0..self.rank())
            .map(|k| self.sigma[k] * self.u.column(k).sum() * self.v.column(k).sum())
            .sum()
    }

    fn column_into(&self, j: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..self.rank() {
            let w = self.sigma[k] * self.v[(j, k)];
            if w != 0.0 {
                for (o, u) in out.iter_mut().zip(self.u.column(k).iter()) {
                    *o += w * u;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RpcaResult {
    pub low_rank: LowRank,
    pub sparse: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `‖C − A − E‖_F / ‖C‖_F` at the returned iterate.
    pub residual: f64,
}

/// Entrywise soft threshold.
#[inline]
fn shrink(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Largest singular value by power iteration on `CᵀC`.
pub fn spectral_norm(c: &DMatrix<f64>) -> f64 {
    let n = c.ncols();
    if n == 0 || c.nrows() == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5bec_7a1);
    let mut v = DVector::from_fn(n, |_, _| rng.gen_range(0.5..1.5));
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..1000 {
        let cv = c * &v;
        let w = c.tr_mul(&cv);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm.sqrt();
        v = w / norm;
        if (next - estimate).abs() <= 1e-12 * next {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// The matrix handed to singular value thresholding, `C − E + Y/μ`.
enum Iterate<'a> {
    Dense(&'a DMatrix<f64>),
    Implicit {
        c: &'a DMatrix<f64>,
        e: &'a DMatrix<f64>,
        y: &'a DMatrix<f64>,
        inv_mu: f64,
    },
}

impl Iterate<'_> {
    /// `W B`.
    fn mul(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Iterate::Dense(w) => *w * b,
            Iterate::Implicit { c, e, y, inv_mu } => {
                let mut out = *c * b;
                out -= *e * b;
                out += (*y * b) * *inv_mu;
                out
            }
        }
    }

    /// `Wᵀ B`.
    fn tr_mul(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Iterate::Dense(w) => w.tr_mul(b),
            Iterate::Implicit { c, e, y, inv_mu } => {
                let mut out = c.tr_mul(b);
                out -= e.tr_mul(b);
                out += y.tr_mul(b) * *inv_mu;
                out
            }
        }
    }
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// Dense SVD, keeping triplets with `σ > threshold` and shrinking them.
fn svt_full(w: &DMatrix<f64>, threshold: f64) -> Result<LowRank> {
    let (m, n) = w.shape();
    let svd = thin_svd(w)?;
    let keep: Vec<usize> = (0..svd.s.len()).filter(|&k| svd.s[k] > threshold).collect();
    if keep.is_empty() {
        return Ok(LowRank::empty(m, n));
    }
    Ok(LowRank {
        u: svd.u.select_columns(&keep),
        sigma: DVector::from_iterator(keep.len(), keep.iter().map(|&k| svd.s[k] - threshold)),
        v: svd.v.select_columns(&keep),
    })
}

/// Leading `k` singular triplets of `w` by block subspace iteration,
/// starting from `warm` (previous right singular vectors) padded with
/// seeded random columns.
fn leading_triplets(
    w: &Iterate<'_>,
    shape: (usize, usize),
    k: usize,
    warm: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let (_, n) = shape;
    let reuse = warm.ncols().min(k);
    let mut omega = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0));
    if reuse > 0 {
        omega.columns_mut(0, reuse).copy_from(&warm.columns(0, reuse));
    }
    let mut q = orthonormalize(w.mul(&omega));
    for _ in 0..SUBSPACE_POWER_ITERS {
        let z = orthonormalize(w.tr_mul(&q));
        q = orthonormalize(w.mul(&z));
    }
    // B = Qᵀ W, held transposed as Wᵀ Q (n x k)
    let bt = w.tr_mul(&q);
    // Bᵀ = Ub S Vbᵀ  =>  B = Vb S Ubᵀ, so W ≈ (Q Vb) S Ubᵀ
    let svd = thin_svd(&bt)?;
    Ok((&q * svd.v, svd.s, svd.u))
}

pub fn ialm_rpca(c: &DMatrix<f64>, config: &RpcaConfig) -> Result<RpcaResult> {
    let (m, n) = c.shape();
    if m == 0 || n == 0 {
        return Err(Error::Invalid("RPCA input must be at least 1 x 1".into()));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let c_norm = c.norm();
    if c_norm == 0.0 {
        return Ok(RpcaResult {
            low_rank: LowRank::empty(m, n),
            sparse: DMatrix::zeros(m, n),
            iterations: 1,
            converged: true,
            residual: 0.0,
        });
    }
    let lambda = config
        .lambda
        .unwrap_or_else(|| 1.0 / (m.max(n) as f64).sqrt());
    if !(lambda > 0.0) {
        return Err(Error::param("lambda", "must be positive"));
    }
    let subspace = match config.svd {
        SvdBackend::Auto => m.min(n) > FULL_SVD_LIMIT,
        SvdBackend::Full => false,
        SvdBackend::Subspace => true,
    };
    let materialize = !subspace || m * n <= MATERIALIZE_LIMIT;

    let norm_two = if subspace {
        spectral_norm(c)
    } else {
        singular_values(c)?[0]
    };
    let norm_inf = c.amax() / lambda;
    let mut y = c / norm_two.max(norm_inf);
    let mut mu = 1.25 / norm_two;
    let mu_bar = mu * MU_BAR_RATIO;

    let mut e = DMatrix::<f64>::zeros(m, n);
    let mut a = LowRank::empty(m, n);
    let mut w = if materialize {
        DMatrix::<f64>::zeros(m, n)
    } else {
        DMatrix::<f64>::zeros(0, 0)
    };
    let mut a_col = vec![0.0; m];
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a1_5eed);
    let mut predicted_rank = SUBSPACE_OVERSAMPLE;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iters {
        iterations += 1;
        let inv_mu = 1.0 / mu;
        let tau = lambda * inv_mu;

        // E = shrink(C − A + Y/μ, λ/μ); W = C − E + Y/μ
        for j in 0..n {
            a.column_into(j, &mut a_col);
            let cj = c.column(j);
            let yj = y.column(j);
            let mut ej = e.column_mut(j);
            for i in 0..m {
                let base = cj[i] + inv_mu * yj[i];
                ej[i] = shrink(base - a_col[i], tau);
            }
            if materialize {
                let mut wj = w.column_mut(j);
                for i in 0..m {
                    wj[i] = cj[i] + inv_mu * yj[i] - ej[i];
                }
            }
        }

        a = if subspace {
            let op = if materialize {
                Iterate::Dense(&w)
            } else {
                Iterate::Implicit {
                    c,
                    e: &e,
                    y: &y,
                    inv_mu,
                }
            };
            let cap = m.min(n);
            let mut k = predicted_rank.clamp(1, cap);
            loop {
                let (u, s, v) = leading_triplets(&op, (m, n), k, &a.v, &mut rng)?;
                let above = s.iter().filter(|&&v| v > inv_mu).count();
                if above < k || k == cap {
                    let keep: Vec<usize> = (0..above).collect();
                    break LowRank {
                        u: u.select_columns(&keep),
                        sigma: DVector::from_iterator(above, s.iter().take(above).map(|v| v - inv_mu)),
                        v: v.select_columns(&keep),
                    };
                }
                k = (k + k.max(SUBSPACE_OVERSAMPLE)).min(cap);
            }
        } else {
            svt_full(&w, inv_mu)?
        };
        predicted_rank = a.rank() + SUBSPACE_OVERSAMPLE;

        // Z = C − A − E; Y += μ Z
        let mut z_norm2 = 0.0;
        for j in 0..n {
            a.column_into(j, &mut a_col);
            let cj = c.column(j);
            let ej = e.column(j);
            let mut yj = y.column_mut(j);
            for i in 0..m {
                let z = cj[i] - a_col[i] - ej[i];
                z_norm2 += z * z;
                yj[i] += mu * z;
            }
        }
        residual = z_norm2.sqrt() / c_norm;
        log::trace!(
            "ialm iteration={iterations} residual={residual:e} rank={} mu={mu:e}",
            a.rank()
        );
        mu = (mu * RHO).min(mu_bar);
        if residual < config.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("ialm stopped after {iterations} iterations at residual {residual:e}");
    }
    Ok(RpcaResult {
        low_rank: a,
        sparse: e,
        iterations,
        converged,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| {
            // Box-Muller
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    fn l1(m: &DMatrix<f64>) -> f64 {
        m.iter().map(|v| v.abs()).sum()
    }

    #[test]
    fn zero_matrix_is_a_fixed_point() {
        let r = ialm_rpca(&DMatrix::zeros(4, 6), &RpcaConfig::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
        assert_eq!(r.low_rank.rank(), 0);
        assert!(r.sparse.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_rejected() {
        let mut c = DMatrix::zeros(2, 2);
        c[(0, 1)] = f64::NAN;
        assert!(matches!(
            ialm_rpca(&c, &RpcaConfig::default()),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn rank_one_recovered_without_sparse_part() {
        let u = gaussian(50, 1, 1);
        let v = gaussian(50, 1, 2);
        let c = &u * v.transpose();
        let r = ialm_rpca(&c, &RpcaConfig::default()).unwrap();
        assert!(r.converged);
        let a = r.low_rank.to_dense();
        assert!((&a - &c).norm() / c.norm() <= 1e-5);
        assert!(l1(&r.sparse) / l1(&c) <= 1e-4);
        assert!(r.residual <= 1e-7);
    }

    #[test]
    fn constant_matrix_stays_low_rank() {
        let c = DMatrix::from_element(30, 20, 1.0 / 30.0);
        let r = ialm_rpca(&c, &RpcaConfig::default()).unwrap();
        let mean = r.low_rank.sum() / 600.0;
        assert!((mean - 1.0 / 30.0).abs() < 1e-6, "{mean}");
    }

    #[test]
    fn factored_sum_matches_dense() {
        let u = gaussian(7, 2, 3);
        let v = gaussian(5, 2, 4);
        let lr = LowRank {
            u,
            sigma: DVector::from_vec(vec![2.0, 0.5]),
            v,
        };
        assert!((lr.sum() - lr.to_dense().sum()).abs() < 1e-12);
    }

    #[test]
    fn subspace_backend_agrees_with_full() {
        let l = gaussian(80, 3, 5) * gaussian(60, 3, 6).transpose();
        let mut c = l.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let (i, j) = (rng.gen_range(0..80), rng.gen_range(0..60));
            c[(i, j)] += rng.gen_range(-5.0..5.0);
        }
        let full = ialm_rpca(&c, &RpcaConfig::default()).unwrap();
        let sub = ialm_rpca(
            &c,
            &RpcaConfig {
                svd: SvdBackend::Subspace,
                ..RpcaConfig::default()
            },
        )
        .unwrap();
        assert!(full.converged && sub.converged);
        let (a, b) = (full.low_rank.to_dense(), sub.low_rank.to_dense());
        assert!((&a - &b).norm() / a.norm() < 1e-5, "{}", (&a - &b).norm() / a.norm());
        assert!((&a - &l).norm() / l.norm() < 1e-4);
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let c = gaussian(40, 25, 8);
        let exact = singular_values(&c).unwrap()[0];
        assert!((spectral_norm(&c) - exact).abs() < 1e-9 * exact);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn corrupted(seed: u64) -> DMatrix<f64> {
            let mut c = gaussian(24, 18, seed) * gaussian(18, 2, seed + 1) * gaussian(2, 18, seed + 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
            for _ in 0..20 {
                let (i, j) = (rng.gen_range(0..24), rng.gen_range(0..18));
                c[(i, j)] += rng.gen_range(-3.0..3.0);
            }
            c
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]

            #[test]
            fn permutation_equivariance(seed in 0u64..1000, shift_r in 1usize..23, shift_c in 1usize..17) {
                let c = corrupted(seed);
                let rows: Vec<usize> = (0..24).map(|i| (i * 5 + shift_r) % 24).collect();
                let cols: Vec<usize> = (0..18).map(|j| (j * 5 + shift_c) % 18).collect();
                let permuted = c.select_rows(&rows).select_columns(&cols);
                let cfg = RpcaConfig::default();
                let base = ialm_rpca(&c, &cfg).unwrap();
                let perm = ialm_rpca(&permuted, &cfg).unwrap();
                let a = base.low_rank.to_dense().select_rows(&rows).select_columns(&cols);
                let scale = c.norm();
                prop_assert!((a - perm.low_rank.to_dense()).norm() / scale < 1e-6);
                let e = base.sparse.select_rows(&rows).select_columns(&cols);
                prop_assert!((e - &perm.sparse).norm() / scale < 1e-6);
            }

            #[test]
            fn positive_homogeneity(seed in 0u64..1000, alpha in 0.01f64..100.0) {
                let c = corrupted(seed);
                let cfg = RpcaConfig::default();
                let base = ialm_rpca(&c, &cfg).unwrap();
                let scaled = ialm_rpca(&(&c * alpha), &cfg).unwrap();
                let a = base.low_rank.to_dense() * alpha;
                let tol = 1e-6 * alpha * c.norm();
                prop_assert!((a - scaled.low_rank.to_dense()).norm() < tol);
                prop_assert!((&base.sparse * alpha - &scaled.sparse).norm() < tol);
            }
        }
    }
}
