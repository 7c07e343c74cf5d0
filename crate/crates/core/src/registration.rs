//! Rigid Coherent Point Drift.
//!
//! The points of `Y` act as centroids of an isotropic Gaussian mixture with a
//! uniform outlier component of weight `omega`; EM fits a similarity
//! transform `y -> s R y + t` that moves the centroids onto the data `X`.
//! The E-step posterior is the M x N matrix `P` every similarity measure is
//! computed from.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::linalg::thin_svd;

const DIM: f64 = 3.0;

/// Relative size of the variance floor with respect to the squared
/// bounding-box diagonal of `X`.
pub const SIGMA2_FLOOR_RATIO: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Point) -> Point {
        Point::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        cloud
            .map_points(|p| self.apply(p))
            .expect("a finite similarity transform keeps a cloud valid")
    }

    /// Frobenius deviation of `RᵀR` from identity and of `det R` from +1.
    pub fn orthonormality_error(&self) -> (f64, f64) {
        let r = &self.rotation;
        (
            (r.transpose() * r - Matrix3::identity()).norm(),
            (r.determinant() - 1.0).abs(),
        )
    }
}

/// Serializable summary of a transform, row-major rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSummary {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for TransformSummary {
    fn from(t: &RigidTransform) -> Self {
        let r = &t.rotation;
        Self {
            scale: t.scale,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmState {
    pub sigma2: f64,
    pub omega: f64,
    pub transform: RigidTransform,
    pub iteration: usize,
    pub neg_log_likelihood: f64,
}

impl GmmState {
    pub fn new(sigma2: f64, omega: f64, transform: RigidTransform) -> Self {
        Self {
            sigma2,
            omega,
            transform,
            iteration: 0,
            neg_log_likelihood: f64::NAN,
        }
    }
}

/// Posterior matrix `p(y_m | x_n)`: rows index `Y` (M), columns index `X` (N).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    entries: DMatrix<f64>,
}

impl ProbabilityMatrix {
    /// Wraps a matrix after checking every entry is in `[0, 1]` and every
    /// column sums to at most one.
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        if entries.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("posterior entries must lie in [0, 1]".into()));
        }
        if entries
            .column_iter()
            .any(|c| c.iter().sum::<f64>() > 1.0 + 1e-9)
        {
            return Err(Error::Invalid("posterior column sums must not exceed 1".into()));
        }
        Ok(Self { entries })
    }

    pub fn m_count(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_count(&self) -> usize {
        self.entries.ncols()
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.entries[(m, n)]
    }

    /// Column `n` (the posterior over all centroids for data point `x_n`).
    pub fn column(&self, n: usize) -> &[f64] {
        let m = self.m_count();
        &self.entries.as_slice()[n * m..(n + 1) * m]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationConfig {
    pub omega: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            omega: 0.1,
            max_iters: 150,
            tol: 1e-8,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.omega) {
            return Err(Error::param("omega", "must lie in [0, 1)"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::param("tol", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub sigma2: f64,
    pub neg_log_likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub transform: RigidTransform,
    /// Posterior at the final parameters, in the input point order.
    pub probability: ProbabilityMatrix,
    pub state: GmmState,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
}

/// `(1 / (D N M)) Σ_n Σ_m ‖x_n − y_m‖²`.
pub fn init_sigma2(x: &PointCloud, y: &PointCloud) -> f64 {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (cx, cy) = (x.centroid(), y.centroid());
    // Σ_n Σ_m ‖x_n − y_m‖² = M Σ‖x − x̄‖² + N Σ‖y − ȳ‖² + M N ‖x̄ − ȳ‖²
    let sx: f64 = x.points().iter().map(|p| (p - cx).norm_squared()).sum();
    let sy: f64 = y.points().iter().map(|p| (p - cy).norm_squared()).sum();
    (m * sx + n * sy + m * n * (cx - cy).norm_squared()) / (DIM * n * m)
}

pub fn sigma2_floor(x: &PointCloud) -> f64 {
    let d = x.bounding_box().diagonal;
    SIGMA2_FLOOR_RATIO * d * d
}

/// Outlier constant `(2πσ²)^{D/2} · ω/(1−ω) · M/N` of the posterior denominator.
pub fn outlier_constant(sigma2: f64, omega: f64, m: usize, n: usize) -> f64 {
    if omega == 0.0 {
        return 0.0;
    }
    (2.0 * PI * sigma2).powf(DIM / 2.0) * (omega / (1.0 - omega)) * (m as f64 / n as f64)
}

fn flatten(points: &[Point]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p.x, p.y, p.z]).collect()
}

/// Fills `out` (M x N) with the posterior and returns the negative
/// log-likelihood of the full mixture at the same parameters.
fn posterior_into(
    x: &[[f64; 3]],
    y: &[[f64; 3]],
    sigma2: f64,
    omega: f64,
    out: &mut DMatrix<f64>,
) -> f64 {
    let (m, n) = (y.len(), x.len());
    debug_assert_eq!(out.shape(), (m, n));
    let c = outlier_constant(sigma2, omega, m, n);
    let inv = 1.0 / (2.0 * sigma2);
    let log_gauss_weight = ((1.0 - omega) / m as f64).ln() - 0.5 * DIM * (2.0 * PI * sigma2).ln();
    let log_uniform = (omega > 0.0).then(|| (omega / n as f64).ln());
    let mut nll = 0.0;
    for (xn, col) in x.iter().zip(out.as_mut_slice().chunks_exact_mut(m)) {
        let mut amax = f64::NEG_INFINITY;
        for (ym, slot) in y.iter().zip(col.iter_mut()) {
            let d0 = xn[0] - ym[0];
            let d1 = xn[1] - ym[1];
            let d2 = xn[2] - ym[2];
            let a = -(d0 * d0 + d1 * d1 + d2 * d2) * inv;
            *slot = a;
            if a > amax {
                amax = a;
            }
        }
        let mut sum = 0.0;
        for slot in col.iter_mut() {
            let e = (*slot - amax).exp();
            *slot = e;
            sum += e;
        }
        let outlier = if c > 0.0 { c * (-amax).exp() } else { 0.0 };
        let denom = sum + outlier;
        for slot in col.iter_mut() {
            *slot /= denom;
        }
        let log_mix = log_gauss_weight + amax + sum.ln();
        let log_px = match log_uniform {
            Some(lu) => {
                let hi = log_mix.max(lu);
                hi + ((log_mix - hi).exp() + (lu - hi).exp()).ln()
            }
            None => log_mix,
        };
        nll -= log_px;
    }
    nll
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::DegenerateSigma { sigma2 })
    }
}

/// Posterior of every (already transformed) centroid for every data point.
pub fn e_step(x: &PointCloud, y_transformed: &PointCloud, state: &GmmState) -> Result<ProbabilityMatrix> {
    e_step_with_likelihood(x, y_transformed, state).map(|(p, _)| p)
}

/// [`e_step`] plus the negative log-likelihood at the same parameters.
pub fn e_step_with_likelihood(
    x: &PointCloud,
    y_transformed: &PointCloud,
    state: &GmmState,
) -> Result<(ProbabilityMatrix, f64)> {
    check_sigma2(state.sigma2)?;
    let mut entries = DMatrix::zeros(y_transformed.len(), x.len());
    let nll = posterior_into(
        &flatten(x.points()),
        &flatten(y_transformed.points()),
        state.sigma2,
        state.omega,
        &mut entries,
    );
    Ok((ProbabilityMatrix { entries }, nll))
}

/// Closed-form update of `(s, R, t)` and `σ²` from the posterior.
pub fn m_step(x: &PointCloud, y_original: &PointCloud, p: &ProbabilityMatrix) -> Result<(RigidTransform, f64)> {
    m_step_raw(
        &flatten(x.points()),
        &flatten(y_original.points()),
        p.matrix(),
        sigma2_floor(x),
    )
}

fn m_step_raw(
    x: &[[f64; 3]],
    y: &[[f64; 3]],
    p: &DMatrix<f64>,
    floor: f64,
) -> Result<(RigidTransform, f64)> {
    let m = y.len();
    let mut col_sums = vec![0.0; x.len()];
    let mut row_sums = vec![0.0; m];
    for (col, cs) in p.as_slice().chunks_exact(m).zip(col_sums.iter_mut()) {
        let mut s = 0.0;
        for (v, rs) in col.iter().zip(row_sums.iter_mut()) {
            s += v;
            *rs += v;
        }
        *cs = s;
    }
    let sp: f64 = col_sums.iter().sum();
    if !(sp > 0.0) {
        return Err(Error::SingularSolve("total posterior mass is zero"));
    }
    let weighted_mean = |pts: &[[f64; 3]], w: &[f64]| {
        let mut acc = Vector3::zeros();
        for (q, &wi) in pts.iter().zip(w) {
            acc += wi * Vector3::new(q[0], q[1], q[2]);
        }
        acc / sp
    };
    let mu_x = weighted_mean(x, &col_sums);
    let mu_y = weighted_mean(y, &row_sums);

    let yc: Vec<Vector3<f64>> = y
        .iter()
        .map(|q| Vector3::new(q[0], q[1], q[2]) - mu_y)
        .collect();
    // A = X̂ᵀ Pᵀ Ŷ
    let mut a = Matrix3::zeros();
    let mut x_spread = 0.0;
    for ((xn, col), &cs) in x.iter().zip(p.as_slice().chunks_exact(m)).zip(&col_sums) {
        let xc = Vector3::new(xn[0], xn[1], xn[2]) - mu_x;
        let mut w = Vector3::zeros();
        for (v, ycm) in col.iter().zip(&yc) {
            if *v != 0.0 {
                w += *v * ycm;
            }
        }
        a += xc * w.transpose();
        x_spread += cs * xc.norm_squared();
    }
    if a.iter().all(|v| *v == 0.0) {
        return Err(Error::SingularSolve("cross-covariance is zero"));
    }
    let y_spread: f64 = yc
        .iter()
        .zip(&row_sums)
        .map(|(v, &w)| w * v.norm_squared())
        .sum();
    if !(y_spread > 0.0) {
        return Err(Error::SingularSolve("weighted spread of Y is zero"));
    }

    let svd = thin_svd(&a)?;
    let u: Matrix3<f64> = svd.u.fixed_view::<3, 3>(0, 0).into_owned();
    let v_t: Matrix3<f64> = svd.v.fixed_view::<3, 3>(0, 0).transpose();
    let reflect = (u * v_t).determinant();
    let c = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, reflect.signum()));
    let rotation = u * c * v_t;
    let tr_ar = (a.transpose() * rotation).trace();
    let scale = tr_ar / y_spread;
    if !(scale > 0.0) {
        return Err(Error::SingularSolve("non-positive scale estimate"));
    }
    let translation = mu_x - scale * rotation * mu_y;
    let sigma2 = ((x_spread - scale * tr_ar) / (sp * DIM)).max(floor);
    Ok((RigidTransform::new(scale, rotation, translation), sigma2))
}

pub fn register_rigid(x: &PointCloud, y: &PointCloud, config: &RegistrationConfig) -> Result<Registration> {
    register_rigid_with(x, y, config, |_| {})
}

/// Runs EM to convergence, reporting every E-step through `observer`.
///
/// Stops when `|ΔL| <= tol·|L|` between successive E-steps or after
/// `max_iters` M-steps; the returned posterior is evaluated at the returned
/// parameters.
pub fn register_rigid_with(
    x: &PointCloud,
    y: &PointCloud,
    config: &RegistrationConfig,
    mut observer: impl FnMut(&IterationRecord),
) -> Result<Registration> {
    config.validate()?;
    let xs = flatten(x.points());
    let ys = flatten(y.points());
    let floor = sigma2_floor(x);
    let mut sigma2 = init_sigma2(x, y).max(floor);
    check_sigma2(sigma2)?;

    let mut transform = RigidTransform::identity();
    let mut entries = DMatrix::zeros(ys.len(), xs.len());
    let mut history = Vec::new();
    let mut previous: Option<f64> = None;
    let mut converged = false;
    let mut iteration = 0;
    let nll = loop {
        let moved: Vec<[f64; 3]> = y
            .points()
            .iter()
            .map(|p| {
                let q = transform.apply(p);
                [q.x, q.y, q.z]
            })
            .collect();
        let nll = posterior_into(&xs, &moved, sigma2, config.omega, &mut entries);
        let record = IterationRecord {
            iteration,
            sigma2,
            neg_log_likelihood: nll,
        };
        log::trace!("cpd iteration={iteration} sigma2={sigma2:e} L={nll}");
        observer(&record);
        history.push(record);
        if let Some(prev) = previous {
            if (prev - nll).abs() <= config.tol * nll.abs() {
                converged = true;
                break nll;
            }
        }
        if iteration == config.max_iters {
            break nll;
        }
        previous = Some(nll);
        let (t, s2) = m_step_raw(&xs, &ys, &entries, floor)?;
        transform = t;
        sigma2 = s2;
        check_sigma2(sigma2)?;
        iteration += 1;
    };

    Ok(Registration {
        transform,
        probability: ProbabilityMatrix { entries },
        state: GmmState {
            sigma2,
            omega: config.omega,
            transform,
            iteration,
            neg_log_likelihood: nll,
        },
        history,
        converged,
    })
}
