//! Similarity distances computed from a registered pair and its posterior
//! matrix: LR (low-rank mass of `Pᵀ`), KURT (mean column kurtosis of `P`)
//! and CORR (Pearson coefficient over argmax correspondences).

use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::acceleration::{plan_segments, segmented_lr};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::registration::{GmmState, ProbabilityMatrix};
use crate::registry::{Params, Registry};
use crate::rpca::{ialm_rpca, RpcaConfig};

/// Which side of a threshold indicates a copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    LowerIsCopy,
    HigherIsCopy,
}

/// Row-wise argmax of `P`: `pairs[m] = (m, n*)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Correspondences {
    pub pairs: Vec<(usize, usize)>,
}

/// For every row `m`, the column with the largest posterior; ties go to the
/// smallest column index.
pub fn correspondences(p: &ProbabilityMatrix) -> Correspondences {
    let m = p.m_count();
    let mut best = vec![f64::NEG_INFINITY; m];
    let mut arg = vec![0usize; m];
    for n in 0..p.n_count() {
        for (row, &v) in p.column(n).iter().enumerate() {
            if v > best[row] {
                best[row] = v;
                arg[row] = n;
            }
        }
    }
    Correspondences {
        pairs: arg.into_iter().enumerate().collect(),
    }
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
struct Sum {
    total: f64,
    carry: f64,
}

impl Sum {
    fn add(&mut self, v: f64) {
        let t = self.total + v;
        if self.total.abs() >= v.abs() {
            self.carry += (self.total - t) + v;
        } else {
            self.carry += (v - t) + self.total;
        }
        self.total = t;
    }

    fn value(self) -> f64 {
        self.total + self.carry
    }
}

/// Population kurtosis `μ₄ / σ⁴`. A zero-variance sample yields 0.
///
/// Moments use compensated sums: long columns of near-identical entries
/// otherwise lose several digits.
pub fn kurtosis(values: &[f64]) -> f64 {
    let len = values.len() as f64;
    let mut sum = Sum::default();
    values.iter().for_each(|&v| sum.add(v));
    let mean = sum.value() / len;
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let (mut s2, mut s4) = (Sum::default(), Sum::default());
    for v in values {
        let d = v - mean;
        let d2 = d * d;
        s2.add(d2);
        s4.add(d2 * d2);
    }
    let m2 = s2.value() / len;
    let m4 = s4.value() / len;
    // deviations at rounding level of the values count as zero variance
    let noise = 4.0 * f64::EPSILON * scale;
    if m2 <= noise * noise {
        return 0.0;
    }
    m4 / (m2 * m2)
}

/// Mean kurtosis over the columns of `P`.
pub fn kurt_distance(p: &ProbabilityMatrix) -> f64 {
    let n = p.n_count();
    (0..n).map(|j| kurtosis(p.column(j))).sum::<f64>() / n as f64
}

/// Pearson coefficient between `X*` (row m = `x_{n*(m)}`) and `Y*`
/// (row m = `y_m`), centered on the grand mean of all `3M` entries.
pub fn corr_distance(x: &PointCloud, y: &PointCloud, p: &ProbabilityMatrix) -> Result<f64> {
    if p.m_count() != y.len() || p.n_count() != x.len() {
        return Err(Error::Invalid(format!(
            "posterior is {}x{} but clouds have M={} N={}",
            p.m_count(),
            p.n_count(),
            y.len(),
            x.len()
        )));
    }
    let corr = correspondences(p);
    let xs: Vec<[f64; 3]> = corr
        .pairs
        .iter()
        .map(|&(_, n)| {
            let q = x.points()[n];
            [q.x, q.y, q.z]
        })
        .collect();
    let ys: Vec<[f64; 3]> = y.points().iter().map(|q| [q.x, q.y, q.z]).collect();
    pearson_grand_mean(&xs, &ys)
}

pub(crate) fn pearson_grand_mean(xs: &[[f64; 3]], ys: &[[f64; 3]]) -> Result<f64> {
    let count = (3 * xs.len()) as f64;
    let mean = |rows: &[[f64; 3]]| rows.iter().flatten().sum::<f64>() / count;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in xs.iter().flatten().zip(ys.iter().flatten()) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("X*"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("Y*"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean entry of the low-rank component of `Pᵀ`.
pub fn lr_distance(p: &ProbabilityMatrix, rpca: &RpcaConfig) -> Result<f64> {
    lr_of_transposed(p.matrix().transpose(), rpca)
}

/// [`lr_distance`] that consumes `p`, so the posterior and its transpose
/// are never both held while IALM runs.
pub fn lr_distance_owned(p: ProbabilityMatrix, rpca: &RpcaConfig) -> Result<f64> {
    lr_of_transposed(p.into_matrix().transpose(), rpca)
}

fn lr_of_transposed(c: DMatrix<f64>, rpca: &RpcaConfig) -> Result<f64> {
    let result = ialm_rpca(&c, rpca)?;
    if !result.converged {
        log::warn!(
            "IALM did not converge on a {}x{} matrix (residual {:e})",
            c.nrows(),
            c.ncols(),
            result.residual
        );
    }
    // `+ 0.0` turns a negative zero into a plain zero
    Ok(result.low_rank.sum() / (c.nrows() * c.ncols()) as f64 + 0.0)
}

/// Settings measures may consult beyond the posterior itself.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSettings {
    pub rpca: RpcaConfig,
    /// Block size for segmented LR; `None` computes LR on the whole matrix.
    pub segment_t: Option<usize>,
    /// Unsegmented LR is skipped when `M·N` exceeds this.
    pub lr_max_elements: usize,
}

impl Default for MeasureSettings {
    fn default() -> Self {
        Self {
            rpca: RpcaConfig::default(),
            segment_t: None,
            lr_max_elements: 20_000 * 20_000,
        }
    }
}

/// Everything a measure sees: the registered and rearranged clouds, the
/// posterior rebuilt on that order, and the converged mixture state.
#[derive(Debug, Clone, Copy)]
pub struct MeasureContext<'a> {
    pub x: &'a PointCloud,
    pub y: &'a PointCloud,
    pub probability: &'a ProbabilityMatrix,
    pub state: &'a GmmState,
    pub settings: &'a MeasureSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub value: f64,
    pub notes: Vec<String>,
}

impl From<f64> for Measurement {
    fn from(value: f64) -> Self {
        Self {
            value,
            notes: Vec::new(),
        }
    }
}

pub trait Measure: Send + Sync {
    fn name(&self) -> &'static str;
    fn polarity(&self) -> Polarity;
    /// Returns [`Error::MeasureSkipped`] when the configuration rules the
    /// measure out for this pair.
    fn compute(&self, ctx: &MeasureContext<'_>) -> Result<Measurement>;
}

pub struct LowRankMeasure;

impl Measure for LowRankMeasure {
    fn name(&self) -> &'static str {
        "lr"
    }

    fn polarity(&self) -> Polarity {
        Polarity::LowerIsCopy
    }

    fn compute(&self, ctx: &MeasureContext<'_>) -> Result<Measurement> {
        if let Some(t) = ctx.settings.segment_t {
            let plan = plan_segments(ctx.x, ctx.y, t)?;
            let seg = segmented_lr(ctx.x, ctx.y, &plan, ctx.state, &ctx.settings.rpca)?;
            let mut notes = vec![format!("segment:T={t},blocks={}", plan.block_count)];
            if seg.empty_blocks > 0 {
                notes.push(format!("empty_blocks={}", seg.empty_blocks));
            }
            return Ok(Measurement {
                value: seg.value,
                notes,
            });
        }
        let elements = ctx.probability.m_count() * ctx.probability.n_count();
        if elements > ctx.settings.lr_max_elements {
            return Err(Error::MeasureSkipped {
                measure: "lr",
                reason: format!(
                    "{}x{} posterior exceeds {} elements without segmentation",
                    ctx.probability.m_count(),
                    ctx.probability.n_count(),
                    ctx.settings.lr_max_elements
                ),
            });
        }
        lr_distance(ctx.probability, &ctx.settings.rpca).map(Measurement::from)
    }
}

pub struct KurtosisMeasure;

impl Measure for KurtosisMeasure {
    fn name(&self) -> &'static str {
        "kurt"
    }

    fn polarity(&self) -> Polarity {
        Polarity::HigherIsCopy
    }

    fn compute(&self, ctx: &MeasureContext<'_>) -> Result<Measurement> {
        Ok(kurt_distance(ctx.probability).into())
    }
}

pub struct CorrelationMeasure;

impl Measure for CorrelationMeasure {
    fn name(&self) -> &'static str {
        "corr"
    }

    fn polarity(&self) -> Polarity {
        Polarity::HigherIsCopy
    }

    fn compute(&self, ctx: &MeasureContext<'_>) -> Result<Measurement> {
        corr_distance(ctx.x, ctx.y, ctx.probability).map(Measurement::from)
    }
}

pub const DEFAULT_MEASURES: [&str; 3] = ["lr", "kurt", "corr"];

pub fn builtin_measures() -> Registry<dyn Measure> {
    let mut reg: Registry<dyn Measure> = Registry::new("measure");
    reg.register("lr", |p: &Params| {
        p.expect_only(&[])?;
        Ok(Box::new(LowRankMeasure))
    })
    .register("kurt", |p: &Params| {
        p.expect_only(&[])?;
        Ok(Box::new(KurtosisMeasure))
    })
    .register("corr", |p: &Params| {
        p.expect_only(&[])?;
        Ok(Box::new(CorrelationMeasure))
    });
    reg
}

/// Process-wide registry of the built-in measures.
pub fn measures() -> &'static Registry<dyn Measure> {
    static REGISTRY: OnceLock<Registry<dyn Measure>> = OnceLock::new();
    REGISTRY.get_or_init(builtin_measures)
}

pub fn polarity_of(measure: &str) -> Result<Polarity> {
    Ok(measures().create(measure, &Params::default())?.polarity())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use nalgebra::DMatrix;

    fn prob(rows: usize, cols: usize, data: &[f64]) -> ProbabilityMatrix {
        ProbabilityMatrix::from_matrix(DMatrix::from_row_slice(rows, cols, data)).unwrap()
    }

    /// Closed form of the population kurtosis of a one-hot vector.
    fn one_hot_kurtosis(m: f64) -> f64 {
        ((m - 1.0).powi(4) + (m - 1.0)) / (m * (m - 1.0).powi(2))
    }

    #[test]
    fn kurtosis_of_one_hot() {
        for m in [10usize, 453, 34835] {
            let mut v = vec![0.0; m];
            v[m / 2] = 1.0;
            let expected = one_hot_kurtosis(m as f64);
            assert!((kurtosis(&v) - expected).abs() <= 1e-9, "{m}");
        }
        let mut v = vec![0.0; 453];
        v[0] = 1.0;
        assert!((kurtosis(&v) - 451.0).abs() < 0.01);
    }

    #[test]
    fn constant_column_contributes_zero() {
        assert_eq!(kurtosis(&[1.0 / 7.0; 7]), 0.0);
        assert_eq!(kurtosis(&[0.0; 4]), 0.0);
        let p = prob(3, 2, &[1.0 / 3.0, 1.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 0.0]);
        let expected = (0.0 + kurtosis(&[1.0, 0.0, 0.0])) / 2.0;
        assert!((kurt_distance(&p) - expected).abs() < 1e-12);
    }

    #[test]
    fn kurtosis_against_direct_moments() {
        let v = [0.1, 0.7, 0.05, 0.15, 0.0];
        let mean = v.iter().sum::<f64>() / 5.0;
        let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        let m4 = v.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / 5.0;
        assert!((kurtosis(&v) - m4 / (m2 * m2)).abs() < 1e-12);
    }

    #[test]
    fn correspondence_cases() {
        let id = ProbabilityMatrix::from_matrix(DMatrix::identity(4, 4)).unwrap();
        assert_eq!(
            correspondences(&id).pairs,
            vec![(0, 0), (1, 1), (2, 2), (3, 3)]
        );
        let p = prob(2, 3, &[0.2, 0.5, 0.3, 0.4, 0.4, 0.2]);
        assert_eq!(correspondences(&p).pairs, vec![(0, 1), (1, 0)]);
    }

    fn cloud(v: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_points("c", v.iter().map(|p| Point::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    #[test]
    fn corr_identical_and_anticorrelated() {
        let y = cloud(&[[0.0, 1.0, 2.0], [3.0, -1.0, 0.5], [1.0, 1.0, 4.0]]);
        let id = ProbabilityMatrix::from_matrix(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(corr_distance(&y, &y, &id).unwrap(), 1.0);
        let x = y.map_points(|p| Point::new(5.0 - p.x, 5.0 - p.y, 5.0 - p.z)).unwrap();
        assert!((corr_distance(&x, &y, &id).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn corr_zero_variance() {
        let flat = cloud(&[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]);
        let y = cloud(&[[0.0, 1.0, 2.0], [3.0, -1.0, 0.5]]);
        let id = ProbabilityMatrix::from_matrix(DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(
            corr_distance(&flat, &y, &id),
            Err(Error::ZeroVariance("X*"))
        ));
    }

    #[test]
    fn lr_of_permutation_is_zero() {
        let n = 40;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[((i * 7) % n, i)] = 1.0;
        }
        let p = ProbabilityMatrix::from_matrix(m).unwrap();
        assert!(lr_distance(&p, &RpcaConfig::default()).unwrap().abs() < 1e-6);
    }

    #[test]
    fn lr_of_constant_matrix_is_its_mean() {
        let (m, n) = (25, 40);
        let p = ProbabilityMatrix::from_matrix(DMatrix::from_element(m, n, 1.0 / m as f64)).unwrap();
        let lr = lr_distance(&p, &RpcaConfig::default()).unwrap();
        assert!((lr - 1.0 / m as f64).abs() < 1e-6, "{lr}");
    }

    #[test]
    fn lr_of_diffuse_mismatch_exceeds_threshold() {
        // a wide band plus heavy off-band mass, columns summing to < 1
        let n = 60;
        let mut m = DMatrix::from_fn(n, n, |i, j| {
            let d = (i as f64 - j as f64).abs();
            (-(d * d) / 200.0).exp() + 0.5
        });
        for mut c in m.column_iter_mut() {
            let s = c.sum();
            c *= 0.95 / s;
        }
        let p = ProbabilityMatrix::from_matrix(m).unwrap();
        assert!(lr_distance(&p, &RpcaConfig::default()).unwrap() > 0.0006);
    }

    #[test]
    fn registry_lists_builtins() {
        let names: Vec<_> = measures().names().collect();
        assert_eq!(names, vec!["corr", "kurt", "lr"]);
        assert_eq!(polarity_of("lr").unwrap(), Polarity::LowerIsCopy);
        assert_eq!(polarity_of("corr").unwrap(), Polarity::HigherIsCopy);
        assert!(polarity_of("hausdorff").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kurtosis_affine_invariant(
                v in prop::collection::vec(-10.0f64..10.0, 4..40),
                a in 0.01f64..50.0,
                b in -20.0f64..20.0,
            ) {
                let k = kurtosis(&v);
                prop_assume!(k > 0.0);
                let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
                prop_assert!((kurtosis(&w) - k).abs() <= 1e-6 * k);
            }

            #[test]
            fn kurt_distance_row_permutation_invariant(seed in 0u64..500) {
                use rand::{Rng, SeedableRng, seq::SliceRandom};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let (m, n) = (9, 6);
                let mut raw = DMatrix::from_fn(m, n, |_, _| rng.gen_range(0.0..1.0));
                for mut c in raw.column_iter_mut() {
                    let s = c.sum();
                    c /= s;
                }
                let mut rows: Vec<usize> = (0..m).collect();
                rows.shuffle(&mut rng);
                let p = ProbabilityMatrix::from_matrix(raw.clone()).unwrap();
                let q = ProbabilityMatrix::from_matrix(raw.select_rows(&rows)).unwrap();
                prop_assert!((kurt_distance(&p) - kurt_distance(&q)).abs() < 1e-9);
            }

            #[test]
            fn corr_is_bounded(seed in 0u64..500) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let pts = |rng: &mut rand_chacha::ChaCha8Rng| (0..6)
                    .map(|_| Point::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect::<Vec<_>>();
                let x = PointCloud::from_points("x", pts(&mut rng)).unwrap();
                let y = PointCloud::from_points("y", pts(&mut rng)).unwrap();
                let mut raw = DMatrix::from_fn(6, 6, |_, _| rng.gen_range(0.0..1.0));
                for mut c in raw.column_iter_mut() {
                    let s = c.sum();
                    c /= s;
                }
                let p = ProbabilityMatrix::from_matrix(raw).unwrap();
                let r = corr_distance(&x, &y, &p).unwrap();
                prop_assert!((-1.0..=1.0).contains(&r));
            }

            #[test]
            fn lr_invariant_under_simultaneous_permutation(seed in 0u64..200) {
                use rand::{Rng, SeedableRng, seq::SliceRandom};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let n = 20;
                let mut raw = DMatrix::from_fn(n, n, |i, j| {
                    if i == j { 0.9 } else { rng.gen_range(0.0..0.1) / n as f64 }
                });
                for mut c in raw.column_iter_mut() {
                    let s = c.sum();
                    c /= s;
                }
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                let p = ProbabilityMatrix::from_matrix(raw.clone()).unwrap();
                let q = ProbabilityMatrix::from_matrix(raw.select_rows(&perm).select_columns(&perm)).unwrap();
                let cfg = RpcaConfig::default();
                prop_assert!((lr_distance(&p, &cfg).unwrap() - lr_distance(&q, &cfg).unwrap()).abs() < 1e-8);
            }
        }
    }
}
