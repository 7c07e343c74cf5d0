//! Speed-ups for large pairs: hierarchical Gaussian downsampling, random
//! downsampling, and block-wise LR along the longest axis.

use std::collections::HashMap;
use std::sync::OnceLock;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{lexicographic, Point, PointCloud};
use crate::measures::lr_distance_owned;
use crate::registration::{e_step, GmmState, RigidTransform};
use crate::registry::{Params, Registry};
use crate::rpca::RpcaConfig;

/// Fraction of components kept as parents at every level.
pub const KEEP_RATIO: f64 = 1.0 / 3.0;
/// A level may not reduce the mixture below this many components.
pub const MIN_COMPONENTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HemConfig {
    pub layers: usize,
    /// Scales the merge radius `factor · diagonal / √n`.
    pub amendatory_factor: f64,
}

impl Default for HemConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            amendatory_factor: 2.0,
        }
    }
}

impl HemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::param("layers", "must be at least 1"));
        }
        if !(self.amendatory_factor.is_finite() && self.amendatory_factor > 0.0) {
            return Err(Error::param("factor", "must be positive"));
        }
        Ok(())
    }
}

/// Uniform grid over a point set for fixed-radius neighbor queries.
struct Grid {
    cell: f64,
    buckets: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(points: &[Point], cell: f64) -> Self {
        let mut buckets: HashMap<_, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    fn key(p: &Point, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Indices within `radius` (≤ cell) of `q`, in ascending order.
    fn within(&self, points: &[Point], q: &Point, radius: f64, out: &mut Vec<usize>) {
        out.clear();
        let (kx, ky, kz) = Self::key(q, self.cell);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.buckets.get(&(kx + dx, ky + dy, kz + dz)) {
                        out.extend(
                            bucket
                                .iter()
                                .copied()
                                .filter(|&j| (points[j] - q).norm_squared() <= r2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

fn kernel(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Farthest-point selection of `k` indices, starting from the
/// lexicographically smallest point. Ties go to the smaller index.
fn farthest_points(points: &[Point], k: usize) -> Vec<usize> {
    let start = (0..points.len())
        .min_by(|&a, &b| lexicographic(&points[a], &points[b]).then(a.cmp(&b)))
        .expect("nonempty");
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut chosen = Vec::with_capacity(k);
    let mut last = start;
    for _ in 0..k {
        chosen.push(last);
        dist[last] = f64::NEG_INFINITY;
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, d) in dist.iter_mut().enumerate() {
            if *d == f64::NEG_INFINITY {
                continue;
            }
            let nd = (points[i] - points[last]).norm_squared();
            if nd < *d {
                *d = nd;
            }
            if *d > best.0 {
                best = (*d, i);
            }
        }
        if best.1 == usize::MAX {
            break;
        }
        last = best.1;
    }
    chosen
}

/// Weighted isotropic components, tracked by weight and mean.
struct Mixture {
    weights: Vec<f64>,
    means: Vec<Point>,
}

/// Initial EM iteration on the raw points: each point seeds a Gaussian with
/// `σ = radius / 2`, and every point distributes its unit mass over the
/// seeds within `radius`.
fn initial_mixture(points: &[Point], radius: f64) -> Mixture {
    let sigma = radius / 2.0;
    let grid = Grid::new(points, radius);
    let mut nbrs = Vec::new();
    let mut denom = vec![0.0; points.len()];
    for (j, p) in points.iter().enumerate() {
        grid.within(points, p, radius, &mut nbrs);
        denom[j] = nbrs
            .iter()
            .map(|&i| kernel((points[i] - p).norm_squared(), sigma))
            .sum();
    }
    let mut weights = Vec::with_capacity(points.len());
    let mut means = Vec::with_capacity(points.len());
    for p in points {
        grid.within(points, p, radius, &mut nbrs);
        let mut w = 0.0;
        let mut acc = Vector3::zeros();
        for &j in &nbrs {
            let r = kernel((points[j] - p).norm_squared(), sigma) / denom[j];
            w += r;
            acc += r * points[j].coords;
        }
        weights.push(w);
        means.push(Point::from(acc / w));
    }
    Mixture { weights, means }
}

/// One reduction level: picks `⌈n/3⌉` parents, then merges every child into
/// the parents within `radius`, weighted by parent weight and a Gaussian of
/// width `radius / 2`. A child with no parent in range survives unchanged.
fn reduce_level(mix: &Mixture, radius: f64) -> Result<Mixture> {
    let n = mix.means.len();
    let k = (n as f64 * KEEP_RATIO).ceil() as usize;
    if k < MIN_COMPONENTS {
        return Err(Error::TooFewPoints {
            kept: k,
            minimum: MIN_COMPONENTS,
        });
    }
    let mut parents = farthest_points(&mix.means, k);
    parents.sort_unstable();
    let parent_means: Vec<Point> = parents.iter().map(|&i| mix.means[i]).collect();
    let grid = Grid::new(&parent_means, radius);
    let sigma = radius / 2.0;

    let mut weight = vec![0.0; k];
    let mut acc = vec![Vector3::zeros(); k];
    // (source index, weight, mean) of components that found no parent
    let mut orphans: Vec<(usize, f64, Point)> = Vec::new();
    let mut nbrs = Vec::new();
    let mut resp = Vec::new();
    for i in 0..n {
        let (wi, mi) = (mix.weights[i], mix.means[i]);
        grid.within(&parent_means, &mi, radius, &mut nbrs);
        if nbrs.is_empty() {
            orphans.push((i, wi, mi));
            continue;
        }
        resp.clear();
        resp.extend(nbrs.iter().map(|&j| {
            mix.weights[parents[j]] * kernel((parent_means[j] - mi).norm_squared(), sigma)
        }));
        let total: f64 = resp.iter().sum();
        for (&j, &r) in nbrs.iter().zip(&resp) {
            let share = if total > 0.0 { r / total } else { 1.0 / nbrs.len() as f64 };
            weight[j] += share * wi;
            acc[j] += share * wi * mi.coords;
        }
    }

    let mut merged: Vec<(usize, f64, Point)> = parents
        .iter()
        .enumerate()
        .map(|(j, &src)| (src, weight[j], Point::from(acc[j] / weight[j])))
        .collect();
    merged.extend(orphans);
    merged.sort_unstable_by_key(|c| c.0);
    Ok(Mixture {
        weights: merged.iter().map(|c| c.1).collect(),
        means: merged.iter().map(|c| c.2).collect(),
    })
}

/// Hierarchical EM downsampling to roughly `N / 3^layers` points.
pub fn hem_downsample(cloud: &PointCloud, config: &HemConfig) -> Result<PointCloud> {
    config.validate()?;
    let n = cloud.len();
    if n < 3 {
        return Err(Error::TooFewPoints {
            kept: n,
            minimum: 3,
        });
    }
    let diag = cloud.bounding_box().diagonal;
    if diag == 0.0 {
        return Err(Error::InvalidCloud("all points coincide".into()));
    }
    let radius_for = |count: usize| config.amendatory_factor * diag / (count as f64).sqrt();
    let mut mix = initial_mixture(cloud.points(), radius_for(n));
    for _ in 0..config.layers {
        mix = reduce_level(&mix, radius_for(mix.means.len()))?;
    }
    PointCloud::from_points(cloud.name(), mix.means)
}

/// Keeps `⌈rate · N⌉` points chosen uniformly without replacement, in their
/// original order. Faces survive when all their vertices do.
pub fn random_downsample(cloud: &PointCloud, rate: f64, seed: u64) -> Result<PointCloud> {
    let n = cloud.len();
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::param("rate", "must lie in (0, 1]"));
    }
    if rate * (n as f64) < 1.0 {
        return Err(Error::param("rate", format!("rate * N < 1 for N = {n}")));
    }
    let count = ((rate * n as f64).ceil() as usize).min(n);
    if count == n {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = rand::seq::index::sample(&mut rng, n, count).into_vec();
    keep.sort_unstable();
    cloud.subset(&keep)
}

pub trait Downsampler: Send + Sync {
    fn name(&self) -> &'static str;
    /// Canonical `name:params` form, recorded in reports.
    fn describe(&self) -> String;
    fn downsample(&self, cloud: &PointCloud) -> Result<PointCloud>;
}

pub struct HemDownsampler(pub HemConfig);

impl Downsampler for HemDownsampler {
    fn name(&self) -> &'static str {
        "hem"
    }

    fn describe(&self) -> String {
        format!(
            "hem:factor={},layers={}",
            self.0.amendatory_factor, self.0.layers
        )
    }

    fn downsample(&self, cloud: &PointCloud) -> Result<PointCloud> {
        hem_downsample(cloud, &self.0)
    }
}

pub struct RandomDownsampler {
    pub rate: f64,
    pub seed: u64,
}

impl Downsampler for RandomDownsampler {
    fn name(&self) -> &'static str {
        "random"
    }

    fn describe(&self) -> String {
        format!("random:rate={},seed={}", self.rate, self.seed)
    }

    fn downsample(&self, cloud: &PointCloud) -> Result<PointCloud> {
        random_downsample(cloud, self.rate, self.seed)
    }
}

pub fn builtin_downsamplers() -> Registry<dyn Downsampler> {
    let mut reg: Registry<dyn Downsampler> = Registry::new("downsampler");
    reg.register("hem", |p: &Params| {
        p.expect_only(&["layers", "factor"])?;
        let defaults = HemConfig::default();
        let config = HemConfig {
            layers: p.get("layers")?.unwrap_or(defaults.layers),
            amendatory_factor: p.get("factor")?.unwrap_or(defaults.amendatory_factor),
        };
        config.validate()?;
        Ok(Box::new(HemDownsampler(config)))
    })
    .register("random", |p: &Params| {
        p.expect_only(&["rate", "seed"])?;
        let rate: f64 = p.require("rate")?;
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::param("rate", "must lie in (0, 1]"));
        }
        Ok(Box::new(RandomDownsampler {
            rate,
            seed: p.require("seed")?,
        }))
    });
    reg
}

pub fn downsamplers() -> &'static Registry<dyn Downsampler> {
    static REGISTRY: OnceLock<Registry<dyn Downsampler>> = OnceLock::new();
    REGISTRY.get_or_init(builtin_downsamplers)
}

/// Partition of both clouds into `block_count` slabs along one axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentPlan {
    pub axis: usize,
    pub block_count: usize,
    pub target_t: usize,
    /// Axis coordinate where each block after the first starts, per cloud.
    pub x_boundaries: Vec<f64>,
    pub y_boundaries: Vec<f64>,
    /// Point indices of each block, ascending.
    pub x_blocks: Vec<Vec<usize>>,
    pub y_blocks: Vec<Vec<usize>>,
}

fn split_along(points: &[Point], axis: usize, blocks: usize) -> (Vec<Vec<usize>>, Vec<f64>) {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let base = points.len() / blocks;
    let mut parts = Vec::with_capacity(blocks);
    let mut boundaries = Vec::with_capacity(blocks - 1);
    for b in 0..blocks {
        let start = b * base;
        let end = if b + 1 == blocks { points.len() } else { start + base };
        if b > 0 {
            boundaries.push(order.get(start).map_or(f64::INFINITY, |&i| points[i][axis]));
        }
        let mut part = order[start..end].to_vec();
        part.sort_unstable();
        parts.push(part);
    }
    (parts, boundaries)
}

/// Splits registered clouds into `max(⌈M/T⌉, ⌈N/T⌉)` slabs along the axis of
/// widest joint extent. Each cloud is cut by point count: the first blocks
/// hold `⌊count / blocks⌋` points and the last takes the remainder.
pub fn plan_segments(x: &PointCloud, y: &PointCloud, t: usize) -> Result<SegmentPlan> {
    if t < 2 {
        return Err(Error::param("segment_t", "must be at least 2"));
    }
    let joint = x.bounding_box().union(&y.bounding_box());
    let axis = joint.longest_axis();
    let block_count = x.len().div_ceil(t).max(y.len().div_ceil(t));
    let (x_blocks, x_boundaries) = split_along(x.points(), axis, block_count);
    let (y_blocks, y_boundaries) = split_along(y.points(), axis, block_count);
    Ok(SegmentPlan {
        axis,
        block_count,
        target_t: t,
        x_boundaries,
        y_boundaries,
        x_blocks,
        y_blocks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockLr {
    pub m: usize,
    pub n: usize,
    /// `None` for an empty block, which carries zero weight.
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentedLr {
    pub value: f64,
    pub blocks: Vec<BlockLr>,
    pub empty_blocks: usize,
}

/// Block-wise LR merged as the mean weighted by `m_i · n_i`. `x` and `y`
/// must already be in the common frame; each block posterior is rebuilt at
/// the global `σ²` and `ω` of `state`.
pub fn segmented_lr(
    x: &PointCloud,
    y: &PointCloud,
    plan: &SegmentPlan,
    state: &GmmState,
    rpca: &RpcaConfig,
) -> Result<SegmentedLr> {
    let local = GmmState::new(state.sigma2, state.omega, RigidTransform::identity());
    let mut blocks = Vec::with_capacity(plan.block_count);
    let (mut num, mut den) = (0.0, 0.0);
    for (xb, yb) in plan.x_blocks.iter().zip(&plan.y_blocks) {
        let (n, m) = (xb.len(), yb.len());
        if m == 0 || n == 0 {
            log::warn!("segment with {m}x{n} points skipped");
            blocks.push(BlockLr { m, n, lr: None });
            continue;
        }
        let lr = lr_distance_owned(e_step(&x.subset(xb)?, &y.subset(yb)?, &local)?, rpca)?;
        let w = (m * n) as f64;
        num += w * lr;
        den += w;
        blocks.push(BlockLr { m, n, lr: Some(lr) });
    }
    if den == 0.0 {
        return Err(Error::Invalid("every segment is empty".into()));
    }
    let empty_blocks = blocks.iter().filter(|b| b.lr.is_none()).count();
    let mut filled = blocks.iter().filter_map(|b| b.lr);
    // a lone block is returned as is, so the merge cannot perturb it
    let value = match (filled.next(), filled.next()) {
        (Some(lr), None) => lr,
        _ => num / den,
    };
    Ok(SegmentedLr {
        value,
        blocks,
        empty_blocks,
    })
}
