//! Homologous copies: geometric and ordering manipulations applied to a
//! source model, and batch generation with a CSV manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::io::{save_cloud, Format};
use crate::registry::{Params, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Noise,
    Quantization,
    Crop,
    Reorder,
    SimilarityTransform,
    Simplification,
    Smooth,
    /// Reserved in the manifest schema; no implementation.
    Subdivision,
}

impl AttackKind {
    pub const IMPLEMENTED: [AttackKind; 7] = [
        AttackKind::Noise,
        AttackKind::Quantization,
        AttackKind::Crop,
        AttackKind::Reorder,
        AttackKind::SimilarityTransform,
        AttackKind::Simplification,
        AttackKind::Smooth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Noise => "noise",
            AttackKind::Quantization => "quantization",
            AttackKind::Crop => "crop",
            AttackKind::Reorder => "reorder",
            AttackKind::SimilarityTransform => "similarity_transform",
            AttackKind::Simplification => "simplification",
            AttackKind::Smooth => "smooth",
            AttackKind::Subdivision => "subdivision",
        }
    }

    /// Short benchmark label (`NA`, `QU`, ...).
    pub fn code(self) -> &'static str {
        match self {
            AttackKind::Noise => "NA",
            AttackKind::Quantization => "QU",
            AttackKind::Crop => "CR",
            AttackKind::Reorder => "RE",
            AttackKind::SimilarityTransform => "ST",
            AttackKind::Simplification => "SI",
            AttackKind::Smooth => "SM",
            AttackKind::Subdivision => "SU",
        }
    }

    pub fn needs_faces(self) -> bool {
        self == AttackKind::Smooth
    }

    /// Rejects intensities outside the legal range of this kind.
    pub fn check_intensity(self, value: Option<f64>) -> Result<()> {
        let out = |expected| Error::IntensityOutOfRange {
            kind: self.name(),
            value: value.unwrap_or(f64::NAN),
            expected,
        };
        let integral = |v: f64| v.fract() == 0.0;
        match (self, value) {
            (AttackKind::Reorder | AttackKind::SimilarityTransform, None) => Ok(()),
            (AttackKind::Reorder | AttackKind::SimilarityTransform, Some(_)) => {
                Err(out("no intensity"))
            }
            (_, None) => Err(out("an intensity is required")),
            (AttackKind::Noise, Some(v)) if v > 0.0 && v <= 100.0 => Ok(()),
            (AttackKind::Noise, _) => Err(out("percent of the diagonal in (0, 100]")),
            (AttackKind::Quantization, Some(v)) if integral(v) && (4.0..=16.0).contains(&v) => Ok(()),
            (AttackKind::Quantization, _) => Err(out("integer bits in [4, 16]")),
            (AttackKind::Crop | AttackKind::Simplification, Some(v)) if v > 0.0 && v < 1.0 => Ok(()),
            (AttackKind::Crop | AttackKind::Simplification, _) => Err(out("fraction in (0, 1)")),
            (AttackKind::Smooth, Some(v)) if integral(v) && v >= 1.0 => Ok(()),
            (AttackKind::Smooth, _) => Err(out("integer iterations >= 1")),
            (AttackKind::Subdivision, _) => Err(Error::UnsupportedFormat(
                "subdivision attacks are not implemented".into(),
            )),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::IMPLEMENTED
            .into_iter()
            .chain([AttackKind::Subdivision])
            .find(|k| k.name() == s || k.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "attack",
                name: s.to_string(),
                available: attacks().names().collect::<Vec<_>>().join(", "),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Noise: percent of the diagonal. Quantization: bits. Crop and
    /// Simplification: fraction of points removed. Smooth: iterations.
    pub intensity: Option<f64>,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, intensity: Option<f64>, seed: u64) -> Result<Self> {
        kind.check_intensity(intensity)?;
        Ok(Self {
            kind,
            intensity,
            seed,
        })
    }

    /// Short label such as `NA0.5`, `CR10`, `RE`. Fractions are printed as
    /// percentages.
    pub fn label(&self) -> String {
        let value = match (self.kind, self.intensity) {
            (_, None) => String::new(),
            (AttackKind::Crop | AttackKind::Simplification, Some(v)) => {
                format!("{}", (v * 100.0 * 1e6).round() / 1e6)
            }
            (_, Some(v)) => format!("{v}"),
        };
        format!("{}{}", self.kind.code(), value)
    }

    /// Parses `kind` or `kind:intensity`.
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let (kind, rest) = text.split_once(':').unwrap_or((text, ""));
        let kind: AttackKind = kind.trim().parse()?;
        let intensity = match rest.trim() {
            "" => None,
            v => Some(v.parse().map_err(|_| Error::param("intensity", format!("cannot parse `{v}`")))?),
        };
        Self::new(kind, intensity, seed)
    }
}

pub trait Attack: Send + Sync {
    fn kind(&self) -> AttackKind;
    fn apply(&self, cloud: &PointCloud, rng: &mut ChaCha8Rng) -> Result<PointCloud>;
}

pub struct Noise {
    pub percent: f64,
}

impl Attack for Noise {
    fn kind(&self) -> AttackKind {
        AttackKind::Noise
    }

    /// Uniform offsets in a cube whose half-diagonal is `percent`% of the
    /// bounding-box diagonal.
    fn apply(&self, cloud: &PointCloud, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
        let half = self.percent / 100.0 * cloud.bounding_box().diagonal / 3f64.sqrt();
        if half == 0.0 {
            return Ok(cloud.clone());
        }
        let points = cloud
            .points()
            .iter()
            .map(|p| {
                p + Vector3::new(
                    rng.gen_range(-half..=half),
                    rng.gen_range(-half..=half),
                    rng.gen_range(-half..=half),
                )
            })
            .collect();
        PointCloud::new(cloud.name(), points, cloud.faces().map(<[_]>::to_vec))
    }
}

pub struct Quantization {
    pub bits: u32,
}

impl Attack for Quantization {
    fn kind(&self) -> AttackKind {
        AttackKind::Quantization
    }

    /// Snaps every coordinate to `2^bits` evenly spaced levels spanning the
    /// per-axis range; the range ends are levels themselves.
    fn apply(&self, cloud: &PointCloud, _rng: &mut ChaCha8Rng) -> Result<PointCloud> {
        let bb = cloud.bounding_box();
        let steps = ((1u64 << self.bits) - 1) as f64;
        let snap = |v: f64, lo: f64, hi: f64| {
            if hi <= lo {
                return v;
            }
            let k = ((v - lo) / (hi - lo) * steps).round();
            if k >= steps {
                hi
            } else {
                lo + k * (hi - lo) / steps
            }
        };
        cloud.map_points(|p| {
            Point::new(
                snap(p.x, bb.min.x, bb.max.x),
                snap(p.y, bb.min.y, bb.max.y),
                snap(p.z, bb.min.z, bb.max.z),
            )
        })
    }
}

pub struct Crop {
    pub fraction: f64,
}

impl Attack for Crop {
    fn kind(&self) -> AttackKind {
        AttackKind::Crop
    }

    /// Removes `⌊f·N⌋` points beyond an axis-aligned plane; axis and side
    /// come from the seed.
    fn apply(&self, cloud: &PointCloud, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
        let axis = rng.gen_range(0..3);
        let from_top: bool = rng.gen();
        let remove = (self.fraction * cloud.len() as f64).floor() as usize;
        let pts = cloud.points();
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.sort_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        if from_top {
            order.reverse();
        }
        let mut keep = order[remove..].to_vec();
        keep.sort_unstable();
        cloud.subset(&keep)
    }
}

pub struct Reorder;

impl Attack for Reorder {
    fn kind(&self) -> AttackKind {
        AttackKind::Reorder
    }

    fn apply(&self, cloud: &PointCloud, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        order.shuffle(rng);
        Ok(cloud.permuted(&order))
    }
}

pub struct SimilarityTransform;

impl Attack for SimilarityTransform {
    fn kind(&self) -> AttackKind {
        AttackKind::SimilarityTransform
    }

    /// `p ↦ s R p + t` with `s` log-uniform in `[0.5, 2]`, `R` uniform on
    /// SO(3) and `‖t‖ ≤` one diagonal.
    fn apply(&self, cloud: &PointCloud, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
        let scale = rng.gen_range(0.5f64.ln()..=2f64.ln()).exp();
        let rotation = uniform_rotation(rng);
        let dir = loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        };
        let shift = dir * rng.gen_range(0.0..=cloud.bounding_box().diagonal);
        cloud.map_points(|p| Point::from(scale * (rotation * p.coords) + shift))
    }
}

/// Shoemake's uniform random unit quaternion.
fn uniform_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    use std::f64::consts::TAU;
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    UnitQuaternion::from_quaternion(Quaternion::new(
        b * (TAU * u3).cos(),
        a * (TAU * u2).sin(),
        a * (TAU * u2).cos(),
        b * (TAU * u3).sin(),
    ))
}

pub struct Simplification {
    pub fraction: f64,
}

impl Attack for Simplification {
    fn kind(&self) -> AttackKind {
        AttackKind::Simplification
    }

    fn apply(&self, cloud: &PointCloud, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
        let n = cloud.len();
        let remove = (self.fraction * n as f64).floor() as usize;
        let mut keep = rand::seq::index::sample(rng, n, n - remove).into_vec();
        keep.sort_unstable();
        cloud.subset(&keep)
    }
}

pub struct Smooth {
    pub iterations: usize,
}

pub const SMOOTH_STEP: f64 = 0.5;

impl Attack for Smooth {
    fn kind(&self) -> AttackKind {
        AttackKind::Smooth
    }

    /// Umbrella-operator Laplacian smoothing; isolated vertices stay put.
    fn apply(&self, cloud: &PointCloud, _rng: &mut ChaCha8Rng) -> Result<PointCloud> {
        let faces = cloud.faces().ok_or(Error::MissingFaces("smooth"))?;
        let n = cloud.len();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for f in faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        let mut pts: Vec<Point> = cloud.points().to_vec();
        let mut next = pts.clone();
        for _ in 0..self.iterations {
            for (i, nbrs) in adj.iter().enumerate() {
                if nbrs.is_empty() {
                    next[i] = pts[i];
                    continue;
                }
                let mean = nbrs.iter().map(|&j| pts[j].coords).sum::<Vector3<f64>>() / nbrs.len() as f64;
                next[i] = pts[i] + SMOOTH_STEP * (mean - pts[i].coords);
            }
            std::mem::swap(&mut pts, &mut next);
        }
        PointCloud::new(cloud.name(), pts, Some(faces.to_vec()))
    }
}

fn intensity(p: &Params) -> Result<f64> {
    p.require("value")
}

pub fn builtin_attacks() -> Registry<dyn Attack> {
    let mut reg: Registry<dyn Attack> = Registry::new("attack");
    reg.register("noise", |p: &Params| {
        p.expect_only(&["value"])?;
        let v = intensity(p)?;
        AttackKind::Noise.check_intensity(Some(v))?;
        Ok(Box::new(Noise { percent: v }))
    })
    .register("quantization", |p: &Params| {
        p.expect_only(&["value"])?;
        let v = intensity(p)?;
        AttackKind::Quantization.check_intensity(Some(v))?;
        Ok(Box::new(Quantization { bits: v as u32 }))
    })
    .register("crop", |p: &Params| {
        p.expect_only(&["value"])?;
        let v = intensity(p)?;
        AttackKind::Crop.check_intensity(Some(v))?;
        Ok(Box::new(Crop { fraction: v }))
    })
    .register("reorder", |p: &Params| {
        p.expect_only(&[])?;
        Ok(Box::new(Reorder))
    })
    .register("similarity_transform", |p: &Params| {
        p.expect_only(&[])?;
        Ok(Box::new(SimilarityTransform))
    })
    .register("simplification", |p: &Params| {
        p.expect_only(&["value"])?;
        let v = intensity(p)?;
        AttackKind::Simplification.check_intensity(Some(v))?;
        Ok(Box::new(Simplification { fraction: v }))
    })
    .register("smooth", |p: &Params| {
        p.expect_only(&["value"])?;
        let v = intensity(p)?;
        AttackKind::Smooth.check_intensity(Some(v))?;
        Ok(Box::new(Smooth {
            iterations: v as usize,
        }))
    });
    reg
}

pub fn attacks() -> &'static Registry<dyn Attack> {
    static REGISTRY: OnceLock<Registry<dyn Attack>> = OnceLock::new();
    REGISTRY.get_or_init(builtin_attacks)
}

/// Applies `spec` with a generator seeded from `spec.seed`.
pub fn apply_attack(cloud: &PointCloud, spec: &AttackSpec) -> Result<PointCloud> {
    spec.kind.check_intensity(spec.intensity)?;
    if spec.kind.needs_faces() && cloud.faces().is_none() {
        return Err(Error::MissingFaces(spec.kind.name()));
    }
    let mut params = Params::default();
    if let Some(v) = spec.intensity {
        params.insert("value", v);
    }
    let attack = attacks().create(spec.kind.name(), &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = attack.apply(cloud, &mut rng)?;
    out.set_name(format!("{}_{}", cloud.name(), spec.label()));
    Ok(out)
}

/// The benchmark intensity table, seeded `base_seed + index`. Smoothing
/// entries are included only when `with_faces` is set.
pub fn table3_specs(base_seed: u64, with_faces: bool) -> Vec<AttackSpec> {
    use AttackKind::*;
    let rows: [(AttackKind, &[Option<f64>]); 7] = [
        (Crop, &[Some(0.05), Some(0.10)]),
        (Noise, &[Some(0.1), Some(0.3), Some(0.5)]),
        (Quantization, &[Some(9.0), Some(8.0), Some(7.0)]),
        (Reorder, &[None]),
        (Simplification, &[Some(0.1), Some(0.2), Some(0.4)]),
        (Smooth, &[Some(10.0), Some(30.0), Some(50.0)]),
        (SimilarityTransform, &[None, None, None]),
    ];
    rows.iter()
        .filter(|(kind, _)| with_faces || !kind.needs_faces())
        .flat_map(|(kind, values)| values.iter().map(move |v| (*kind, *v)))
        .enumerate()
        .map(|(i, (kind, intensity))| AttackSpec {
            kind,
            intensity,
            seed: base_seed + i as u64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub source: String,
    pub kind: AttackKind,
    pub intensity: Option<f64>,
    pub seed: u64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| csv_error(path, e))?;
        Ok(Self { entries })
    }

    /// Maps a file name (or its stem) to its source model.
    pub fn source_of(&self, file: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| {
                e.file == file || Path::new(&e.file).file_stem().and_then(|s| s.to_str()) == Some(file)
            })
            .map(|e| e.source.as_str())
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Invalid(format!("{}: {e}", path.display()))
    }
}

/// Writes one attacked copy per spec into `out_dir` plus `manifest.csv`.
/// On failure every file written by this call is removed.
pub fn generate_homologous_set(
    cloud: &PointCloud,
    specs: &[AttackSpec],
    out_dir: &Path,
    format: Format,
) -> Result<Manifest> {
    if specs.is_empty() {
        return Err(Error::EmptySpecs);
    }
    for spec in specs {
        spec.kind.check_intensity(spec.intensity)?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| {
        let mut manifest = Manifest::default();
        for (i, spec) in specs.iter().enumerate() {
            let attacked = apply_attack(cloud, spec)?;
            let file = format!("{}_{:02}_{}.{}", cloud.name(), i, spec.label(), format.extension());
            let path = out_dir.join(&file);
            written.push(path.clone());
            save_cloud(&attacked, &path, format)?;
            manifest.entries.push(ManifestEntry {
                file,
                source: cloud.name().to_string(),
                kind: spec.kind,
                intensity: spec.intensity,
                seed: spec.seed,
                n_points: attacked.len(),
            });
        }
        let path = out_dir.join(MANIFEST_FILE);
        written.push(path.clone());
        manifest.write(&path)?;
        Ok(manifest)
    })();
    if result.is_err() {
        for path in &written {
            let _ = fs::remove_file(path);
        }
    }
    result
}
