//! Seeded synthetic shapes: triangle meshes of smooth closed surfaces and
//! plain random point sets. Used by tests, benchmarks and demos in place of
//! scanned models.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Face, Point, PointCloud};

/// `n` points uniform in the cube `[-1, 1]³`.
pub fn random_blob(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            Point::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    PointCloud::from_points(format!("blob{seed}"), points).expect("nonempty finite cloud")
}

/// Fraction of a grid cell by which mesh vertices are displaced in
/// parameter space. A perfectly regular lattice gives registration false
/// optima where every vertex lands on its neighbor.
const JITTER: f64 = 0.35;

/// Latitude/longitude sphere: poles plus `rings - 1` rings of `segments`
/// jittered vertices. Returns unit directions and triangles.
fn uv_sphere(rings: usize, segments: usize, rng: &mut ChaCha8Rng) -> (Vec<Vector3<f64>>, Vec<Face>) {
    assert!(rings >= 2 && segments >= 3);
    let mut dirs = vec![Vector3::new(0.0, 0.0, 1.0)];
    for i in 1..rings {
        for j in 0..segments {
            let theta = PI * (i as f64 + rng.gen_range(-JITTER..JITTER)) / rings as f64;
            let phi = 2.0 * PI * (j as f64 + rng.gen_range(-JITTER..JITTER)) / segments as f64;
            dirs.push(Vector3::new(
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            ));
        }
    }
    let south = dirs.len();
    dirs.push(Vector3::new(0.0, 0.0, -1.0));

    let ring = |i: usize, j: usize| 1 + (i - 1) * segments + (j % segments);
    let mut faces = Vec::new();
    for j in 0..segments {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
        faces.push([south, ring(rings - 1, j + 1), ring(rings - 1, j)]);
    }
    for i in 1..rings - 1 {
        for j in 0..segments {
            let (a, b) = (ring(i, j), ring(i, j + 1));
            let (c, d) = (ring(i + 1, j), ring(i + 1, j + 1));
            faces.push([a, c, b]);
            faces.push([b, c, d]);
        }
    }
    (dirs, faces)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    Rotation3::from_euler_angles(
        rng.gen_range(-PI..PI),
        rng.gen_range(-PI / 2.0..PI / 2.0),
        rng.gen_range(-PI..PI),
    )
}

/// A smooth, asymmetric, star-shaped closed surface. Different seeds give
/// visibly different shapes; the vertex count is
/// `(rings - 1) * segments + 2`.
pub fn blob_mesh(rings: usize, segments: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b10b);
    let waves: Vec<(Vector3<f64>, f64, f64)> = (0..5)
        .map(|_| {
            let w = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize()
                * rng.gen_range(1.0..3.0);
            (w, rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.05..0.15))
        })
        .collect();
    let axes = Vector3::new(
        rng.gen_range(0.9..1.3),
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.5..0.8),
    );
    let orientation = random_rotation(&mut rng);
    let (dirs, faces) = uv_sphere(rings, segments, &mut rng);
    let points = dirs
        .iter()
        .map(|d| {
            let r = 1.0
                + waves
                    .iter()
                    .map(|(w, phase, amp)| amp * (w.dot(d) + phase).sin())
                    .sum::<f64>();
            Point::from(orientation * (r * d).component_mul(&axes))
        })
        .collect();
    PointCloud::new(format!("blob{seed}"), points, Some(faces)).expect("valid mesh")
}

/// A torus with tube radius modulated around the ring, randomly oriented.
pub fn torus_mesh(rings: usize, segments: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7042_0005);
    let (major, minor) = (1.0, rng.gen_range(0.25..0.4));
    let bulge = rng.gen_range(0.1..0.3);
    let orientation = random_rotation(&mut rng);
    let mut points = Vec::with_capacity(rings * segments);
    for i in 0..rings {
        for j in 0..segments {
            let u = 2.0 * PI * (i as f64 + rng.gen_range(-JITTER..JITTER)) / rings as f64;
            let v = 2.0 * PI * (j as f64 + rng.gen_range(-JITTER..JITTER)) / segments as f64;
            let tube = minor * (1.0 + bulge * u.cos());
            let p = Vector3::new(
                (major + tube * v.cos()) * u.cos(),
                (major + tube * v.cos()) * u.sin(),
                tube * v.sin(),
            );
            points.push(Point::from(orientation * p));
        }
    }
    let idx = |i: usize, j: usize| (i % rings) * segments + (j % segments);
    let mut faces = Vec::with_capacity(2 * rings * segments);
    for i in 0..rings {
        for j in 0..segments {
            faces.push([idx(i, j), idx(i + 1, j), idx(i, j + 1)]);
            faces.push([idx(i, j + 1), idx(i + 1, j), idx(i + 1, j + 1)]);
        }
    }
    PointCloud::new(format!("torus{seed}"), points, Some(faces)).expect("valid mesh")
}

/// Picks `(rings, segments)` so a blob mesh has roughly `n` vertices.
pub fn blob_with_vertices(n: usize, seed: u64) -> PointCloud {
    let rings = ((n as f64 / 2.0).sqrt().round() as usize).max(2);
    let segments = ((n.saturating_sub(2)) / (rings - 1)).max(3);
    blob_mesh(rings, segments, seed)
}
