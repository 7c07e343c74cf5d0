//! Point clouds, bounding boxes and the canonical lexicographic rearrangement.

use std::cmp::Ordering;

use nalgebra::Point3;

use crate::error::{Error, Result};

pub type Point = Point3<f64>;
pub type Face = [usize; 3];

/// An ordered set of 3D points with optional triangle connectivity.
///
/// Construction validates that the cloud is nonempty, every coordinate is
/// finite and every face index refers to an existing point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    name: String,
    points: Vec<Point>,
    faces: Option<Vec<Face>>,
}

impl PointCloud {
    pub fn new(
        name: impl Into<String>,
        points: Vec<Point>,
        faces: Option<Vec<Face>>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidCloud(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        if let Some(faces) = &faces {
            let n = points.len();
            if let Some((fi, _)) = faces
                .iter()
                .enumerate()
                .find(|(_, f)| f.iter().any(|&v| v >= n))
            {
                return Err(Error::InvalidCloud(format!(
                    "face {fi} references a vertex outside [0, {n})"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            points,
            faces,
        })
    }

    pub fn from_points(name: impl Into<String>, points: Vec<Point>) -> Result<Self> {
        Self::new(name, points, None)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn faces(&self) -> Option<&[Face]> {
        self.faces.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::of(&self.points)
    }

    pub fn centroid(&self) -> Point {
        let sum = self
            .points
            .iter()
            .fold(nalgebra::Vector3::zeros(), |acc, p| acc + p.coords);
        Point::from(sum / self.points.len() as f64)
    }

    /// Replaces every point through `f`, keeping connectivity.
    pub fn map_points(&self, f: impl Fn(&Point) -> Point) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.points.iter().map(f).collect(),
            self.faces.clone(),
        )
    }

    /// Reorders points so that new index `i` holds old point `order[i]`.
    /// `order` must be a permutation of `0..len`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        debug_assert_eq!(order.len(), self.points.len());
        let mut inverse = vec![0usize; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        let points = order.iter().map(|&i| self.points[i]).collect();
        let faces = self.faces.as_ref().map(|faces| {
            faces
                .iter()
                .map(|f| [inverse[f[0]], inverse[f[1]], inverse[f[2]]])
                .collect()
        });
        Self {
            name: self.name.clone(),
            points,
            faces,
        }
    }

    /// Keeps the points at `keep` (in the given order). Faces survive only if
    /// all three of their vertices are kept.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.points.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let points = keep.iter().map(|&i| self.points[i]).collect();
        let faces = self.faces.as_ref().map(|faces| {
            faces
                .iter()
                .filter(|f| f.iter().all(|&v| remap[v] != usize::MAX))
                .map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]])
                .collect()
        });
        Self::new(self.name.clone(), points, faces)
    }

    /// Drops connectivity.
    pub fn without_faces(&self) -> Self {
        Self {
            name: self.name.clone(),
            points: self.points.clone(),
            faces: None,
        }
    }
}

/// Lexicographic (x, then y, then z) comparison under IEEE total order.
pub fn lexicographic(a: &Point, b: &Point) -> Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
}

/// Permutation sorting `points` ascending by (x, y, z); ties keep input order.
pub fn rearrangement_order(points: &[Point]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| lexicographic(&points[i], &points[j]));
    order
}

/// Sorts the cloud's points ascending by x, then y, then z, re-indexing faces.
pub fn rearrange(cloud: &PointCloud) -> PointCloud {
    let order = rearrangement_order(cloud.points());
    cloud.permuted(&order)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Point,
    pub max: Point,
    pub diagonal: f64,
}

impl BoundingBox {
    /// Componentwise extent of `points`; `points` must be nonempty.
    pub fn of(points: &[Point]) -> Self {
        let mut min = points[0];
        let mut max = points[0];
        for p in &points[1..] {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        let diagonal = (max - min).norm();
        Self { min, max, diagonal }
    }

    pub fn extent(&self) -> nalgebra::Vector3<f64> {
        self.max - self.min
    }

    /// Index of the axis with the widest extent (first wins on ties).
    pub fn longest_axis(&self) -> usize {
        let e = self.extent();
        let mut best = 0;
        for k in 1..3 {
            if e[k] > e[best] {
                best = k;
            }
        }
        best
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        let mut min = self.min;
        let mut max = self.max;
        for k in 0..3 {
            min[k] = min[k].min(other.min[k]);
            max[k] = max[k].max(other.max[k]);
        }
        BoundingBox {
            min,
            max,
            diagonal: (max - min).norm(),
        }
    }
}
