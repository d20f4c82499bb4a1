//! Geometry kernels shared by every other module.
//!
//! Everything here is a pure function over borrowed inputs. Distances are
//! compared as squared Euclidean values; square roots are only taken where an
//! API promises metric distances.

mod chamfer;
mod knn;
mod normalize;
mod ray;
mod rigid;
mod sampling;

pub use chamfer::chamfer_l2;
pub use knn::{knn, knn_brute_force, GridIndex, Neighbor};
pub use normalize::{normalize_sequence, NormRecord};
pub use ray::{ray_triangle_intersect, Ray, TriangleHit};
pub use rigid::{Mat3, Rigid};
pub use sampling::fps;

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("empty point set")]
    EmptyPointSet,
    #[error("start index {index} out of range for {len} points")]
    StartIndexOutOfRange { index: usize, len: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds reference size {len}")]
    KTooLarge { k: usize, len: usize },
    #[error("channel `{channel}` has length {got}, expected {expected}")]
    ChannelLength {
        channel: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("empty sequence")]
    EmptySequence,
}

/// A point (or displacement) in world units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    #[inline]
    pub fn dist_sq(self, o: Point3) -> f64 {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        let dz = self.z - o.z;
        dx * dx + dy * dy + dz * dz
    }

    #[inline]
    pub fn dist(self, o: Point3) -> f64 {
        self.dist_sq(o).sqrt()
    }

    pub fn normalized(self) -> Point3 {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            self
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn component(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

impl Add for Point3 {
    type Output = Point3;
    #[inline]
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Point3 {
    #[inline]
    fn add_assign(&mut self, o: Point3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl Sub for Point3 {
    type Output = Point3;
    #[inline]
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    #[inline]
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Point3 {
    type Output = Point3;
    #[inline]
    fn div(self, s: f64) -> Point3 {
        Point3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    #[inline]
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// Arithmetic mean of a non-empty slice; `None` when empty.
pub fn centroid(points: &[Point3]) -> Option<Point3> {
    if points.is_empty() {
        return None;
    }
    let mut acc = Point3::ZERO;
    for p in points {
        acc += *p;
    }
    Some(acc / points.len() as f64)
}

/// Label reserved for points that belong to no body part.
pub const NOISE_LABEL: u8 = 9;

/// Per-point motion flow with a validity mask. Invalid rows hold the zero
/// vector and must not be read as displacements.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowField {
    pub vectors: Vec<Point3>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn all_invalid(n: usize) -> Self {
        Self {
            vectors: vec![Point3::ZERO; n],
            valid: vec![false; n],
        }
    }

    pub fn from_vectors(vectors: Vec<Point3>) -> Self {
        let valid = vec![true; vectors.len()];
        Self { vectors, valid }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<Point3> {
        self.valid[i].then(|| self.vectors[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn select(&self, indices: &[usize]) -> FlowField {
        FlowField {
            vectors: indices.iter().map(|&i| self.vectors[i]).collect(),
            valid: indices.iter().map(|&i| self.valid[i]).collect(),
        }
    }
}

/// One frame of a point cloud video with its optional per-point channels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloudFrame {
    pub points: Vec<Point3>,
    pub part_labels: Option<Vec<u8>>,
    pub flow: Option<FlowField>,
    pub vertex_ids: Option<Vec<Option<u32>>>,
}

impl PointCloudFrame {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks that every present channel has one entry per point.
    pub fn validate(&self) -> Result<(), GeomError> {
        let n = self.points.len();
        let check = |channel, got| {
            if got == n {
                Ok(())
            } else {
                Err(GeomError::ChannelLength {
                    channel,
                    got,
                    expected: n,
                })
            }
        };
        if let Some(l) = &self.part_labels {
            check("part_labels", l.len())?;
        }
        if let Some(f) = &self.flow {
            check("flow", f.vectors.len())?;
            check("flow.valid", f.valid.len())?;
        }
        if let Some(v) = &self.vertex_ids {
            check("vertex_ids", v.len())?;
        }
        Ok(())
    }

    /// Keeps the listed points (in the given order, repeats allowed) and
    /// their channel entries.
    pub fn select(&self, indices: &[usize]) -> PointCloudFrame {
        PointCloudFrame {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            part_labels: self
                .part_labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            flow: self.flow.as_ref().map(|f| f.select(indices)),
            vertex_ids: self
                .vertex_ids
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMeta {
    pub frame_rate: f32,
    pub actor_id: u32,
    pub motion_class: u32,
    /// Per-frame joint centers, `L × J`.
    pub joints: Option<Vec<Vec<Point3>>>,
}

impl Default for SequenceMeta {
    fn default() -> Self {
        Self {
            frame_rate: 10.0,
            actor_id: 0,
            motion_class: 0,
            joints: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSequence {
    pub frames: Vec<PointCloudFrame>,
    pub meta: SequenceMeta,
}

impl PointSequence {
    pub fn new(frames: Vec<PointCloudFrame>, meta: SequenceMeta) -> Self {
        Self { frames, meta }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Common per-frame point count, if all frames agree.
    pub fn uniform_point_count(&self) -> Option<usize> {
        let n = self.frames.first()?.len();
        self.frames.iter().all(|f| f.len() == n).then_some(n)
    }
}
