//! Points, streamlines, fiber clusters and the exact polyline measures.
//!
//! Coordinates are millimeters in RAS convention and are kept in `f64`
//! throughout; only the network path drops to `f32`.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Sub};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("streamline has {0} point(s), at least 2 are required")]
    TooFewPoints(usize),
    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },
    #[error("fiber cluster '{0}' has no streamlines")]
    EmptyCluster(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dot(self, other: Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Point3) -> Point3 {
        Point3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Point3) -> f64 {
        (self - other).norm()
    }

    pub fn min(self, other: Point3) -> Point3 {
        Point3::new(self.x.min(other.x), self.y.min(other.y), self.z.min(other.z))
    }

    pub fn max(self, other: Point3) -> Point3 {
        Point3::new(self.x.max(other.x), self.y.max(other.y), self.z.max(other.z))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(v: [f64; 3]) -> Self {
        Point3::new(v[0], v[1], v[2])
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, rhs: Point3) -> Point3 {
        Point3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, rhs: Point3) -> Point3 {
        Point3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// An ordered polyline of at least two finite points.
#[derive(Debug, Clone, PartialEq)]
pub struct Streamline {
    points: Vec<Point3>,
}

impl Streamline {
    pub fn new(points: Vec<Point3>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        if let Some(index) = points.iter().position(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite { index });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; a streamline holds at least two points.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> Point3 {
        self.points[0]
    }

    pub fn last(&self) -> Point3 {
        self.points[self.points.len() - 1]
    }

    pub fn reversed(&self) -> Streamline {
        let mut points = self.points.clone();
        points.reverse();
        Streamline { points }
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point3, Point3)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiberCluster {
    pub id: String,
    pub subject_id: String,
    streamlines: Vec<Streamline>,
}

impl FiberCluster {
    pub fn new(
        id: impl Into<String>,
        subject_id: impl Into<String>,
        streamlines: Vec<Streamline>,
    ) -> Result<Self, GeometryError> {
        let id = id.into();
        if streamlines.is_empty() {
            return Err(GeometryError::EmptyCluster(id));
        }
        Ok(Self {
            id,
            subject_id: subject_id.into(),
            streamlines,
        })
    }

    pub fn streamlines(&self) -> &[Streamline] {
        &self.streamlines
    }

    pub fn n_streamlines(&self) -> usize {
        self.streamlines.len()
    }

    pub fn n_points(&self) -> usize {
        self.streamlines.iter().map(Streamline::len).sum()
    }

    pub fn points(&self) -> impl Iterator<Item = Point3> + '_ {
        self.streamlines.iter().flat_map(|s| s.points().iter().copied())
    }
}

/// The five shape measures in their canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ShapeVector {
    pub length: f64,
    pub span: f64,
    pub volume: f64,
    pub total_surface_area: f64,
    pub irregularity: f64,
}

impl ShapeVector {
    pub const LEN: usize = 5;
    pub const NAMES: [&'static str; 5] = [
        "length",
        "span",
        "volume",
        "total_surface_area",
        "irregularity",
    ];
    /// Human-readable row labels, in canonical order.
    pub const LABELS: [&'static str; 5] = [
        "Length",
        "Span",
        "Volume",
        "Total Surface Area",
        "Irregularity",
    ];

    pub fn to_array(&self) -> [f64; 5] {
        [
            self.length,
            self.span,
            self.volume,
            self.total_surface_area,
            self.irregularity,
        ]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Self {
            length: v[0],
            span: v[1],
            volume: v[2],
            total_surface_area: v[3],
            irregularity: v[4],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

pub fn streamline_length(s: &Streamline) -> f64 {
    s.segments().map(|(a, b)| a.distance(b)).sum()
}

pub fn streamline_span(s: &Streamline) -> f64 {
    s.first().distance(s.last())
}

pub fn cluster_mean_length(c: &FiberCluster) -> f64 {
    mean(c.streamlines().iter().map(streamline_length))
}

/// Mean of the per-streamline endpoint distances.
pub fn cluster_mean_span(c: &FiberCluster) -> f64 {
    mean(c.streamlines().iter().map(streamline_span))
}

pub fn bounding_box(c: &FiberCluster) -> (Point3, Point3) {
    let first = c.streamlines()[0].first();
    c.points()
        .fold((first, first), |(lo, hi), p| (lo.min(p), hi.max(p)))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}
