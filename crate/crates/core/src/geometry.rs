//! Planar primitives, the two-circle placement kernel and the frame error
//! metrics used to score calibrations.
//!
//! All lengths are meters and all angles radians.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance on `d0i² − x²` below which the y-coordinate of a
/// bilaterated point is clamped to zero instead of rejected.
pub const INTERSECTION_TOL: f64 = 1e-6;

/// A position in the plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    /// Builds a point. Coordinates must be finite; this is checked in debug
    /// builds only, use [`Point2::try_new`] for untrusted input.
    pub fn new(x: f64, y: f64) -> Self {
        debug_assert!(x.is_finite() && y.is_finite(), "non-finite point ({x}, {y})");
        Self { x, y }
    }

    pub fn try_new(x: f64, y: f64) -> Result<Self> {
        if x.is_finite() && y.is_finite() {
            Ok(Self { x, y })
        } else {
            Err(Error::InvalidValue(format!("non-finite point ({x}, {y})")))
        }
    }

    pub fn from_polar(radius: f64, angle: f64) -> Self {
        Self::new(radius * angle.cos(), radius * angle.sin())
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    /// Rotates counter-clockwise about the origin.
    pub fn rotated(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }
}

/// Index of an anchor in a deployment. Ids are dense (`0..n`) and their order
/// is the counter-clockwise order the ranging protocol follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AnchorId(pub usize);

impl AnchorId {
    pub fn index(self) -> usize {
        self.0
    }

    /// Next id in protocol order, wrapping at `n`.
    pub fn next(self, n: usize) -> AnchorId {
        AnchorId((self.0 + 1) % n)
    }
}

impl std::fmt::Display for AnchorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-node translation errors of an estimated frame and its signed rotation error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub translation_error: Vec<f64>,
    pub rotation_error: f64,
}

pub fn distance(p: Point2, q: Point2) -> f64 {
    (p - q).norm()
}

/// Intersects the circle of radius `d0i` about the origin with the circle of
/// radius `d1i` about `(d01, 0)` and returns the branch with `y ≥ 0`.
///
/// Slightly inconsistent triplets (the circles miss each other by less than
/// [`INTERSECTION_TOL`] relative to `d0i²`) are projected onto the x-axis.
pub fn bilaterate_positive_y(d01: f64, d0i: f64, d1i: f64) -> Result<Point2> {
    if !(d01 > 0.0) || !d01.is_finite() {
        return Err(Error::degenerate(format!("baseline distance must be positive, got {d01}")));
    }
    if !(d0i > 0.0 && d1i > 0.0) || !d0i.is_finite() || !d1i.is_finite() {
        return Err(Error::degenerate(format!(
            "ranges must be positive, got d0i={d0i}, d1i={d1i}"
        )));
    }
    let x = (d0i * d0i - d1i * d1i + d01 * d01) / (2.0 * d01);
    let y_sq = d0i * d0i - x * x;
    if y_sq < -INTERSECTION_TOL * d0i * d0i {
        return Err(Error::degenerate(format!(
            "circles do not intersect (d01={d01}, d0i={d0i}, d1i={d1i})"
        )));
    }
    Ok(Point2::new(x, y_sq.max(0.0).sqrt()))
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Signed angle between the x-axis and the ray from the origin through the
/// estimated Anchor 1, in `(−π, π]`.
pub fn rotation_error(estimated_a1: Point2) -> Result<f64> {
    if estimated_a1.x == 0.0 && estimated_a1.y == 0.0 {
        return Err(Error::degenerate("Anchor 1 estimate coincides with the origin").with_anchor(1));
    }
    let angle = estimated_a1.y.atan2(estimated_a1.x);
    Ok(if angle <= -PI { PI } else { angle })
}

/// Rotation error of an estimated Anchor 1 against its true frame position:
/// the difference of the two baseline angles, wrapped into `(−π, π]`.
///
/// Reduces to [`rotation_error`] when the true Anchor 1 lies on the positive x-axis.
pub fn relative_rotation_error(estimated_a1: Point2, true_a1: Point2) -> Result<f64> {
    let estimated = rotation_error(estimated_a1)?;
    let truth = rotation_error(true_a1)?;
    Ok(wrap_angle(estimated - truth))
}

/// Translation error of each node after shifting the estimated anchor frame so
/// its origin lands on Anchor 0's true world position. No rotation alignment
/// is applied.
pub fn translation_errors(
    estimated: &[Point2],
    truth: &[Point2],
    truth_origin: Point2,
) -> Result<Vec<f64>> {
    if estimated.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: estimated.len(),
        });
    }
    if estimated.is_empty() {
        return Err(Error::InsufficientData("no nodes to compare".into()));
    }
    Ok(estimated
        .iter()
        .zip(truth)
        .map(|(&e, &t)| distance(e + truth_origin, t))
        .collect())
}

/// Combined translation and rotation metrics for an anchor frame estimate.
/// Anchor 1 must be present.
pub fn frame_errors(estimated: &[Point2], truth: &[Point2]) -> Result<ErrorMetrics> {
    if truth.len() < 2 {
        return Err(Error::InsufficientData("frame metrics need at least two anchors".into()));
    }
    let translation_error = translation_errors(estimated, truth, truth[0])?;
    let rotation_error = relative_rotation_error(estimated[1] - estimated[0], truth[1] - truth[0])?;
    Ok(ErrorMetrics {
        translation_error,
        rotation_error,
    })
}

/// Convex hull in counter-clockwise order (monotone chain). Collinear points
/// on the hull boundary are dropped.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let turn = |o: Point2, a: Point2, b: Point2| (a - o).cross(b - o);
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// True if `p` lies strictly inside the convex hull of `points`.
pub fn inside_convex_hull(p: Point2, points: &[Point2]) -> bool {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return false;
    }
    (0..hull.len()).all(|i| {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        (b - a).cross(p - a) > 0.0
    })
}
