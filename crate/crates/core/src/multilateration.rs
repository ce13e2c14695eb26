//! Tag positioning from ranges to anchors at known positions.

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::lsq::{self, LmSettings, ResidualProblem};

/// Condition number of the linearized system above which the anchors are
/// treated as collinear.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagFix {
    pub position: Point2,
    pub rms_residual: f64,
    pub n_anchors_used: usize,
    pub iterations: usize,
}

fn check_inputs(anchors: &[Point2], ranges: &[f64]) -> Result<()> {
    if anchors.len() != ranges.len() {
        return Err(Error::LengthMismatch {
            expected: anchors.len(),
            actual: ranges.len(),
        });
    }
    if anchors.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "multilateration needs at least 3 anchors, got {}",
            anchors.len()
        )));
    }
    if let Some(r) = ranges.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
        return Err(Error::InvalidValue(format!("invalid range {r}")));
    }
    Ok(())
}

/// Closed-form start: subtracting the first range equation from the others
/// gives `2(aᵢ − a₀)·p = |aᵢ|² − |a₀|² − rᵢ² + r₀²`, solved in the
/// least-squares sense.
pub fn linear_initial_guess(anchors: &[Point2], ranges: &[f64]) -> Result<Point2> {
    check_inputs(anchors, ranges)?;
    let (a0, r0) = (anchors[0], ranges[0]);
    let mut ata = Matrix2::<f64>::zeros();
    let mut atb = Vector2::<f64>::zeros();
    for (&a, &r) in anchors.iter().zip(ranges).skip(1) {
        let row = Vector2::new(2.0 * (a.x - a0.x), 2.0 * (a.y - a0.y));
        let rhs = a.dot(a) - a0.dot(a0) - r * r + r0 * r0;
        ata += row * row.transpose();
        atb += row * rhs;
    }
    let eig = ata.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    // cond(A) = √(λmax/λmin) of AᵀA
    let condition = if lo > 0.0 { (hi / lo).sqrt() } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::CollinearAnchors { condition });
    }
    let p = ata
        .try_inverse()
        .ok_or(Error::CollinearAnchors { condition })?
        * atb;
    Ok(Point2::new(p.x, p.y))
}

/// Residuals `‖p − aᵢ‖ − rᵢ` for a single tag.
#[derive(Debug, Clone)]
pub struct TagProblem<'a> {
    anchors: &'a [Point2],
    ranges: &'a [f64],
}

impl<'a> TagProblem<'a> {
    pub fn new(anchors: &'a [Point2], ranges: &'a [f64]) -> Result<Self> {
        check_inputs(anchors, ranges)?;
        Ok(Self { anchors, ranges })
    }
}

impl ResidualProblem for TagProblem<'_> {
    fn n_params(&self) -> usize {
        2
    }

    fn n_residuals(&self) -> usize {
        self.anchors.len()
    }

    fn residuals(&self, x: &[f64], out: &mut [f64]) {
        let p = Point2::new(x[0], x[1]);
        for (k, (&a, &r)) in self.anchors.iter().zip(self.ranges).enumerate() {
            out[k] = (p - a).norm() - r;
        }
    }

    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        let p = Point2::new(x[0], x[1]);
        for (k, &a) in self.anchors.iter().enumerate() {
            let mut diff = p - a;
            let mut d = diff.norm();
            if d < 1e-12 {
                diff = Point2::new(1e-9, 0.0);
                d = 1e-9;
            }
            out[(k, 0)] = diff.x / d;
            out[(k, 1)] = diff.y / d;
        }
    }
}

/// Least-squares tag fix, started from `guess` or the linear solution.
pub fn locate_tag(anchors: &[Point2], ranges: &[f64], guess: Option<Point2>) -> Result<TagFix> {
    locate_tag_with(anchors, ranges, guess, &LmSettings::default())
}

pub fn locate_tag_with(
    anchors: &[Point2],
    ranges: &[f64],
    guess: Option<Point2>,
    settings: &LmSettings,
) -> Result<TagFix> {
    let problem = TagProblem::new(anchors, ranges)?;
    let start = match guess {
        Some(g) => g,
        None => linear_initial_guess(anchors, ranges)?,
    };
    let report = lsq::minimize(&problem, &[start.x, start.y], settings)?;
    let fix = TagFix {
        position: Point2::new(report.x[0], report.x[1]),
        rms_residual: (report.cost / anchors.len() as f64).sqrt(),
        n_anchors_used: anchors.len(),
        iterations: report.iterations,
    };
    if report.converged {
        Ok(fix)
    } else {
        Err(Error::FixNotConverged(fix))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::distance;
    use crate::lsq::numerical_gradient;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ranges_to(tag: Point2, anchors: &[Point2]) -> Vec<f64> {
        anchors.iter().map(|&a| distance(tag, a)).collect()
    }

    fn five_anchors() -> Vec<Point2> {
        [(0.0, 0.0), (9.0, 0.0), (16.0, 3.0), (13.0, 17.0), (2.0, 19.0)]
            .iter()
            .map(|&(x, y)| Point2::new(x, y))
            .collect()
    }

    #[test]
    fn linear_guess_is_exact_without_noise() {
        let anchors = &five_anchors()[..3];
        let tag = Point2::new(7.0, 8.0);
        let p = linear_initial_guess(anchors, &ranges_to(tag, anchors)).unwrap();
        assert!(distance(p, tag) < 1e-9);
    }

    #[test]
    fn linear_guess_at_an_anchor() {
        let anchors = five_anchors();
        let p = linear_initial_guess(&anchors, &ranges_to(anchors[2], &anchors)).unwrap();
        assert!(distance(p, anchors[2]) < 1e-9);
    }

    #[test]
    fn collinear_anchors_are_rejected() {
        let anchors = [Point2::ORIGIN, Point2::new(5.0, 0.0), Point2::new(10.0, 0.0)];
        let err = linear_initial_guess(&anchors, &[3.0, 4.0, 8.0]).unwrap_err();
        assert!(matches!(err, Error::CollinearAnchors { .. }));
        assert!(matches!(
            locate_tag(&anchors, &[3.0, 4.0, 8.0], None),
            Err(Error::CollinearAnchors { .. })
        ));
    }

    #[test]
    fn input_validation() {
        let anchors = five_anchors();
        assert!(matches!(
            locate_tag(&anchors[..2], &[1.0, 1.0], None),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            locate_tag(&anchors, &[1.0, 1.0], None),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn five_anchor_tag() {
        let anchors = five_anchors();
        let ranges = [
            113f64.sqrt(),
            68f64.sqrt(),
            106f64.sqrt(),
            117f64.sqrt(),
            146f64.sqrt(),
        ];
        assert_eq!(ranges.to_vec(), ranges_to(Point2::new(7.0, 8.0), &anchors));
        let fix = locate_tag(&anchors, &ranges, None).unwrap();
        assert_abs_diff_eq!(fix.position.x, 7.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fix.position.y, 8.0, epsilon = 1e-9);
        assert_eq!(fix.n_anchors_used, 5);
        assert!(fix.rms_residual < 1e-9);
    }

    #[test]
    fn centroid_of_triangle() {
        let anchors = [Point2::ORIGIN, Point2::new(10.0, 0.0), Point2::new(3.0, 8.0)];
        let c = Point2::new(13.0 / 3.0, 8.0 / 3.0);
        let fix = locate_tag(&anchors, &ranges_to(c, &anchors), None).unwrap();
        assert!(distance(fix.position, c) < 1e-9);
    }

    #[test]
    fn exact_guess_needs_no_iterations() {
        let anchors = five_anchors();
        let tag = Point2::new(7.0, 8.0);
        let fix = locate_tag(&anchors, &ranges_to(tag, &anchors), Some(tag)).unwrap();
        assert_eq!(fix.iterations, 0);
        assert_eq!(fix.position, tag);
        assert_eq!(fix.rms_residual, 0.0);
    }

    #[test]
    fn generate_and_recover() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut done = 0;
        while done < 200 {
            let n = rng.random_range(3..7);
            let anchors: Vec<Point2> = (0..n)
                .map(|_| Point2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)))
                .collect();
            let tag = Point2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
            match locate_tag(&anchors, &ranges_to(tag, &anchors), None) {
                Ok(fix) => assert!(distance(fix.position, tag) <= 1e-6),
                Err(Error::CollinearAnchors { .. }) => continue,
                Err(e) => panic!("{e}"),
            }
            done += 1;
        }
    }

    #[test]
    fn fourth_anchor_never_hurts_at_zero_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let anchors: Vec<Point2> = (0..4)
                .map(|_| Point2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)))
                .collect();
            let tag = Point2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let ranges = ranges_to(tag, &anchors);
            let Ok(three) = locate_tag(&anchors[..3], &ranges[..3], None) else { continue };
            let four = locate_tag(&anchors, &ranges, None).unwrap();
            let e3 = distance(three.position, tag);
            let e4 = distance(four.position, tag);
            assert!(e4 <= e3.max(1e-9), "{e4} > {e3}");
        }
    }

    #[test]
    fn gradient_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let anchors: Vec<Point2> = (0..4)
                .map(|_| Point2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)))
                .collect();
            let ranges: Vec<f64> = (0..4).map(|_| rng.random_range(1.0..25.0)).collect();
            let problem = TagProblem::new(&anchors, &ranges).unwrap();
            let x = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
            let g = problem.gradient(&x);
            let fd = numerical_gradient(|p| problem.cost(p), &x, 1e-6);
            let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-5 * scale);
            }
            let guess = Point2::new(x[0], x[1]);
            let fix = match locate_tag(&anchors, &ranges, Some(guess)) {
                Ok(f) | Err(Error::FixNotConverged(f)) => f,
                Err(e) => panic!("{e}"),
            };
            let end = problem.cost(&[fix.position.x, fix.position.y]);
            assert!(end <= problem.cost(&x));
        }
    }
}
