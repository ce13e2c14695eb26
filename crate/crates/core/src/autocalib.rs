//! Anchor autocalibration from shared inter-anchor range statistics.
//!
//! The first calibration pins the frame with three rules: Anchor 0 at the
//! origin, Anchor 1 on the positive x-axis, and every other anchor in the
//! upper half-plane. Each anchor is placed from its ranges to those two
//! anchors, then all positions are refined jointly by least squares on the
//! pairwise distances. Later calibrations start from a prior estimate and keep
//! only the origin rule.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bilaterate_positive_y, distance, Point2};
use crate::lsq::{self, LmSettings, ResidualProblem};
use crate::ranging::{correct_measurement, RangingModel};

/// Mean, standard deviation and sample count of one directed pair's ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl PairStats {
    /// Sample mean and (n − 1) standard deviation; zero std for one sample.
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = if samples.len() > 1 {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: samples.len(),
        })
    }

    /// Pools two sample sets as if their raw values had been concatenated.
    pub fn pooled(self, other: PairStats) -> PairStats {
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mean = (na * self.mean + nb * other.mean) / n;
        let ss = (na - 1.0).max(0.0) * self.std.powi(2)
            + (nb - 1.0).max(0.0) * other.std.powi(2)
            + na * (self.mean - mean).powi(2)
            + nb * (other.mean - mean).powi(2);
        let std = if n > 1.0 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
        PairStats {
            mean,
            std,
            count: self.count + other.count,
        }
    }
}

/// Directed-pair range statistics for a deployment of `n ≥ 3` anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceStatsMatrix {
    n: usize,
    entries: Vec<Option<PairStats>>,
}

impl DistanceStatsMatrix {
    pub fn new(n_anchors: usize) -> Result<Self> {
        if n_anchors < 3 {
            return Err(Error::InsufficientData(format!(
                "autocalibration needs at least 3 anchors, got {n_anchors}"
            )));
        }
        Ok(Self {
            n: n_anchors,
            entries: vec![None; n_anchors * n_anchors],
        })
    }

    /// Noise-free statistics (one sample per directed pair) for known positions.
    pub fn from_positions(positions: &[Point2]) -> Result<Self> {
        let mut m = Self::new(positions.len())?;
        for i in 0..m.n {
            for j in 0..m.n {
                if i != j {
                    let d = distance(positions[i], positions[j]);
                    m.set(i, j, PairStats { mean: d, std: 0.0, count: 1 })?;
                }
            }
        }
        Ok(m)
    }

    pub fn n_anchors(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, i: usize, j: usize, stats: PairStats) -> Result<()> {
        if i >= self.n || j >= self.n || i == j {
            return Err(Error::InvalidValue(format!(
                "pair ({i}, {j}) is not a directed pair of {} anchors",
                self.n
            )));
        }
        if !(stats.mean > 0.0) || !stats.mean.is_finite() || stats.count == 0 {
            return Err(Error::InvalidValue(format!(
                "pair ({i}, {j}) needs a positive mean and count, got mean={} count={}",
                stats.mean, stats.count
            )));
        }
        if !(stats.std >= 0.0) || !stats.std.is_finite() {
            return Err(Error::InvalidValue(format!(
                "pair ({i}, {j}) has invalid std {}",
                stats.std
            )));
        }
        self.entries[i * self.n + j] = Some(stats);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<PairStats> {
        if i >= self.n || j >= self.n || i == j {
            return None;
        }
        self.entries[i * self.n + j]
    }

    /// Count-weighted combination of the `(i, j)` and `(j, i)` statistics.
    pub fn sym(&self, i: usize, j: usize) -> Option<PairStats> {
        match (self.get(i, j), self.get(j, i)) {
            (Some(a), Some(b)) => Some(a.pooled(b)),
            (a, b) => a.or(b),
        }
    }

    fn sym_mean(&self, i: usize, j: usize) -> Result<f64> {
        self.sym(i, j).map(|s| s.mean).ok_or(Error::MissingPair(i.min(j), i.max(j)))
    }

    /// Directed pairs that hold statistics, in row-major order.
    pub fn measured(&self) -> impl Iterator<Item = (usize, usize, PairStats)> + '_ {
        (0..self.n).flat_map(move |i| {
            (0..self.n).filter_map(move |j| self.get(i, j).map(|s| (i, j, s)))
        })
    }

    /// The first unordered pair with no statistics in either direction.
    pub fn first_missing_pair(&self) -> Option<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| ((i + 1)..self.n).map(move |j| (i, j)))
            .find(|&(i, j)| self.sym(i, j).is_none())
    }

    /// The first ordered pair with no statistics of its own.
    pub fn first_missing_directed_pair(&self) -> Option<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| (0..self.n).map(move |j| (i, j)))
            .find(|&(i, j)| i != j && self.get(i, j).is_none())
    }

    /// Applies the inverse bias line to every mean; stds scale by `1/slope`.
    pub fn bias_corrected(&self, model: &RangingModel) -> Result<Self> {
        let mut out = Self::new(self.n)?;
        for (i, j, s) in self.measured() {
            let stats = PairStats {
                mean: correct_measurement(s.mean, model),
                std: s.std / model.slope,
                count: s.count,
            };
            out.set(i, j, stats)
                .map_err(|e| Error::InvalidValue(format!("after bias correction: {e}")))?;
        }
        Ok(out)
    }

    /// Reads `i,j,mean_m,std_m,count` rows. The anchor count is one more than
    /// the largest id seen.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::InvalidValue(format!("line 1: {e}")))?
            .clone();
        let expected = ["i", "j", "mean_m", "std_m", "count"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::InvalidValue(format!(
                "line 1: expected header `{}`",
                expected.join(",")
            )));
        }
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::InvalidValue(format!("line {line}: {e}"))
            })?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let bad = |what: &str, e: &dyn std::fmt::Display| {
                Error::InvalidValue(format!("line {line}: {what}: {e}"))
            };
            let get = |k: usize| record.get(k).unwrap_or("");
            let i: usize = get(0).parse().map_err(|e| bad("i", &e))?;
            let j: usize = get(1).parse().map_err(|e| bad("j", &e))?;
            let mean: f64 = get(2).parse().map_err(|e| bad("mean_m", &e))?;
            let std: f64 = get(3).parse().map_err(|e| bad("std_m", &e))?;
            let count: usize = get(4).parse().map_err(|e| bad("count", &e))?;
            rows.push((line, i, j, PairStats { mean, std, count }));
        }
        let n = rows.iter().map(|&(_, i, j, _)| i.max(j) + 1).max().unwrap_or(0);
        let mut m = Self::new(n)?;
        for (line, i, j, stats) in rows {
            if m.get(i, j).is_some() {
                return Err(Error::InvalidValue(format!("line {line}: duplicate pair ({i}, {j})")));
            }
            m.set(i, j, stats)
                .map_err(|e| Error::InvalidValue(format!("line {line}: {e}")))?;
        }
        Ok(m)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))?;
        Self::read_csv(file)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "i,j,mean_m,std_m,count")?;
        for (i, j, s) in self.measured() {
            writeln!(
                w,
                "{i},{j},{},{},{}",
                crate::fmt_sig(s.mean),
                crate::fmt_sig(s.std),
                s.count
            )?;
        }
        Ok(())
    }
}

/// Estimated anchor positions in the Anchor-0 frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub positions: Vec<Point2>,
    /// `√(F / n_pairs)` over unweighted pair residuals, meters.
    pub rms_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// How pair residuals are weighted in the refinement objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PairWeighting {
    #[default]
    Unweighted,
    /// `1/max(std, min_std)²` from the shared per-pair standard deviation.
    InverseVariance { min_std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CalibrationOptions {
    pub weighting: PairWeighting,
    pub solver: LmSettings,
}

/// Joint anchor-position problem with Anchor 0 pinned at the origin. The free
/// parameters are `(x₁, y₁, …, x_{n−1}, y_{n−1})`.
#[derive(Debug, Clone)]
pub struct AnchorFrameProblem {
    n: usize,
    pairs: Vec<(usize, usize, f64, f64)>,
}

/// Offset used when two iterates coincide and the distance has no derivative.
const COINCIDENT_NUDGE: Point2 = Point2 { x: 1e-9, y: 0.0 };

fn separation(a: Point2, b: Point2) -> (Point2, f64) {
    let diff = a - b;
    let d = diff.norm();
    if d < 1e-12 {
        (COINCIDENT_NUDGE, COINCIDENT_NUDGE.norm())
    } else {
        (diff, d)
    }
}

impl AnchorFrameProblem {
    pub fn new(d: &DistanceStatsMatrix, weighting: PairWeighting) -> Result<Self> {
        let n = d.n_anchors();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if let Some(s) = d.sym(i, j) {
                    let w = match weighting {
                        PairWeighting::Unweighted => 1.0,
                        PairWeighting::InverseVariance { min_std } => 1.0 / s.std.max(min_std).powi(2),
                    };
                    pairs.push((i, j, s.mean, w.sqrt()));
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::InsufficientData("no measured anchor pairs".into()));
        }
        Ok(Self { n, pairs })
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn params_from_positions(positions: &[Point2]) -> Vec<f64> {
        positions[1..].iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn positions_from_params(&self, x: &[f64]) -> Vec<Point2> {
        std::iter::once(Point2::ORIGIN)
            .chain(x.chunks_exact(2).map(|c| Point2::new(c[0], c[1])))
            .collect()
    }

    fn point(x: &[f64], i: usize) -> Point2 {
        if i == 0 {
            Point2::ORIGIN
        } else {
            Point2::new(x[2 * (i - 1)], x[2 * (i - 1) + 1])
        }
    }

    /// Unweighted `Σ (‖pᵢ − pⱼ‖ − dᵢⱼ)²`.
    pub fn unweighted_cost(&self, x: &[f64]) -> f64 {
        self.pairs
            .iter()
            .map(|&(i, j, d, _)| {
                let (_, dist) = separation(Self::point(x, i), Self::point(x, j));
                (dist - d).powi(2)
            })
            .sum()
    }
}

impl ResidualProblem for AnchorFrameProblem {
    fn n_params(&self) -> usize {
        2 * (self.n - 1)
    }

    fn n_residuals(&self) -> usize {
        self.pairs.len()
    }

    fn residuals(&self, x: &[f64], out: &mut [f64]) {
        for (k, &(i, j, d, w)) in self.pairs.iter().enumerate() {
            let (_, dist) = separation(Self::point(x, i), Self::point(x, j));
            out[k] = w * (dist - d);
        }
    }

    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
        for (k, &(i, j, _, w)) in self.pairs.iter().enumerate() {
            let (diff, dist) = separation(Self::point(x, i), Self::point(x, j));
            let u = diff * (w / dist);
            if i > 0 {
                out[(k, 2 * (i - 1))] = u.x;
                out[(k, 2 * (i - 1) + 1)] = u.y;
            }
            if j > 0 {
                out[(k, 2 * (j - 1))] = -u.x;
                out[(k, 2 * (j - 1) + 1)] = -u.y;
            }
        }
    }
}

/// Geometric first guess: Anchor 0 at the origin, Anchor 1 at `(d₀₁, 0)`,
/// every other anchor bilaterated from its ranges to those two.
pub fn initial_placement(d: &DistanceStatsMatrix) -> Result<Vec<Point2>> {
    let n = d.n_anchors();
    let d01 = d.sym_mean(0, 1)?;
    let mut positions = Vec::with_capacity(n);
    positions.push(Point2::ORIGIN);
    positions.push(Point2::new(d01, 0.0));
    for i in 2..n {
        let d0i = d.sym_mean(0, i)?;
        let d1i = d.sym_mean(1, i)?;
        positions.push(bilaterate_positive_y(d01, d0i, d1i).map_err(|e| e.with_anchor(i))?);
    }
    Ok(positions)
}

/// Least-squares refinement of all anchor positions with Anchor 0 held at
/// the origin.
pub fn refine_lse(initial: &[Point2], d: &DistanceStatsMatrix) -> Result<CalibrationResult> {
    refine_lse_with(initial, d, &CalibrationOptions::default())
}

pub fn refine_lse_with(
    initial: &[Point2],
    d: &DistanceStatsMatrix,
    options: &CalibrationOptions,
) -> Result<CalibrationResult> {
    if initial.len() != d.n_anchors() {
        return Err(Error::LengthMismatch {
            expected: d.n_anchors(),
            actual: initial.len(),
        });
    }
    if initial[0] != Point2::ORIGIN {
        return Err(Error::InvalidValue(format!(
            "initial Anchor 0 must be at the origin, got ({}, {})",
            initial[0].x, initial[0].y
        )));
    }
    let problem = AnchorFrameProblem::new(d, options.weighting)?;
    let x0 = AnchorFrameProblem::params_from_positions(initial);
    let report = lsq::minimize(&problem, &x0, &options.solver)?;
    let result = CalibrationResult {
        positions: problem.positions_from_params(&report.x),
        rms_residual: (problem.unweighted_cost(&report.x) / problem.n_pairs() as f64).sqrt(),
        iterations: report.iterations,
        converged: report.converged,
    };
    if result.converged {
        Ok(result)
    } else {
        Err(Error::CalibrationNotConverged(Box::new(result)))
    }
}

/// Full calibration: bias-correct the shared means, start from `prior`
/// (shifted so its Anchor 0 is at the origin) or from the geometric
/// placement, then refine.
///
/// With a prior the x-axis and half-plane rules are not re-imposed.
pub fn calibrate(
    d: &DistanceStatsMatrix,
    ranging_model: &RangingModel,
    prior: Option<&[Point2]>,
) -> Result<CalibrationResult> {
    calibrate_with(d, ranging_model, prior, &CalibrationOptions::default())
}

pub fn calibrate_with(
    d: &DistanceStatsMatrix,
    ranging_model: &RangingModel,
    prior: Option<&[Point2]>,
    options: &CalibrationOptions,
) -> Result<CalibrationResult> {
    let corrected = d.bias_corrected(ranging_model)?;
    let start = match prior {
        Some(prior) => {
            if prior.len() != d.n_anchors() {
                return Err(Error::LengthMismatch {
                    expected: d.n_anchors(),
                    actual: prior.len(),
                });
            }
            let origin = prior[0];
            let mut start: Vec<Point2> = prior.iter().map(|&p| p - origin).collect();
            start[0] = Point2::ORIGIN;
            start
        }
        None => initial_placement(&corrected)?,
    };
    refine_lse_with(&start, &corrected, options)
}

/// Writes a calibration result as JSON with 9 significant digits.
pub fn write_result_json<W: Write>(result: &CalibrationResult, w: W) -> Result<()> {
    let value = serde_json::json!({
        "positions": result.positions.iter().map(|p| serde_json::json!({
            "x": crate::round_sig(p.x),
            "y": crate::round_sig(p.y),
        })).collect::<Vec<_>>(),
        "rms_residual_m": crate::round_sig(result.rms_residual),
        "iterations": result.iterations,
        "converged": result.converged,
    });
    serde_json::to_writer_pretty(w, &value).map_err(|e| Error::InvalidValue(e.to_string()))
}
