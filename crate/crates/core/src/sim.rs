//! Moving-deployment simulator: anchors and tags drift along noisy straight
//! paths, anchor position estimates accumulate odometry error between
//! calibrations, and tags are located every step.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autocalib::{calibrate, CalibrationResult};
use crate::error::{Error, Result};
use crate::geometry::{distance, inside_convex_hull, relative_rotation_error, Point2};
use crate::multilateration::locate_tag;
use crate::protocol::run_calibration_round;
use crate::ranging::{correct_measurement, simulate_measurement, RangingModel};
use crate::{fmt_sig, round_sig};

const STREAM_MOTION: u64 = 1;
const STREAM_DRIFT: u64 = 2;
const STREAM_RANGING: u64 = 3;
const STREAM_HEADINGS: u64 = 4;

/// When a calibration round is started.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trigger {
    /// Every `calibration_period` steps.
    Periodic,
    /// Whenever the mean anchor error exceeds this many meters. The simulator
    /// reads the error from ground truth.
    Threshold(f64),
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trigger::Periodic => write!(f, "periodic"),
            Trigger::Threshold(t) => write!(f, "threshold:{}", fmt_sig(*t)),
        }
    }
}

impl FromStr for Trigger {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "periodic" {
            return Ok(Trigger::Periodic);
        }
        let bad = || Error::InvalidValue(format!("trigger must be `periodic` or `threshold:<m>`, got `{s}`"));
        let t: f64 = s.strip_prefix("threshold:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if !(t.is_finite() && t >= 0.0) {
            return Err(bad());
        }
        Ok(Trigger::Threshold(t))
    }
}

impl Serialize for Trigger {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Trigger {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which anchor positions tags are located against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagAnchors {
    /// A fresh inter-anchor ranging solve every step, in the anchor frame
    /// (Anchor 0 at the origin, Anchor 1 on the positive x-axis). Errors are
    /// measured against the true tags in the same convention.
    #[default]
    Ranged,
    /// The anchors' own running estimates, which drift between calibrations.
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeMotion {
    /// Heading, radians.
    pub direction: f64,
    /// Meters per step.
    pub speed: f64,
    /// Per-coordinate Gaussian jitter added each step, meters.
    pub gaussian_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    pub speed: f64,
    pub gaussian_std: f64,
    /// Shared heading of the formation. Drawn from the seed when absent.
    pub heading: Option<f64>,
    /// Each node's heading deviates from the shared one by up to this much.
    pub heading_spread: f64,
    /// Explicit per-node motion, anchors first then tags. Overrides the
    /// fields above.
    pub nodes: Option<Vec<NodeMotion>>,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            speed: 0.2,
            gaussian_std: 0.05,
            heading: None,
            heading_spread: 0.1,
            nodes: None,
        }
    }
}

pub fn default_anchor_positions() -> Vec<Point2> {
    [(2.0, 3.0), (11.0, 3.0), (18.0, 6.0), (15.0, 20.0)]
        .iter()
        .map(|&(x, y)| Point2::new(x, y))
        .collect()
}

pub fn default_tag_positions() -> Vec<Point2> {
    [(9.0, 11.0), (12.0, 8.0), (14.0, 12.0)]
        .iter()
        .map(|&(x, y)| Point2::new(x, y))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n_anchors: usize,
    pub n_tags: usize,
    pub n_steps: usize,
    pub calibration_period: usize,
    /// Bound of the per-step, per-coordinate uniform odometry error, meters.
    pub drift_bound: f64,
    pub k_measurements: usize,
    pub seed: u64,
    pub motion: MotionConfig,
    pub ranging: RangingModel,
    pub initial_anchor_positions: Vec<Point2>,
    pub initial_tag_positions: Vec<Point2>,
    pub trigger: Trigger,
    /// Invert the ranging bias before solving.
    pub bias_correction: bool,
    pub tag_anchors: TagAnchors,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_anchors: 4,
            n_tags: 3,
            n_steps: 55,
            calibration_period: 10,
            drift_bound: 0.1,
            k_measurements: 5,
            seed: 1,
            motion: MotionConfig::default(),
            ranging: RangingModel::dwm1001(),
            initial_anchor_positions: default_anchor_positions(),
            initial_tag_positions: default_tag_positions(),
            trigger: Trigger::Periodic,
            bias_correction: true,
            tag_anchors: TagAnchors::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Reads a JSON scenario; absent fields take their defaults.
    pub fn from_json_reader<R: Read>(r: R) -> Result<Self> {
        serde_json::from_reader(r).map_err(|e| Error::InvalidConfig(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::InvalidConfig(vec![format!("{}: {e}", path.display())]))?;
        Self::from_json_reader(std::io::BufReader::new(file))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Collects every violated constraint.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_anchors < 3 {
            problems.push(format!("n_anchors: need at least 3, got {}", self.n_anchors));
        }
        if self.n_steps == 0 {
            problems.push("n_steps: must be at least 1".to_string());
        }
        if self.calibration_period == 0 {
            problems.push("calibration_period: must be at least 1".to_string());
        }
        if !(self.drift_bound >= 0.0 && self.drift_bound.is_finite()) {
            problems.push(format!("drift_bound: must be finite and >= 0, got {}", self.drift_bound));
        }
        if self.k_measurements == 0 {
            problems.push("k_measurements: must be at least 1".to_string());
        }
        let m = &self.motion;
        if !(m.speed >= 0.0 && m.speed.is_finite()) {
            problems.push(format!("motion.speed: must be finite and >= 0, got {}", m.speed));
        }
        if !(m.gaussian_std >= 0.0 && m.gaussian_std.is_finite()) {
            problems.push(format!("motion.gaussian_std: must be finite and >= 0, got {}", m.gaussian_std));
        }
        if !(m.heading_spread >= 0.0 && m.heading_spread.is_finite()) {
            problems.push(format!("motion.heading_spread: must be finite and >= 0, got {}", m.heading_spread));
        }
        if m.heading.is_some_and(|h| !h.is_finite()) {
            problems.push("motion.heading: must be finite".to_string());
        }
        if let Some(nodes) = &m.nodes {
            let want = self.n_anchors + self.n_tags;
            if nodes.len() != want {
                problems.push(format!("motion.nodes: expected {want} entries, got {}", nodes.len()));
            }
            for (i, n) in nodes.iter().enumerate() {
                if !(n.direction.is_finite() && n.speed >= 0.0 && n.speed.is_finite())
                    || !(n.gaussian_std >= 0.0 && n.gaussian_std.is_finite())
                {
                    problems.push(format!("motion.nodes[{i}]: invalid values"));
                }
            }
        }
        if let Err(Error::InvalidConfig(p)) = self.ranging.validate() {
            problems.extend(p);
        }
        if self.initial_anchor_positions.len() != self.n_anchors {
            problems.push(format!(
                "initial_anchor_positions: expected {} entries, got {}",
                self.n_anchors,
                self.initial_anchor_positions.len()
            ));
        }
        if self.initial_tag_positions.len() != self.n_tags {
            problems.push(format!(
                "initial_tag_positions: expected {} entries, got {}",
                self.n_tags,
                self.initial_tag_positions.len()
            ));
        }
        let anchors = &self.initial_anchor_positions;
        if anchors.iter().chain(&self.initial_tag_positions).any(|p| !p.is_finite()) {
            problems.push("initial positions: must be finite".to_string());
        } else if anchors.len() >= 3 {
            for (i, &t) in self.initial_tag_positions.iter().enumerate() {
                if !inside_convex_hull(t, anchors) {
                    problems.push(format!("initial_tag_positions[{i}]: outside the anchors' convex hull"));
                }
            }
            if anchors.len() >= 2 && distance(anchors[0], anchors[1]) == 0.0 {
                problems.push("initial_anchor_positions: anchors 0 and 1 coincide".to_string());
            }
        }
        if let Trigger::Threshold(t) = self.trigger {
            if !(t >= 0.0 && t.is_finite()) {
                problems.push(format!("trigger: threshold must be finite and >= 0, got {t}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// Per-node motion, drawing the shared heading and per-node deviations
    /// from the seed when not given explicitly.
    pub fn node_motions(&self) -> Vec<NodeMotion> {
        if let Some(nodes) = &self.motion.nodes {
            return nodes.clone();
        }
        let mut rng = stream(self.seed, STREAM_HEADINGS);
        let heading = match self.motion.heading {
            Some(h) => h,
            None => rng.random_range(-PI..PI),
        };
        let spread = self.motion.heading_spread;
        (0..self.n_anchors + self.n_tags)
            .map(|_| {
                let dev = if spread > 0.0 { rng.random_range(-spread..=spread) } else { 0.0 };
                NodeMotion {
                    direction: heading + dev,
                    speed: self.motion.speed,
                    gaussian_std: self.motion.gaussian_std,
                }
            })
            .collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Estimated anchor positions are kept in the same world axes as the truth;
/// only their differences from Anchor 0 are meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub step: usize,
    pub true_anchor_pos: Vec<Point2>,
    pub est_anchor_pos: Vec<Point2>,
    pub true_tag_pos: Vec<Point2>,
    pub last_calibration_step: usize,
}

impl WorldState {
    /// Estimated anchors in the Anchor-0 frame.
    pub fn anchor_frame(&self) -> Vec<Point2> {
        let origin = self.est_anchor_pos[0];
        self.est_anchor_pos.iter().map(|&p| p - origin).collect()
    }

    /// Estimated anchors in the frame shifted onto Anchor 0's true position.
    pub fn aligned_anchor_estimates(&self) -> Vec<Point2> {
        let shift = self.true_anchor_pos[0] - self.est_anchor_pos[0];
        self.est_anchor_pos.iter().map(|&p| p + shift).collect()
    }

    pub fn anchor_errors(&self) -> Vec<f64> {
        self.aligned_anchor_estimates()
            .iter()
            .zip(&self.true_anchor_pos)
            .map(|(&e, &t)| distance(e, t))
            .collect()
    }

    pub fn mean_anchor_error(&self) -> f64 {
        let errs = self.anchor_errors();
        errs.iter().sum::<f64>() / errs.len() as f64
    }
}

/// Advances every true position along its heading with Gaussian jitter. The
/// estimates follow by the same displacement.
pub fn step_motion<R: Rng + ?Sized>(mut state: WorldState, motions: &[NodeMotion], rng: &mut R) -> WorldState {
    let n_anchors = state.true_anchor_pos.len();
    let mut displace = |m: &NodeMotion| {
        let (dx, dy) = if m.gaussian_std > 0.0 {
            let noise = Normal::new(0.0, m.gaussian_std).expect("finite std");
            (noise.sample(rng), noise.sample(rng))
        } else {
            (0.0, 0.0)
        };
        Point2::from_polar(m.speed, m.direction) + Point2::new(dx, dy)
    };
    for i in 0..n_anchors {
        let d = displace(&motions[i]);
        state.true_anchor_pos[i] = state.true_anchor_pos[i] + d;
        state.est_anchor_pos[i] = state.est_anchor_pos[i] + d;
    }
    for (j, tag) in state.true_tag_pos.iter_mut().enumerate() {
        *tag = *tag + displace(&motions[n_anchors + j]);
    }
    state.step += 1;
    state
}

/// Adds `Uniform(−bound, bound)` odometry error to each coordinate of every
/// anchor estimate, Anchor 0 included.
pub fn apply_drift<R: Rng + ?Sized>(mut state: WorldState, drift_bound: f64, rng: &mut R) -> WorldState {
    if drift_bound > 0.0 {
        let u = Uniform::new_inclusive(-drift_bound, drift_bound).expect("finite bound");
        for p in &mut state.est_anchor_pos {
            *p = *p + Point2::new(u.sample(rng), u.sample(rng));
        }
    }
    state
}

/// Per-node outcome of one step. Tag errors are `None` when the fix failed.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub anchor_errors: Vec<f64>,
    pub tag_errors: Vec<Option<f64>>,
    pub rotation_error: f64,
    pub calibrated: bool,
    pub true_anchor_pos: Vec<Point2>,
    /// Estimates shifted onto Anchor 0's true position.
    pub est_anchor_pos: Vec<Point2>,
    pub true_tag_pos: Vec<Point2>,
    pub est_tag_pos: Vec<Option<Point2>>,
    /// Failures that did not stop the run.
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimulationTrace {
    pub records: Vec<TraceRecord>,
}

struct Runner<'a> {
    cfg: &'a ScenarioConfig,
    motions: Vec<NodeMotion>,
    motion_rng: ChaCha8Rng,
    drift_rng: ChaCha8Rng,
    ranging_rng: ChaCha8Rng,
}

impl Runner<'_> {
    fn solve_frame(&mut self, true_anchors: &[Point2], prior: Option<&[Point2]>) -> Result<CalibrationResult> {
        let cfg = self.cfg;
        let (stats, _latency) = run_calibration_round(
            cfg.n_anchors,
            cfg.k_measurements,
            true_anchors,
            &cfg.ranging,
            &mut self.ranging_rng,
        )?;
        let model = if cfg.bias_correction {
            cfg.ranging
        } else {
            RangingModel::identity()
        };
        match calibrate(&stats, &model, prior) {
            Ok(r) => Ok(r),
            Err(Error::CalibrationNotConverged(r)) => Ok(*r),
            Err(e) => Err(e),
        }
    }

    fn locate(&mut self, frame: &[Point2], tag: Point2, true_anchors: &[Point2]) -> Result<Point2> {
        let cfg = self.cfg;
        let ranges: Vec<f64> = true_anchors
            .iter()
            .map(|&a| {
                let m = simulate_measurement(distance(a, tag), &cfg.ranging, &mut self.ranging_rng);
                if cfg.bias_correction {
                    correct_measurement(m, &cfg.ranging).max(0.0)
                } else {
                    m.max(0.0)
                }
            })
            .collect();
        match locate_tag(frame, &ranges, None) {
            Ok(fix) | Err(Error::FixNotConverged(fix)) => Ok(fix.position),
            Err(e) => Err(e),
        }
    }

    fn record(&mut self, state: &WorldState, calibrated: bool, mut diagnostics: Vec<String>) -> TraceRecord {
        let true0 = state.true_anchor_pos[0];
        // Frame the tags are solved in, plus the rotation taking it onto the
        // world axes.
        let tag_frame = match self.cfg.tag_anchors {
            TagAnchors::Estimated => Some((state.anchor_frame(), 0.0)),
            TagAnchors::Ranged => {
                let prior = state.anchor_frame();
                match self.solve_frame(&state.true_anchor_pos, Some(&prior)) {
                    Ok(r) => {
                        let p1 = r.positions[1];
                        let baseline = state.true_anchor_pos[1] - true0;
                        let frame = r.positions.iter().map(|p| p.rotated(-p1.y.atan2(p1.x))).collect();
                        Some((frame, baseline.y.atan2(baseline.x)))
                    }
                    Err(e) => {
                        diagnostics.push(format!("step {}: tag anchor frame: {e}", state.step));
                        None
                    }
                }
            }
        };
        let mut est_tag_pos = Vec::with_capacity(state.true_tag_pos.len());
        for (j, &tag) in state.true_tag_pos.iter().enumerate() {
            let est = match &tag_frame {
                Some((frame, to_world)) => match self.locate(frame, tag, &state.true_anchor_pos) {
                    Ok(p) => Some(p.rotated(*to_world) + true0),
                    Err(e) => {
                        diagnostics.push(format!("step {}: tag {j}: {e}", state.step));
                        None
                    }
                },
                None => None,
            };
            est_tag_pos.push(est);
        }
        let tag_errors = est_tag_pos
            .iter()
            .zip(&state.true_tag_pos)
            .map(|(e, &t)| e.map(|e| distance(e, t)))
            .collect();
        let frame = state.anchor_frame();
        let rotation_error = relative_rotation_error(frame[1], state.true_anchor_pos[1] - true0).unwrap_or_else(|e| {
            diagnostics.push(format!("step {}: rotation: {e}", state.step));
            f64::NAN
        });
        TraceRecord {
            step: state.step,
            anchor_errors: state.anchor_errors(),
            tag_errors,
            rotation_error,
            calibrated,
            true_anchor_pos: state.true_anchor_pos.clone(),
            est_anchor_pos: state.aligned_anchor_estimates(),
            true_tag_pos: state.true_tag_pos.clone(),
            est_tag_pos,
            diagnostics,
        }
    }
}

/// Runs the scenario to completion. Step 0 is the initial placement; steps
/// `1..n_steps` each apply motion, drift, an optional calibration, and tag
/// fixes.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimulationTrace> {
    cfg.validate()?;
    let mut runner = Runner {
        cfg,
        motions: cfg.node_motions(),
        motion_rng: stream(cfg.seed, STREAM_MOTION),
        drift_rng: stream(cfg.seed, STREAM_DRIFT),
        ranging_rng: stream(cfg.seed, STREAM_RANGING),
    };
    let anchors = cfg.initial_anchor_positions.clone();
    let initial = runner.solve_frame(&anchors, None)?;
    let mut state = WorldState {
        step: 0,
        est_anchor_pos: initial.positions.iter().map(|&p| p + anchors[0]).collect(),
        true_anchor_pos: anchors,
        true_tag_pos: cfg.initial_tag_positions.clone(),
        last_calibration_step: 0,
    };
    let mut records = vec![runner.record(&state, false, Vec::new())];

    for _ in 1..cfg.n_steps {
        state = step_motion(state, &runner.motions, &mut runner.motion_rng);
        state = apply_drift(state, cfg.drift_bound, &mut runner.drift_rng);
        let due = match cfg.trigger {
            Trigger::Periodic => state.step % cfg.calibration_period == 0,
            Trigger::Threshold(t) => state.mean_anchor_error() > t,
        };
        let mut diagnostics = Vec::new();
        let mut calibrated = false;
        if due {
            let prior = state.anchor_frame();
            match runner.solve_frame(&state.true_anchor_pos, Some(&prior)) {
                Ok(result) => {
                    let origin = state.est_anchor_pos[0];
                    state.est_anchor_pos = result.positions.iter().map(|&p| p + origin).collect();
                    state.last_calibration_step = state.step;
                    calibrated = true;
                }
                Err(e) => diagnostics.push(format!("step {}: calibration: {e}", state.step)),
            }
        }
        records.push(runner.record(&state, calibrated, diagnostics));
    }
    Ok(SimulationTrace { records })
}

const TRACE_HEADER: &str = "step,node_kind,node_id,true_x,true_y,est_x,est_y,error_m,rotation_error_rad,calibrated";

impl SimulationTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        let opt = |v: Option<f64>| v.map(fmt_sig).unwrap_or_default();
        for r in &self.records {
            let rot = if r.rotation_error.is_nan() { String::new() } else { fmt_sig(r.rotation_error) };
            let cal = u8::from(r.calibrated);
            for (i, (t, e)) in r.true_anchor_pos.iter().zip(&r.est_anchor_pos).enumerate() {
                writeln!(
                    w,
                    "{},anchor,{i},{},{},{},{},{},{rot},{cal}",
                    r.step,
                    fmt_sig(t.x),
                    fmt_sig(t.y),
                    fmt_sig(e.x),
                    fmt_sig(e.y),
                    fmt_sig(r.anchor_errors[i]),
                )?;
            }
            for (j, (t, e)) in r.true_tag_pos.iter().zip(&r.est_tag_pos).enumerate() {
                writeln!(
                    w,
                    "{},tag,{j},{},{},{},{},{},{rot},{cal}",
                    r.step,
                    fmt_sig(t.x),
                    fmt_sig(t.y),
                    opt(e.map(|p| p.x)),
                    opt(e.map(|p| p.y)),
                    opt(r.tag_errors[j]),
                )?;
            }
        }
        Ok(())
    }

    /// Rebuilds a trace from [`Self::write_csv`] output. Rows must be grouped
    /// by step with anchors listed by id.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::InvalidValue(format!("trace header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.join(",") != TRACE_HEADER {
            return Err(Error::InvalidValue(format!("trace header must be `{TRACE_HEADER}`")));
        }
        let mut records: Vec<TraceRecord> = Vec::new();
        for (idx, row) in rdr.records().enumerate() {
            let line = idx + 2;
            let row = row.map_err(|e| Error::InvalidValue(format!("line {line}: {e}")))?;
            if row.len() != 10 {
                return Err(Error::InvalidValue(format!("line {line}: expected 10 fields, got {}", row.len())));
            }
            let bad = |what: &str| Error::InvalidValue(format!("line {line}: invalid {what}"));
            let num = |k: usize, what: &str| -> Result<f64> {
                row[k].trim().parse::<f64>().map_err(|_| bad(what))
            };
            let opt = |k: usize, what: &str| -> Result<Option<f64>> {
                if row[k].trim().is_empty() {
                    Ok(None)
                } else {
                    num(k, what).map(Some)
                }
            };
            let step: usize = row[0].trim().parse().map_err(|_| bad("step"))?;
            let id: usize = row[2].trim().parse().map_err(|_| bad("node_id"))?;
            let calibrated = match row[9].trim() {
                "0" => false,
                "1" => true,
                _ => return Err(bad("calibrated flag")),
            };
            let rotation = opt(8, "rotation_error_rad")?.unwrap_or(f64::NAN);
            if records.last().is_none_or(|r| r.step != step) {
                records.push(TraceRecord {
                    step,
                    anchor_errors: Vec::new(),
                    tag_errors: Vec::new(),
                    rotation_error: rotation,
                    calibrated,
                    true_anchor_pos: Vec::new(),
                    est_anchor_pos: Vec::new(),
                    true_tag_pos: Vec::new(),
                    est_tag_pos: Vec::new(),
                    diagnostics: Vec::new(),
                });
            }
            let rec = records.last_mut().expect("record pushed");
            let truth = Point2::new(num(3, "true_x")?, num(4, "true_y")?);
            match row[1].trim() {
                "anchor" => {
                    if id != rec.anchor_errors.len() {
                        return Err(bad("anchor order"));
                    }
                    rec.true_anchor_pos.push(truth);
                    rec.est_anchor_pos.push(Point2::new(num(5, "est_x")?, num(6, "est_y")?));
                    rec.anchor_errors.push(num(7, "error_m")?);
                }
                "tag" => {
                    if id != rec.tag_errors.len() {
                        return Err(bad("tag order"));
                    }
                    rec.true_tag_pos.push(truth);
                    let est = match (opt(5, "est_x")?, opt(6, "est_y")?) {
                        (Some(x), Some(y)) => Some(Point2::new(x, y)),
                        _ => None,
                    };
                    rec.est_tag_pos.push(est);
                    rec.tag_errors.push(opt(7, "error_m")?);
                }
                _ => return Err(bad("node_kind")),
            }
        }
        if records.is_empty() {
            return Err(Error::EmptyTrace);
        }
        Ok(Self { records })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file =
            std::fs::File::open(path).map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Five-number summary, linear interpolation between order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub count: usize,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(Self {
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
            count: v.len(),
        })
    }

    fn rounded(self) -> Self {
        Self {
            min: round_sig(self.min),
            q1: round_sig(self.q1),
            median: round_sig(self.median),
            q3: round_sig(self.q3),
            max: round_sig(self.max),
            count: self.count,
        }
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean anchor error just before and just after a calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationEvent {
    pub step: usize,
    pub pre_mean_error_m: f64,
    pub post_mean_error_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryStats {
    pub n_steps: usize,
    /// Anchors 1..N−1 pooled over all steps.
    pub anchor_error_m: Quartiles,
    pub tag_error_m: Option<Quartiles>,
    pub rotation_error_rad: Option<Quartiles>,
    pub missing_tag_fixes: usize,
    pub calibrations: Vec<CalibrationEvent>,
}

impl SummaryStats {
    pub fn to_json(&self) -> String {
        let mut rounded = self.clone();
        rounded.anchor_error_m = rounded.anchor_error_m.rounded();
        rounded.tag_error_m = rounded.tag_error_m.map(Quartiles::rounded);
        rounded.rotation_error_rad = rounded.rotation_error_rad.map(Quartiles::rounded);
        for c in &mut rounded.calibrations {
            c.pre_mean_error_m = round_sig(c.pre_mean_error_m);
            c.post_mean_error_m = round_sig(c.post_mean_error_m);
        }
        serde_json::to_string_pretty(&rounded).expect("summary serializes")
    }
}

/// Mean error over anchors `1..N−1`; Anchor 0 is zero by construction.
fn mean_non_origin(errors: &[f64]) -> f64 {
    let rest = &errors[1.min(errors.len())..];
    if rest.is_empty() {
        0.0
    } else {
        rest.iter().sum::<f64>() / rest.len() as f64
    }
}

pub fn summarize(trace: &SimulationTrace) -> Result<SummaryStats> {
    let recs = &trace.records;
    if recs.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let anchors: Vec<f64> = recs.iter().flat_map(|r| r.anchor_errors.iter().skip(1).copied()).collect();
    let tags: Vec<Option<f64>> = recs.iter().flat_map(|r| r.tag_errors.iter().copied()).collect();
    let tag_values: Vec<f64> = tags.iter().flatten().copied().collect();
    let rotations: Vec<f64> = recs.iter().map(|r| r.rotation_error).collect();
    let anchor_error_m = Quartiles::of(&anchors)
        .or_else(|| Quartiles::of(&recs.iter().flat_map(|r| r.anchor_errors.iter().copied()).collect::<Vec<_>>()))
        .ok_or(Error::EmptyTrace)?;
    let calibrations = recs
        .windows(2)
        .filter(|w| w[1].calibrated)
        .map(|w| CalibrationEvent {
            step: w[1].step,
            pre_mean_error_m: mean_non_origin(&w[0].anchor_errors),
            post_mean_error_m: mean_non_origin(&w[1].anchor_errors),
        })
        .collect();
    Ok(SummaryStats {
        n_steps: recs.len(),
        anchor_error_m,
        tag_error_m: Quartiles::of(&tag_values),
        rotation_error_rad: Quartiles::of(&rotations),
        missing_tag_fixes: tags.iter().filter(|t| t.is_none()).count(),
        calibrations,
    })
}
