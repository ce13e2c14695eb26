//! Two-way-ranging distance computation and the linear bias model of the
//! DWM1001 range measurements.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light, m/s. The refractive index of air is ignored.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Line-of-sight measurements from 0.5 m to 22 m on a DWM1001 pair, with the
/// responder delay already removed. `(true_m, measured_m)`.
pub const DWM1001_LOS_SAMPLES: [(f64, f64); 39] = [
    (0.5, 0.78),
    (0.6, 0.86),
    (0.7, 1.09),
    (0.8, 1.06),
    (0.9, 1.2),
    (1.0, 1.35),
    (1.2, 1.58),
    (1.4, 1.82),
    (1.6, 1.91),
    (1.8, 2.1),
    (2.0, 2.34),
    (2.4, 2.76),
    (2.8, 3.18),
    (3.2, 3.63),
    (3.6, 4.02),
    (4.0, 4.45),
    (4.8, 5.3),
    (5.2, 5.68),
    (5.6, 6.08),
    (6.0, 6.47),
    (6.4, 6.78),
    (6.8, 7.26),
    (7.2, 7.67),
    (7.6, 8.12),
    (8.0, 8.44),
    (9.0, 9.53),
    (10.0, 10.43),
    (11.0, 11.47),
    (12.0, 12.44),
    (13.0, 13.49),
    (14.0, 14.55),
    (15.0, 15.53),
    (16.0, 16.53),
    (17.0, 17.48),
    (18.0, 18.5),
    (19.0, 19.42),
    (20.0, 20.48),
    (21.0, 21.47),
    (22.0, 22.55),
];

/// Round-trip and reply intervals of a two-way ranging exchange, seconds.
///
/// Single-sided exchanges use only `t_round`/`t_reply`; double-sided
/// exchanges also carry the responder-side round and initiator-side reply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwrTimings {
    pub t_round: f64,
    pub t_reply: f64,
    pub t_round2: Option<f64>,
    pub t_reply2: Option<f64>,
}

impl TwrTimings {
    pub fn single(t_round: f64, t_reply: f64) -> Self {
        Self {
            t_round,
            t_reply,
            t_round2: None,
            t_reply2: None,
        }
    }

    pub fn double(t_round: f64, t_reply: f64, t_round2: f64, t_reply2: f64) -> Self {
        Self {
            t_round,
            t_reply,
            t_round2: Some(t_round2),
            t_reply2: Some(t_reply2),
        }
    }

    /// Timings a responder with processing delay `t_reply` would produce for
    /// a single-sided exchange over `distance` meters.
    pub fn for_distance(distance: f64, t_reply: f64) -> Self {
        Self::single(t_reply + 2.0 * distance / SPEED_OF_LIGHT, t_reply)
    }
}

fn check_pair(t_round: f64, t_reply: f64) -> Result<()> {
    if !t_round.is_finite() || !t_reply.is_finite() {
        return Err(Error::InvalidTiming("non-finite timestamp interval".into()));
    }
    if t_reply < 0.0 {
        return Err(Error::InvalidTiming(format!("negative reply delay {t_reply} s")));
    }
    if t_round < t_reply {
        return Err(Error::InvalidTiming(format!(
            "round time {t_round} s is shorter than reply delay {t_reply} s"
        )));
    }
    Ok(())
}

/// Single-sided TWR distance `c·(t_round − t_reply)/2`.
///
/// Equal round and reply times give zero flight time and a zero distance;
/// a round time shorter than the reply delay is rejected.
pub fn ss_twr_distance(t: &TwrTimings) -> Result<f64> {
    check_pair(t.t_round, t.t_reply)?;
    Ok(SPEED_OF_LIGHT * (t.t_round - t.t_reply) / 2.0)
}

/// Asymmetric double-sided TWR distance
/// `c·(Tround1·Tround2 − Treply1·Treply2)/(Tround1 + Tround2 + Treply1 + Treply2)`.
pub fn ds_twr_distance(t: &TwrTimings) -> Result<f64> {
    let (Some(t_round2), Some(t_reply2)) = (t.t_round2, t.t_reply2) else {
        return Err(Error::InvalidTiming("double-sided timings need t_round2 and t_reply2".into()));
    };
    check_pair(t.t_round, t.t_reply)?;
    check_pair(t_round2, t_reply2)?;
    let denom = t.t_round + t_round2 + t.t_reply + t_reply2;
    if !(denom > 0.0) {
        return Err(Error::InvalidTiming("non-positive DS-TWR denominator".into()));
    }
    // Ra·Rb − Da·Db regrouped as (Ra − Da)·Rb + Da·(Rb − Db): both terms are
    // non-negative and the differences are exact when flight time ≪ reply delay.
    let numer = (t.t_round - t.t_reply) * t_round2 + t.t_reply * (t_round2 - t_reply2);
    Ok(SPEED_OF_LIGHT * numer / denom)
}

/// One calibration point: a surveyed distance and what the radios reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangingSample {
    pub true_distance: f64,
    pub measured_distance: f64,
}

impl RangingSample {
    pub fn new(true_distance: f64, measured_distance: f64) -> Result<Self> {
        if !(true_distance > 0.0 && measured_distance > 0.0)
            || !true_distance.is_finite()
            || !measured_distance.is_finite()
        {
            return Err(Error::InvalidValue(format!(
                "ranging sample distances must be positive, got ({true_distance}, {measured_distance})"
            )));
        }
        Ok(Self {
            true_distance,
            measured_distance,
        })
    }
}

/// The embedded DWM1001 line-of-sight samples.
pub fn dwm1001_samples() -> Vec<RangingSample> {
    DWM1001_LOS_SAMPLES
        .iter()
        .map(|&(t, m)| RangingSample {
            true_distance: t,
            measured_distance: m,
        })
        .collect()
}

/// Linear ranging bias `measured = slope·true + intercept` plus homoscedastic
/// Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangingModel {
    pub slope: f64,
    #[serde(rename = "intercept_m")]
    pub intercept: f64,
    #[serde(rename = "noise_std_m")]
    pub noise_std: f64,
    pub n_samples: usize,
}

impl RangingModel {
    /// Unbiased, noise-free ranging.
    pub fn identity() -> Self {
        Self {
            slope: 1.0,
            intercept: 0.0,
            noise_std: 0.0,
            n_samples: 2,
        }
    }

    /// The model fitted to [`DWM1001_LOS_SAMPLES`].
    pub fn dwm1001() -> Self {
        fit_model(&dwm1001_samples()).expect("embedded samples are well conditioned")
    }

    pub fn with_noise(self, noise_std: f64) -> Self {
        Self { noise_std, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.slope > 0.0) || !self.slope.is_finite() {
            problems.push(format!("ranging.slope must be positive, got {}", self.slope));
        }
        if !self.intercept.is_finite() {
            problems.push("ranging.intercept_m must be finite".to_string());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            problems.push(format!("ranging.noise_std_m must be non-negative, got {}", self.noise_std));
        }
        if self.n_samples < 2 {
            problems.push(format!("ranging.n_samples must be at least 2, got {}", self.n_samples));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    pub fn predict(&self, true_distance: f64) -> f64 {
        self.slope * true_distance + self.intercept
    }
}

/// Ordinary least-squares line through the samples. `noise_std` is the
/// residual standard deviation with `n − 2` degrees of freedom.
pub fn fit_model(samples: &[RangingSample]) -> Result<RangingModel> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "a line fit needs at least 2 samples, got {n}"
        )));
    }
    let nf = n as f64;
    let mean_x = samples.iter().map(|s| s.true_distance).sum::<f64>() / nf;
    let mean_y = samples.iter().map(|s| s.measured_distance).sum::<f64>() / nf;
    let (sxx, sxy) = samples.iter().fold((0.0, 0.0), |(sxx, sxy), s| {
        let dx = s.true_distance - mean_x;
        (sxx + dx * dx, sxy + dx * (s.measured_distance - mean_y))
    });
    let spread = samples
        .iter()
        .map(|s| (s.true_distance - mean_x).abs())
        .fold(0.0, f64::max);
    if sxx == 0.0 || spread <= f64::EPSILON * mean_x.abs() {
        return Err(Error::DegenerateFit("all true distances are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let noise_std = if n > 2 {
        let sse: f64 = samples
            .iter()
            .map(|s| {
                let r = s.measured_distance - (slope * s.true_distance + intercept);
                r * r
            })
            .sum();
        (sse / (nf - 2.0)).sqrt()
    } else {
        0.0
    };
    if !(slope > 0.0) {
        return Err(Error::DegenerateFit(format!("fitted slope {slope} is not positive")));
    }
    Ok(RangingModel {
        slope,
        intercept,
        noise_std,
        n_samples: n,
    })
}

/// Draws one biased, noisy range for a true distance. Exactly one normal draw
/// is consumed from `rng` per call, even when the model is noise-free.
pub fn simulate_measurement<R: Rng + ?Sized>(true_d: f64, model: &RangingModel, rng: &mut R) -> f64 {
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    model.predict(true_d) + model.noise_std * z
}

/// Inverts the bias line.
pub fn correct_measurement(measured_d: f64, model: &RangingModel) -> f64 {
    (measured_d - model.intercept) / model.slope
}

/// Reads `true_m,measured_m` rows. Errors carry the 1-based file line.
pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<RangingSample>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::InvalidValue(format!("line 1: {e}")))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["true_m", "measured_m"] {
        return Err(Error::InvalidValue(format!(
            "line 1: expected header `true_m,measured_m`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::InvalidValue(format!("line {line}: {e}"))
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> Result<f64> {
            record
                .get(i)
                .ok_or_else(|| Error::InvalidValue(format!("line {line}: missing column {}", i + 1)))?
                .parse::<f64>()
                .map_err(|e| Error::InvalidValue(format!("line {line}: {e}")))
        };
        let sample = RangingSample::new(field(0)?, field(1)?)
            .map_err(|e| Error::InvalidValue(format!("line {line}: {e}")))?;
        out.push(sample);
    }
    Ok(out)
}

pub fn load_samples_csv(path: &Path) -> Result<Vec<RangingSample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))?;
    read_samples_csv(file)
}
