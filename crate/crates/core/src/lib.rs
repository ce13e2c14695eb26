//! Autocalibration of mobile UWB anchors from inter-anchor ranging, tag
//! multilateration, and a deterministic simulator of a moving deployment.
//!
//! The pipeline mirrors a DWM1001 deployment:
//!
//! - [`ranging`] turns two-way-ranging timings into distances and models the
//!   radios' linear range bias.
//! - [`protocol`] runs the token-passing calibration round in which every
//!   anchor ranges to every other and broadcasts the statistics.
//! - [`autocalib`] turns those statistics into anchor positions.
//! - [`multilateration`] locates tags against the estimated anchors.
//! - [`sim`] drives moving anchors and tags with odometry drift and periodic
//!   recalibration, and scores the result.

pub mod autocalib;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod lsq;
pub mod multilateration;
pub mod protocol;
pub mod ranging;
pub mod sim;

pub use autocalib::{calibrate, CalibrationResult, DistanceStatsMatrix, PairStats};
pub use error::{Error, Result};
pub use geometry::{AnchorId, Point2};
pub use multilateration::{locate_tag, TagFix};
pub use ranging::{RangingModel, RangingSample};

/// Significant digits written to every output file.
pub const OUTPUT_DIGITS: usize = 9;

/// Formats `x` with [`OUTPUT_DIGITS`] significant digits, `%g` style.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", OUTPUT_DIGITS - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..OUTPUT_DIGITS as i32).contains(&exp) {
        let decimals = (OUTPUT_DIGITS as i32 - 1 - exp).max(0) as usize;
        trim_fraction(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_fraction(mantissa.to_string()))
    }
}

fn trim_fraction(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Rounds `x` to [`OUTPUT_DIGITS`] significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    fmt_sig(x).parse().expect("fmt_sig output parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formats_like_percent_g() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(9.0), "9");
        assert_eq!(fmt_sig(-0.5), "-0.5");
        assert_eq!(fmt_sig(10.447_445_610_512_6), "10.4474456");
        assert_eq!(fmt_sig(9.999_999_999_9), "10");
        assert_eq!(fmt_sig(1.234_567_891_23e-7), "1.23456789e-7");
        assert_eq!(fmt_sig(123_456_789_012.0), "1.23456789e11");
        assert_eq!(fmt_sig(0.000_123_456_789_12), "0.000123456789");
    }

    proptest! {
        #[test]
        fn nine_digits_survive_a_round_trip(x in -1e6f64..1e6) {
            let y = round_sig(x);
            prop_assert!((x - y).abs() <= 5e-9 * x.abs().max(1e-300));
            prop_assert_eq!(round_sig(y), y);
        }
    }
}
