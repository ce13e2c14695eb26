use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uwb_autocalib::autocalib::DistanceStatsMatrix;
use uwb_autocalib::geometry::{distance, Point2};
use uwb_autocalib::protocol::run_calibration_round;
use uwb_autocalib::ranging::{correct_measurement, fit_model, simulate_measurement, RangingModel, RangingSample};
use uwb_autocalib::{calibrate, locate_tag};

fn frame() -> Vec<Point2> {
    [(0.0, 0.0), (9.0, 0.0), (16.0, 3.0), (13.0, 17.0), (2.0, 19.0)]
        .iter()
        .map(|&(x, y)| Point2::new(x, y))
        .collect()
}

#[test]
fn noiseless_round_to_tag_fix() {
    let truth = frame();
    let model = RangingModel::dwm1001().with_noise(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (stats, latency) = run_calibration_round(truth.len(), 5, &truth, &model, &mut rng).unwrap();
    assert_eq!(latency, 0.9);

    let result = calibrate(&stats, &model, None).unwrap();
    for (p, q) in result.positions.iter().zip(&truth) {
        assert!(distance(*p, *q) < 1e-6, "{p:?} vs {q:?}");
    }

    let tag = Point2::new(7.0, 8.0);
    let ranges: Vec<f64> = truth
        .iter()
        .map(|&a| correct_measurement(model.predict(distance(a, tag)), &model))
        .collect();
    let fix = locate_tag(&result.positions, &ranges, None).unwrap();
    assert!(distance(fix.position, tag) < 1e-6);
}

#[test]
fn fitted_model_corrects_noisy_round() {
    // Fit a model from simulated ranges, then calibrate with it.
    let model = RangingModel::dwm1001();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples: Vec<RangingSample> = (0..400)
        .map(|i| {
            let d = 0.5 + 21.5 * (i as f64) / 399.0;
            RangingSample::new(d, simulate_measurement(d, &model, &mut rng)).unwrap()
        })
        .collect();
    let fitted = fit_model(&samples).unwrap();
    assert!((fitted.slope - model.slope).abs() < 0.01);

    let truth = frame();
    let (stats, _) = run_calibration_round(truth.len(), 50, &truth, &model, &mut rng).unwrap();
    let result = calibrate(&stats, &fitted, None).unwrap();
    let worst = result.positions.iter().zip(&truth).map(|(p, q)| distance(*p, *q)).fold(0.0, f64::max);
    assert!(worst < 0.15, "worst anchor error {worst}");
}

#[test]
fn stats_csv_round_trip_calibrates_identically() {
    let truth = frame();
    let d = DistanceStatsMatrix::from_positions(&truth).unwrap();
    let mut buf = Vec::new();
    d.write_csv(&mut buf).unwrap();
    let back = DistanceStatsMatrix::read_csv(buf.as_slice()).unwrap();
    let a = calibrate(&d, &RangingModel::identity(), None).unwrap();
    let b = calibrate(&back, &RangingModel::identity(), None).unwrap();
    for (p, q) in a.positions.iter().zip(&b.positions) {
        assert!(distance(*p, *q) < 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rigid_motion_leaves_calibration_unchanged(
        angle in -3.1f64..3.1, tx in -50.0f64..50.0, ty in -50.0f64..50.0,
    ) {
        let truth = frame();
        let (s, c) = angle.sin_cos();
        let moved: Vec<Point2> = truth
            .iter()
            .map(|p| Point2::new(c * p.x - s * p.y + tx, s * p.x + c * p.y + ty))
            .collect();
        let d = DistanceStatsMatrix::from_positions(&moved).unwrap();
        let result = calibrate(&d, &RangingModel::identity(), None).unwrap();
        for (p, q) in result.positions.iter().zip(&truth) {
            prop_assert!(distance(*p, *q) < 1e-6);
        }
    }
}
