use proptest::prelude::*;

use tems::calibration::*;
use tems::closed_loop::*;
use tems::controllers::{make_baseline, tighten_interval, AncillaryConfig, SchemeKind, SchemeOptions};
use tems::model::{benchmark_reactor, Benchmark, Interval};
use tems::nlp::SqpSettings;

/// Bounds of the eight-state polymerization reactor: original interval,
/// primary-controller interval.
const BOUND_TABLE: [(&str, (f64, f64), (f64, f64)); 5] = [
    ("T_R", (88.0, 92.0), (88.3, 91.7)),
    ("T_ad", (0.0, 109.0), (1.0, 108.0)),
    ("m_F", (0.0, 30000.0), (0.0, 29990.0)),
    ("T_M_IN", (60.0, 100.0), (61.0, 99.0)),
    ("T_AWT_IN", (60.0, 100.0), (61.0, 99.0)),
];

fn scheme(bench: &Benchmark, kind: SchemeKind) -> Scheme {
    let opts = SchemeOptions {
        horizon: 10,
        robust_horizon: 1,
        include_nominal: true,
        multi_stage_dims: None,
        delta: vec![0.0],
    };
    let anc = AncillaryConfig::new(vec![10.0, 1.0], vec![0.1]);
    Scheme {
        name: kind.name().into(),
        pair: make_baseline(kind, bench, &opts, &anc, &SqpSettings::default()).unwrap(),
        estimator: EstimatorConfig::default(),
    }
}

fn plant(bench: &Benchmark) -> PlantSim {
    PlantSim {
        model: bench.model.clone(),
        uncertainty: bench.uncertainty.clone(),
        parameters: bench.uncertainty.nominal(),
        law: DisturbanceLaw::Uniform,
        max_steps: 60,
        stop: bench.stop,
        x0: bench.x0.clone(),
    }
}

#[test]
fn recorded_violation_reproduces_bound_table_back_off() {
    let (_, orig, tight) = BOUND_TABLE[0];
    let delta = backoff(0.3, 1.0, 1e-9);
    let t = tighten_interval(Interval::new(orig.0, orig.1), (delta, delta)).unwrap();
    assert!((t.lo - tight.0).abs() < 1e-6 && (t.hi - tight.1).abs() < 1e-6);
    for (name, orig, tight) in BOUND_TABLE {
        let d = (tight.0 - orig.0, orig.1 - tight.1);
        let t = tighten_interval(Interval::new(orig.0, orig.1), d).unwrap();
        assert_eq!((t.lo, t.hi), tight, "{name}");
    }
}

#[test]
fn no_violations_give_zero_back_off() {
    let mut b = benchmark_reactor();
    b.uncertainty.params[1].lower = 0.0;
    b.uncertainty.params[1].upper = 0.0;
    let eps = vec![EpisodeSpec {
        index: 0,
        parameters: vec![1.0, 0.0],
        seed: 1,
        law: DisturbanceLaw::Uniform,
    }];
    let r = calibrate_tightening(&scheme(&b, SchemeKind::Tube), &plant(&b), &eps, &CalibrationSettings::default(), 1).unwrap();
    assert_eq!(r.max_violation, vec![0.0]);
    assert_eq!(r.delta, vec![0.0]);
}

#[test]
fn reactor_calibration_round_trip() {
    let b = benchmark_reactor();
    let s = scheme(&b, SchemeKind::Tems);
    let p = plant(&b);
    let batch = calibration_episodes(&b.uncertainty, 3, 11).unwrap();
    let settings = CalibrationSettings::default();

    let single = calibrate_tightening(&s, &p, &batch, &settings, 1).unwrap();
    assert!(single.max_violation[0] > 0.0, "untightened TEMS should violate on the extremes");
    assert!(single.delta[0] >= single.max_violation[0] && single.delta[0] - single.max_violation[0] <= 1e-9);

    let wide = CalibrationSettings {
        safety_factor: 1.5,
        ..settings.clone()
    };
    let r15 = calibrate_tightening(&s, &p, &batch, &wide, 1).unwrap();
    assert_eq!(r15.max_violation, single.max_violation);
    assert!((r15.delta[0] - 1.5 * single.max_violation[0]).abs() <= 1e-9);

    let full = calibrate_iteratively(&s, &p, &batch, &settings, 1).unwrap();
    assert!(full.rounds.len() <= settings.max_rounds);
    assert!(full.rounds.last().unwrap().clean());
    assert!((full.delta[0] - full.max_violation[0]).abs() <= 1e-9);
    let json = serde_json::to_string(&full).unwrap();
    assert_eq!(serde_json::from_str::<TighteningReport>(&json).unwrap(), full);

    // monotone safety on the same seeds
    let with = |d: f64| {
        let mut t = s.clone();
        t.pair.primary.delta = vec![d];
        VerificationReport::from_outcomes(&[d], &run_episodes(&p, &t, &batch, 1, false).unwrap(), 1)
    };
    assert!(full.rounds.last().unwrap().max_violation[0] <= single.max_violation[0]);

    // half the back-off is not enough and the report says so
    let half = with(full.delta[0] / 2.0);
    assert!(half.violating_episodes[0] > 0, "{half:?}");
    assert!(half.max_violation[0] > 0.0);
}

#[test]
fn zero_back_off_rerun_matches_calibration() {
    let b = benchmark_reactor();
    let s = scheme(&b, SchemeKind::Tube);
    let p = plant(&b);
    let grid = GridSpec {
        points: vec![3],
        seeds_per_point: 1,
        law: DisturbanceLaw::Uniform,
    };
    let eps = grid_episodes(&b.uncertainty, &grid, 5).unwrap();
    let cal = calibrate_tightening(&s, &p, &eps, &CalibrationSettings::default(), 1).unwrap();
    let ver = verify_tightening(&s, &p, &grid, &[0.0], 5, 1).unwrap();
    assert_eq!(ver.max_violation, cal.max_violation);
    assert_eq!(ver, cal.rounds[0]);
}

proptest! {
    #[test]
    fn backoff_is_factor_times_violation(v in 0.0f64..1e3, f in 0.0f64..5.0) {
        let p = 1e-9;
        let d = backoff(v, f, p);
        prop_assert!(d >= 0.0);
        prop_assert!(d >= f * v);
        prop_assert!(d - f * v <= p * (1.0 + 1e-6) + f64::EPSILON * f * v * 4.0);
    }
}
