mod common;

use std::sync::Arc;

use proptest::prelude::*;

use citykit::estimator::{train, Algorithm, Estimator, Profile, Sample, SeriesKey, TrainingConfig};
use citykit::{Clock, SimClock};

#[test]
fn hundred_ridge_problems() {
    for seed in 0..100 {
        common::ridge_case(seed).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ridge_residual_bound(seed in 100u64..u64::MAX) {
        common::ridge_case(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn ar_recovery_from_any_start(y0 in -500.0f64..500.0, n in prop::sample::select(vec![20usize, 45, 500, 2000])) {
        prop_assume!((y0 - 6.0).abs() > 1.0);
        let (c, phi) = common::ar_fit(y0, n).map_err(TestCaseError::fail)?;
        prop_assert!((c - 3.0).abs() <= 1e-8, "intercept {}", c);
        prop_assert!((phi - 0.5).abs() <= 1e-8, "coefficient {}", phi);
    }

    #[test]
    fn gate_is_exact(min in 20usize..300) {
        let cfg = TrainingConfig {
            min_samples: min,
            ..TrainingConfig::default()
        };
        let series: Vec<Sample> = (0..min)
            .map(|i| Sample { t: i as i64 * 900, value: 40.0 + ((i * 7919) % 13) as f64 })
            .collect();
        let key = SeriesKey::new("p", "v");
        prop_assert!(train(&key, &series[..min - 1], min - 1, &cfg, 0).unwrap().is_none());
        prop_assert!(train(&key, &series, min, &cfg, 0).unwrap().is_some());
    }

    /// Over any simulated span both jobs fire at every period boundary in
    /// [start, start + span).
    #[test]
    fn schedule_counts_follow_periods(hours in 1i64..72) {
        let clock = SimClock::new(1_780_000_000);
        let est = Estimator::new(TrainingConfig::default(), Profile::parking(), Arc::new(clock.clone())).unwrap();
        let key = est.key("p1");
        est.store().append_many(&key, (0..1000).map(|i| Sample {
            t: clock.now() - (1000 - i) * 900,
            value: 50.0 + ((i * 31) % 17) as f64,
        }));
        est.start_schedule(clock.now());
        let span = hours * 3600;
        est.run_for(span, |t| clock.set(t));
        let s = est.series_stats(&key);
        let ceil = |a: i64, b: i64| ((a + b - 1) / b) as u64;
        prop_assert_eq!(s.train_invocations, ceil(span, 86_400));
        prop_assert_eq!(s.inferences, ceil(span, 900));
    }
}

#[test]
fn default_gate_and_day_counts() {
    let o = common::estimator_defaults();
    assert!(o.passed, "{}", o.detail);
}

#[test]
fn seasonal_naive_needs_a_period_of_context() {
    let cfg = TrainingConfig {
        algorithm: Algorithm::SeasonalNaive { period: 96 },
        min_samples: 100,
        ..TrainingConfig::default()
    };
    let s: Vec<Sample> = (0..100).map(|i| Sample { t: i * 900, value: i as f64 }).collect();
    assert!(train(&SeriesKey::new("p", "v"), &s, s.len(), &cfg, 0).is_err());
}
