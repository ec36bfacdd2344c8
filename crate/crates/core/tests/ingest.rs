use chrono::{Duration, NaiveDate};
use proptest::prelude::*;
use tripgrid::ingest::*;

fn row(i: usize, mode: &str, year: i32, minutes: f64, km: f64, origin: &str) -> RawTripRow {
    let start = NaiveDate::from_ymd_opt(year, 6, 1).unwrap().and_hms_opt(8, 0, 0).unwrap();
    RawTripRow {
        row_index: i,
        device_id: format!("d{i}"),
        vehicle_type: mode.into(),
        start_time: start,
        end_time: start + Duration::milliseconds((minutes * 60_000.0) as i64),
        duration: minutes,
        distance: km,
        origin_geoid: origin.into(),
        dest_geoid: "48453000100".into(),
        extra: Vec::new(),
    }
}

fn arb_row() -> impl Strategy<Value = (String, i32, f64, f64, bool)> {
    (
        prop::sample::select(vec!["scooter", "bicycle", "moped"]),
        2018..2021i32,
        0.0f64..150.0,
        0.0f64..45.0,
        prop::bool::weighted(0.95),
    )
        .prop_map(|(m, y, d, k, ok)| (m.to_string(), y, d, k, ok))
}

fn rows_from(spec: &[(String, i32, f64, f64, bool)]) -> Vec<RawTripRow> {
    spec.iter()
        .enumerate()
        .map(|(i, (m, y, d, k, ok))| row(i, m, *y, *d, *k, if *ok { "48453000100" } else { "" }))
        .collect()
}

proptest! {
    #[test]
    fn kept_plus_rejected_is_total(spec in prop::collection::vec(arb_row(), 0..200)) {
        let rows = rows_from(&spec);
        let (kept, report) = filter_trips(&rows, &FilterConfig::default());
        prop_assert_eq!(kept.len(), report.kept);
        prop_assert_eq!(report.kept + report.total_rejected(), rows.len());
        prop_assert_eq!(report.input_rows, rows.len());
    }

    #[test]
    fn filtering_is_idempotent(spec in prop::collection::vec(arb_row(), 0..200)) {
        let cfg = FilterConfig::default();
        let (kept, _) = filter_trips(&rows_from(&spec), &cfg);
        let again: Vec<RawTripRow> = kept.iter().map(TripRecord::to_raw).collect();
        let (kept2, report2) = filter_trips(&again, &cfg);
        prop_assert_eq!(kept2.len(), kept.len());
        prop_assert_eq!(report2.total_rejected(), 0);
    }

    #[test]
    fn report_is_order_independent(spec in prop::collection::vec(arb_row(), 1..120), seed in any::<u64>()) {
        let cfg = FilterConfig::default();
        let rows = rows_from(&spec);
        let mut shuffled = rows.clone();
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (_, a) = filter_trips(&rows, &cfg);
        let (_, b) = filter_trips(&shuffled, &cfg);
        for reason in RejectReason::ALL {
            prop_assert_eq!(a.rejected(reason), b.rejected(reason));
        }
        prop_assert_eq!(a.kept, b.kept);
    }

    #[test]
    fn kept_records_satisfy_bounds(spec in prop::collection::vec(arb_row(), 0..200)) {
        let cfg = FilterConfig::default();
        let (kept, _) = filter_trips(&rows_from(&spec), &cfg);
        for r in &kept {
            prop_assert_eq!(r.vehicle_type.as_str(), "scooter");
            prop_assert!(cfg.duration_bounds.contains(r.duration));
            prop_assert!(cfg.distance_bounds.contains(r.distance));
            prop_assert!(cfg.speed_bounds.contains(r.speed));
            prop_assert!((r.speed - r.distance / (r.duration / 60.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_partitions_match_sequential(spec in prop::collection::vec(arb_row(), 0..300), chunk in 1usize..64) {
        let cfg = FilterConfig::default();
        let rows = rows_from(&spec);
        let (k1, r1) = filter_trips(&rows, &cfg);
        let (k2, r2) = filter_trips_parallel(&rows, &cfg, chunk);
        prop_assert_eq!(k1, k2);
        prop_assert_eq!(r1, r2);
    }
}

#[test]
fn csv_round_trip_through_parser() {
    let rows = rows_from(&[
        ("scooter".into(), 2019, 10.0, 2.0, true),
        ("scooter".into(), 2019, 0.5, 2.0, true),
        ("bicycle".into(), 2019, 10.0, 2.0, true),
    ]);
    let (kept, _) = filter_trips(&rows, &FilterConfig::default());
    let mut buf = Vec::new();
    write_trips_csv(&kept, &[], &mut buf).unwrap();
    let parsed = parse_trips(buf.as_slice(), &TripSchema::default()).unwrap();
    assert!(parsed.errors.is_empty());
    assert_eq!(parsed.rows.len(), 1);
    let (again, report) = filter_trips(&parsed.rows, &FilterConfig::default());
    assert_eq!(report.kept, 1);
    assert_eq!(again[0].duration, 10.0);
}
