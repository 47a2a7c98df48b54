mod common;

use proptest::prelude::*;
use puzzle_nas::cost::KvPrecision;
use puzzle_nas::error::Error;
use puzzle_nas::metrics::{
    accuracy_retention, compute_frontier, effort_length_ratio, emit_frontier, read_frontier_csv,
    read_records_jsonl, relative_request_rate, write_frontier_csv, Effort, FrontierPoint, RunRecord,
    FRONTIER_CSV, FRONTIER_JSON,
};

fn record(model: &str, tp: f64, tok: f64) -> RunRecord {
    RunRecord {
        model_id: model.into(),
        kv_precision: KvPrecision::Bf16,
        effort: Effort::High,
        max_throughput: tp,
        avg_tokens_per_request: tok,
        suite_avg_accuracy: 50.0,
        suite_id: "s".into(),
        per_benchmark: Default::default(),
    }
}

fn fixture_records() -> Vec<RunRecord> {
    read_records_jsonl(common::fixture("frontier_64k_node.jsonl")).unwrap()
}

#[test]
fn published_pair_reproduces_within_tolerance() {
    let r = relative_request_rate(&record("p", 6.5, 13.87), &record("b", 4.0, 12.70)).unwrap();
    assert!((r - 1.490).abs() <= 0.01, "{r}");
}

#[test]
fn doubled_throughput_and_length_cancel() {
    let r = relative_request_rate(&record("p", 8.0, 25.4), &record("b", 4.0, 12.7)).unwrap();
    assert_eq!(r, 1.0);
}

#[test]
fn effort_ratios_and_retention() {
    assert!((effort_length_ratio(13.05, 1.35).unwrap() - 9.67).abs() < 0.005);
    assert!((effort_length_ratio(14.28, 1.73).unwrap() - 8.25).abs() < 0.005);
    assert!((accuracy_retention(58.67, 58.19).unwrap() - 100.8).abs() < 0.05);
    assert!((accuracy_retention(48.38, 44.71).unwrap() - 108.2).abs() < 0.05);
    assert_eq!(accuracy_retention(50.0, 50.0).unwrap(), 100.0);
    assert!(effort_length_ratio(1.0, 0.0).is_err());
    assert!(accuracy_retention(1.0, 0.0).is_err());
}

#[test]
fn nonpositive_inputs_are_rejected() {
    assert!(matches!(relative_request_rate(&record("p", 0.0, 1.0), &record("b", 1.0, 1.0)), Err(Error::NonPositive(_))));
    assert!(relative_request_rate(&record("p", 1.0, -1.0), &record("b", 1.0, 1.0)).is_err());
}

proptest! {
    #[test]
    fn rates_are_scale_invariant(tp in 0.1f64..100.0, tok in 0.1f64..100.0, btp in 0.1f64..100.0, btok in 0.1f64..100.0, k in 1u32..8) {
        // Power-of-two factors keep the comparison exact.
        let c = 2f64.powi(k as i32);
        let a = relative_request_rate(&record("p", tp, tok), &record("b", btp, btok)).unwrap();
        let b = relative_request_rate(&record("p", tp * c, tok), &record("b", btp * c, btok)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn rates_are_reciprocal(tp in 0.1f64..100.0, tok in 0.1f64..100.0, btp in 0.1f64..100.0, btok in 0.1f64..100.0) {
        let (r, b) = (record("p", tp, tok), record("b", btp, btok));
        let prod = relative_request_rate(&r, &b).unwrap() * relative_request_rate(&b, &r).unwrap();
        prop_assert!((prod - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rates_are_monotone(tp in 0.1f64..100.0, tok in 0.1f64..100.0, d in 0.01f64..10.0) {
        let b = record("b", 3.0, 7.0);
        let base = relative_request_rate(&record("p", tp, tok), &b).unwrap();
        prop_assert!(relative_request_rate(&record("p", tp + d, tok), &b).unwrap() > base);
        prop_assert!(relative_request_rate(&record("p", tp, tok + d), &b).unwrap() < base);
    }

    #[test]
    fn frontier_csv_round_trips(rows in prop::collection::vec((0usize..3, 0.001f64..100.0, 0.0f64..100.0), 1..20)) {
        let efforts = [Effort::High, Effort::Medium, Effort::Low];
        let points: Vec<FrontierPoint> = rows
            .iter()
            .enumerate()
            .map(|(i, &(e, rate, acc))| FrontierPoint {
                model: format!("m{i}"),
                kv_precision: if i % 2 == 0 { KvPrecision::Bf16 } else { KvPrecision::Fp8 },
                effort: efforts[e],
                relative_request_rate: rate,
                avg_accuracy: acc,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(FRONTIER_CSV);
        write_frontier_csv(&path, &points).unwrap();
        prop_assert_eq!(read_frontier_csv(&path).unwrap(), points);
    }
}

#[test]
fn single_record_is_its_own_baseline() {
    let r = record("only", 3.0, 9.0);
    let (points, json) = compute_frontier(std::slice::from_ref(&r), &r.key()).unwrap();
    assert_eq!(points.len(), 1);
    assert_eq!(points[0].relative_request_rate, 1.0);
    assert!(!json.mixed_suites);
}

#[test]
fn missing_baseline_is_an_error() {
    assert!(matches!(
        compute_frontier(&fixture_records(), "nobody/bf16/high"),
        Err(Error::MissingBaseline(_))
    ));
}

#[test]
fn permuted_records_emit_identical_files() {
    let records = fixture_records();
    let mut shuffled = records.clone();
    shuffled.reverse();
    shuffled.swap(0, 7);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_frontier(&records, "gpt-oss-120B/bf16/high", a.path()).unwrap();
    emit_frontier(&shuffled, "gpt-oss-120B/bf16/high", b.path()).unwrap();
    for f in [FRONTIER_CSV, FRONTIER_JSON] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn fixture_suites_are_tagged_not_merged() {
    let (_, json) = compute_frontier(&fixture_records(), "gpt-oss-120B/bf16/high").unwrap();
    assert!(json.mixed_suites);
    assert_eq!(json.suites.len(), 2);
    for p in &json.points {
        let want = if p.point.kv_precision == KvPrecision::Fp8 { "seven-benchmark" } else { "eight-benchmark" };
        assert_eq!(p.suite_id, want);
    }
}

#[test]
fn fixture_high_effort_rows_match_published_rates() {
    let (points, _) = compute_frontier(&fixture_records(), "gpt-oss-120B/bf16/high").unwrap();
    let expected = common::expected_rates();
    let high: Vec<_> = expected.iter().filter(|e| e.2 == "high").collect();
    assert_eq!(high.len(), 5);
    for (model, prec, effort, want) in high {
        let p = points
            .iter()
            .find(|p| &p.model == model && p.kv_precision.to_string() == *prec && p.effort.to_string() == *effort)
            .unwrap();
        assert!((p.relative_request_rate - want).abs() <= 0.015, "{model} {prec}: {} vs {want}", p.relative_request_rate);
    }
}
