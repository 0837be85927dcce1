//! A 10,000-line log written by a separate trainer, with final metrics
//! precomputed by a naive reference (see fixtures/gen_external_log.py).

use std::path::PathBuf;

use serde_json::Value;
use subopt::log_io::{read_log, LogReader};
use subopt::report::analyze_episodes;
use subopt::{ExperienceTracker, PolicyMode, TrackerConfig};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn expected() -> Value {
    let text = std::fs::read_to_string(fixture("external_log_expected.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

#[test]
fn parses_every_line() {
    let exp = expected();
    let log = read_log(&fixture("external_log.jsonl.gz")).unwrap();
    assert_eq!(log.episodes.len() as u64, exp["n_lines"].as_u64().unwrap());
    let header = log.header.unwrap();
    assert_eq!(
        (header.env_name.as_str(), header.algorithm_name.as_str(), header.seed),
        ("external_grid", "ppo", 7)
    );
    let greedy = log
        .episodes
        .iter()
        .filter(|e| e.policy_mode == PolicyMode::Greedy)
        .count();
    assert_eq!(greedy as u64, exp["n_greedy"].as_u64().unwrap());

    let streamed = LogReader::open(&fixture("external_log.jsonl.gz")).unwrap().count();
    assert_eq!(streamed, 10_000);
}

#[test]
fn tracker_matches_reference_metrics() {
    let exp = expected();
    let log = read_log(&fixture("external_log.jsonl.gz")).unwrap();
    let mut tracker = ExperienceTracker::new(TrackerConfig::default()).unwrap();
    for ep in &log.episodes {
        tracker.record_episode(ep).unwrap();
    }
    let m = tracker.snapshot(0, PolicyMode::Stochastic).unwrap();
    let f = |k: &str| exp[k].as_f64().unwrap();

    assert_eq!(m.v_best_single, f("v_best_single"));
    assert_eq!(
        tracker.best_single().unwrap().episode_id,
        exp["best_single_id"].as_u64().unwrap()
    );
    for (got, key) in [
        (m.v_top5_ever, "v_top5_ever"),
        (m.v_top5_recent, "v_top5_recent"),
        (m.v_learned, "v_learned"),
        (m.v_learned_greedy.unwrap(), "v_learned_greedy"),
        (m.v_initial, "v_initial"),
        (tracker.mean_return().unwrap(), "mean_return"),
    ] {
        assert!(close(got, f(key)), "{key}: {got} vs {}", f(key));
    }
    let ids: Vec<u64> = tracker.top_episodes().map(|e| e.episode_id).collect();
    let want: Vec<u64> = exp["top_ids"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(ids, want);
}

#[test]
fn analysis_ends_on_reference_metrics() {
    let exp = expected();
    let log = read_log(&fixture("external_log.jsonl.gz")).unwrap();
    let metrics = analyze_episodes(&log.episodes, TrackerConfig::default(), 50).unwrap();
    // 196 full cycles of 50 training episodes, then a 4-episode tail.
    assert_eq!(metrics.len(), 197);
    let last = metrics.last().unwrap();
    assert_eq!(last.global_step, exp["final_global_step"].as_u64().unwrap());
    assert!(close(last.v_top5_ever, exp["v_top5_ever"].as_f64().unwrap()));
    assert!(close(last.v_learned, exp["v_learned"].as_f64().unwrap()));
    assert!(metrics.windows(2).all(|w| w[0].global_step < w[1].global_step));
}
