//! Cross-task aggregation of practical sub-optimality.
//!
//! Each run is scored as `(V_expert - V_learned) / (V_expert - V_initial)`:
//! 0 when the learned policy matches the best experience, 1 when it made no
//! progress over the initial policy. Scores are averaged over runs within a
//! task, then over tasks. Confidence intervals come from a stratified
//! percentile bootstrap that resamples runs within each task.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::anchored_mean;

pub const DEFAULT_EPSILON: f64 = 1e-9;
pub const DEFAULT_RESAMPLES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregateError {
    #[error("every task was excluded by the denominator guard: {0:?}")]
    AllTasksInvalid(Vec<String>),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("confidence must lie in (0, 1), got {0}")]
    InvalidConfidence(f64),
}

/// Which experience-optimal estimate stands in for the expert value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ever,
    Recent,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ever" => Ok(Variant::Ever),
            "recent" => Ok(Variant::Recent),
            other => Err(format!("unknown variant `{other}` (expected ever|recent)")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Ever => "ever",
            Variant::Recent => "recent",
        })
    }
}

/// End-of-run values for one (task, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_name: String,
    pub variant: Variant,
    pub v_expert: f64,
    pub v_learned: f64,
    pub v_initial: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalizedGap {
    Value(f64),
    /// Denominator vanished while the numerator did not.
    Invalid,
}

impl NormalizedGap {
    pub fn value(self) -> Option<f64> {
        match self {
            NormalizedGap::Value(v) => Some(v),
            NormalizedGap::Invalid => None,
        }
    }
}

/// Normalized gap of one run. Not clamped: values below 0 mean the learned
/// policy beat the expert estimate, values above 1 mean it fell below the
/// initial policy.
pub fn normalized_gap(t: &TaskResult, epsilon: f64) -> NormalizedGap {
    let numerator = t.v_expert - t.v_learned;
    let denominator = t.v_expert - t.v_initial;
    if denominator.abs() < epsilon {
        if numerator.abs() < epsilon {
            NormalizedGap::Value(0.0)
        } else {
            NormalizedGap::Invalid
        }
    } else {
        NormalizedGap::Value(numerator / denominator)
    }
}

/// Valid per-run gaps grouped by task name, plus the names of tasks left
/// with no valid run.
pub fn task_scores(tasks: &[TaskResult], epsilon: f64) -> (Vec<TaskScores>, Vec<String>) {
    let mut grouped: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for t in tasks {
        let entry = grouped.entry(t.task_name.as_str()).or_default();
        if let NormalizedGap::Value(v) = normalized_gap(t, epsilon) {
            entry.push(v);
        }
    }
    let mut valid = Vec::new();
    let mut invalid = Vec::new();
    for (name, scores) in grouped {
        if scores.is_empty() {
            invalid.push(name.to_string());
        } else {
            valid.push(TaskScores {
                task: name.to_string(),
                scores,
            });
        }
    }
    (valid, invalid)
}

/// Mean over tasks of the mean normalized gap over each task's runs.
pub fn aggregate(tasks: &[TaskResult], epsilon: f64) -> Result<f64, AggregateError> {
    if tasks.is_empty() {
        return Err(AggregateError::EmptyInput("no task results".into()));
    }
    let (valid, invalid) = task_scores(tasks, epsilon);
    if valid.is_empty() {
        return Err(AggregateError::AllTasksInvalid(invalid));
    }
    Ok(mean_of_task_means(&valid))
}

/// Per-run scores of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub task: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub point_estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub confidence: f64,
    pub n_resamples: usize,
    pub n_tasks: usize,
    /// Largest number of runs in any task.
    pub n_seeds: usize,
    pub variant: Variant,
    pub invalid_tasks: Vec<String>,
}

fn plain_mean(values: &[f64]) -> f64 {
    anchored_mean(values[0], values.iter().copied())
}

fn mean_of_task_means(tasks: &[TaskScores]) -> f64 {
    let means: Vec<f64> = tasks.iter().map(|t| plain_mean(&t.scores)).collect();
    plain_mean(&means)
}

/// Stratified percentile bootstrap of the mean-of-task-means.
///
/// Resample `b` draws from its own ChaCha stream (`rng_seed`, stream `b`), so
/// the report does not depend on how resamples are scheduled across threads.
/// The interval is widened to contain the point estimate when the percentile
/// interval alone would miss it.
pub fn bootstrap_ci(
    per_run_scores: &[TaskScores],
    n_resamples: usize,
    confidence: f64,
    rng_seed: u64,
    variant: Variant,
) -> Result<AggregateReport, AggregateError> {
    if per_run_scores.is_empty() {
        return Err(AggregateError::EmptyInput("no tasks".into()));
    }
    if let Some(t) = per_run_scores.iter().find(|t| t.scores.is_empty()) {
        return Err(AggregateError::EmptyInput(format!("task `{}` has no runs", t.task)));
    }
    if n_resamples == 0 {
        return Err(AggregateError::EmptyInput("n_resamples must be positive".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(AggregateError::InvalidConfidence(confidence));
    }

    let point = mean_of_task_means(per_run_scores);
    let mut stats: Vec<f64> = (0..n_resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            rng.set_stream(b as u64);
            let means: Vec<f64> = per_run_scores
                .iter()
                .map(|t| {
                    let n = t.scores.len();
                    let draws: Vec<f64> = (0..n).map(|_| t.scores[rng.random_range(0..n)]).collect();
                    plain_mean(&draws)
                })
                .collect();
            plain_mean(&means)
        })
        .collect();
    stats.sort_by(f64::total_cmp);

    let alpha = 1.0 - confidence;
    let lo = percentile(&stats, alpha / 2.0);
    let hi = percentile(&stats, 1.0 - alpha / 2.0);

    Ok(AggregateReport {
        point_estimate: point,
        ci_low: lo.min(point),
        ci_high: hi.max(point),
        confidence,
        n_resamples,
        n_tasks: per_run_scores.len(),
        n_seeds: per_run_scores.iter().map(|t| t.scores.len()).max().unwrap_or(0),
        variant,
        invalid_tasks: Vec::new(),
    })
}

/// Runs the guard, groups by task, and bootstraps the valid runs.
pub fn aggregate_report(
    tasks: &[TaskResult],
    epsilon: f64,
    n_resamples: usize,
    confidence: f64,
    rng_seed: u64,
) -> Result<AggregateReport, AggregateError> {
    let variant = tasks
        .first()
        .map(|t| t.variant)
        .ok_or_else(|| AggregateError::EmptyInput("no task results".into()))?;
    let (valid, invalid) = task_scores(tasks, epsilon);
    if valid.is_empty() {
        return Err(AggregateError::AllTasksInvalid(invalid));
    }
    let mut report = bootstrap_ci(&valid, n_resamples, confidence, rng_seed, variant)?;
    report.invalid_tasks = invalid;
    Ok(report)
}

/// Linear interpolation between closest ranks of a sorted sample.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn task(name: &str, expert: f64, learned: f64, initial: f64) -> TaskResult {
        TaskResult {
            task_name: name.into(),
            variant: Variant::Ever,
            v_expert: expert,
            v_learned: learned,
            v_initial: initial,
            seed: 0,
        }
    }

    #[test]
    fn gap_examples() {
        let eps = DEFAULT_EPSILON;
        assert_eq!(
            normalized_gap(&task("a", 10.0, 10.0, 0.0), eps),
            NormalizedGap::Value(0.0)
        );
        assert_eq!(
            normalized_gap(&task("a", 10.0, 0.0, 0.0), eps),
            NormalizedGap::Value(1.0)
        );
        assert_eq!(
            normalized_gap(&task("a", 10.0, 5.0, 0.0), eps),
            NormalizedGap::Value(0.5)
        );
        assert_eq!(
            normalized_gap(&task("b", 4.0, 3.0, 2.0), eps),
            NormalizedGap::Value(0.5)
        );
        let both = [task("a", 10.0, 5.0, 0.0), task("b", 4.0, 3.0, 2.0)];
        assert_eq!(aggregate(&both, eps).unwrap(), 0.5);
    }

    #[test]
    fn gap_guard() {
        let eps = DEFAULT_EPSILON;
        assert_eq!(
            normalized_gap(&task("z", 0.0, 0.0, 0.0), eps),
            NormalizedGap::Value(0.0)
        );
        assert_eq!(normalized_gap(&task("z", 1.0, 0.5, 1.0), eps), NormalizedGap::Invalid);
        let r = aggregate(&[task("z", 1.0, 0.5, 1.0)], eps);
        assert_eq!(r, Err(AggregateError::AllTasksInvalid(vec!["z".into()])));
        let mixed = [task("z", 1.0, 0.5, 1.0), task("a", 10.0, 0.0, 0.0)];
        assert_eq!(aggregate(&mixed, eps).unwrap(), 1.0);
        let (_, invalid) = task_scores(&mixed, eps);
        assert_eq!(invalid, vec!["z".to_string()]);
    }

    #[test]
    fn gaps_are_not_clamped() {
        let eps = DEFAULT_EPSILON;
        assert_eq!(
            normalized_gap(&task("a", 10.0, 12.0, 0.0), eps),
            NormalizedGap::Value(-0.2)
        );
        assert_eq!(
            normalized_gap(&task("a", 10.0, -10.0, 0.0), eps),
            NormalizedGap::Value(2.0)
        );
    }

    #[test]
    fn aggregate_small_cases() {
        let eps = DEFAULT_EPSILON;
        assert_eq!(aggregate(&[task("a", 8.0, 6.0, 0.0)], eps).unwrap(), 0.25);
        let gaps01 = [task("a", 1.0, 1.0, 0.0), task("b", 1.0, 0.0, 0.0)];
        assert_eq!(aggregate(&gaps01, eps).unwrap(), 0.5);
        assert!(matches!(aggregate(&[], eps), Err(AggregateError::EmptyInput(_))));
    }

    #[test]
    fn seeds_average_within_task_first() {
        let eps = DEFAULT_EPSILON;
        // task a: seeds score 0 and 1 -> 0.5; task b: single seed 0 -> mean 0.25
        let runs = [
            task("a", 1.0, 1.0, 0.0),
            task("a", 1.0, 0.0, 0.0),
            task("b", 1.0, 1.0, 0.0),
        ];
        assert_eq!(aggregate(&runs, eps).unwrap(), 0.25);
    }

    #[test]
    fn random_tasks_match_straight_line_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tasks: Vec<TaskResult> = (0..5)
            .map(|i| {
                let initial = rng.random_range(-1.0..1.0);
                let expert = initial + rng.random_range(0.5..3.0);
                let learned = rng.random_range(initial..expert);
                task(&format!("t{i}"), expert, learned, initial)
            })
            .collect();
        let mut total = 0.0;
        for t in &tasks {
            total += (t.v_expert - t.v_learned) / (t.v_expert - t.v_initial);
        }
        let oracle = total / tasks.len() as f64;
        assert!((aggregate(&tasks, DEFAULT_EPSILON).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let c = 0.37;
        let scores = vec![
            TaskScores {
                task: "a".into(),
                scores: vec![c; 4],
            },
            TaskScores {
                task: "b".into(),
                scores: vec![c; 3],
            },
        ];
        let r = bootstrap_ci(&scores, 500, 0.95, 1, Variant::Ever).unwrap();
        assert_eq!((r.point_estimate, r.ci_low, r.ci_high), (c, c, c));
        assert_eq!((r.n_tasks, r.n_seeds), (2, 4));

        let varied = vec![
            TaskScores {
                task: "a".into(),
                scores: vec![0.1, 0.5, 0.9, 0.3],
            },
            TaskScores {
                task: "b".into(),
                scores: vec![0.2, 0.8],
            },
        ];
        let x = bootstrap_ci(&varied, 2000, 0.95, 42, Variant::Recent).unwrap();
        let y = bootstrap_ci(&varied, 2000, 0.95, 42, Variant::Recent).unwrap();
        assert_eq!(x, y);
        assert!(x.ci_low <= x.point_estimate && x.point_estimate <= x.ci_high);
        assert!(x.ci_low < x.ci_high);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wide = vec![TaskScores {
            task: "a".into(),
            scores: (0..30).map(|_| rng.random::<f64>()).collect(),
        }];
        let p = bootstrap_ci(&wide, 500, 0.95, 42, Variant::Ever).unwrap();
        let q = bootstrap_ci(&wide, 500, 0.95, 43, Variant::Ever).unwrap();
        assert_ne!((p.ci_low, p.ci_high), (q.ci_low, q.ci_high));
    }

    #[test]
    fn bootstrap_errors() {
        assert!(matches!(
            bootstrap_ci(&[], 10, 0.95, 0, Variant::Ever),
            Err(AggregateError::EmptyInput(_))
        ));
        let empty_task = [TaskScores {
            task: "a".into(),
            scores: vec![],
        }];
        assert!(bootstrap_ci(&empty_task, 10, 0.95, 0, Variant::Ever).is_err());
        let ok = [TaskScores {
            task: "a".into(),
            scores: vec![1.0],
        }];
        assert!(bootstrap_ci(&ok, 0, 0.95, 0, Variant::Ever).is_err());
        assert_eq!(
            bootstrap_ci(&ok, 10, 1.0, 0, Variant::Ever),
            Err(AggregateError::InvalidConfidence(1.0))
        );
    }

    #[test]
    fn percentile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile(&s, 0.0), 0.0);
        assert_eq!(percentile(&s, 1.0), 3.0);
        assert_eq!(percentile(&s, 0.5), 1.5);
    }

    proptest! {
        #[test]
        fn positive_scale_invariance(
            raw in prop::collection::vec((-5.0f64..5.0, 0.1f64..5.0, 0.0f64..1.0), 1..8),
            c in 0.01f64..100.0,
        ) {
            let tasks: Vec<TaskResult> = raw
                .iter()
                .enumerate()
                .map(|(i, &(init, span, frac))| task(&format!("t{i}"), init + span, init + span * frac, init))
                .collect();
            let scaled: Vec<TaskResult> = tasks
                .iter()
                .map(|t| task(&t.task_name, t.v_expert * c, t.v_learned * c, t.v_initial * c))
                .collect();
            let a = aggregate(&tasks, DEFAULT_EPSILON).unwrap();
            let b = aggregate(&scaled, DEFAULT_EPSILON).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            for (t, s) in tasks.iter().zip(&scaled) {
                let g = normalized_gap(t, DEFAULT_EPSILON).value().unwrap();
                prop_assert!((0.0..=1.0).contains(&g));
                let gs = normalized_gap(s, DEFAULT_EPSILON).value().unwrap();
                prop_assert!((g - gs).abs() < 1e-9);
            }
        }

        #[test]
        fn task_order_invariance(
            raw in prop::collection::vec((-5.0f64..5.0, 0.1f64..5.0, -0.5f64..1.5), 1..8),
            rot in 0usize..8,
        ) {
            let tasks: Vec<TaskResult> = raw
                .iter()
                .enumerate()
                .map(|(i, &(init, span, frac))| task(&format!("t{i}"), init + span, init + span * frac, init))
                .collect();
            let mut permuted = tasks.clone();
            permuted.reverse();
            let len = permuted.len();
            permuted.rotate_left(rot % len);
            prop_assert_eq!(
                aggregate(&tasks, DEFAULT_EPSILON).unwrap().to_bits(),
                aggregate(&permuted, DEFAULT_EPSILON).unwrap().to_bits()
            );
        }
    }
}
