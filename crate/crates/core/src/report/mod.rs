//! Run configs, curve tables, aggregation over curve tables, and charts.

pub mod config;
pub mod curve;
pub mod svg;

use std::io::Write;

use crate::aggregate::{aggregate_report, normalized_gap, AggregateError, AggregateReport, TaskResult, Variant};

pub use config::{ConfigError, LoadedConfig, RunConfig};
pub use curve::{analyze_episodes, CurveError, CurveRow, CurveTable, CURVE_COLUMNS};

/// Knobs of the stratified bootstrap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapKnobs {
    pub epsilon: f64,
    pub n_resamples: usize,
    pub confidence: f64,
    pub rng_seed: u64,
}

impl Default for BootstrapKnobs {
    fn default() -> Self {
        Self {
            epsilon: crate::aggregate::DEFAULT_EPSILON,
            n_resamples: crate::aggregate::DEFAULT_RESAMPLES,
            confidence: 0.95,
            rng_seed: 0,
        }
    }
}

/// Aggregates the final rows of each task's curve tables.
pub fn aggregate_tables(
    tasks: &[(String, CurveTable)],
    variant: Variant,
    knobs: BootstrapKnobs,
) -> Result<(AggregateReport, Vec<TaskResult>), AggregateError> {
    let results: Vec<TaskResult> = tasks
        .iter()
        .flat_map(|(name, table)| table.task_results(name, variant))
        .collect();
    if results.is_empty() {
        return Err(AggregateError::EmptyInput("no curve rows".into()));
    }
    let report = aggregate_report(
        &results,
        knobs.epsilon,
        knobs.n_resamples,
        knobs.confidence,
        knobs.rng_seed,
    )?;
    Ok((report, results))
}

pub const BREAKDOWN_COLUMNS: &str = "task,seed,variant,v_expert,v_learned,v_initial,normalized_gap,valid";

/// Per-run gap breakdown. Invalid runs get an empty gap cell.
pub fn write_breakdown_csv<W: Write>(mut out: W, results: &[TaskResult], epsilon: f64) -> std::io::Result<()> {
    writeln!(out, "{BREAKDOWN_COLUMNS}")?;
    for r in results {
        let gap = normalized_gap(r, epsilon).value();
        writeln!(
            out,
            "{},{},{},{:?},{:?},{:?},{},{}",
            r.task_name,
            r.seed,
            r.variant,
            r.v_expert,
            r.v_learned,
            r.v_initial,
            gap.map(|g| format!("{g:?}")).unwrap_or_default(),
            gap.is_some(),
        )?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(seed: u64, expert: f64, learned: f64, initial: f64) -> CurveTable {
        CurveTable::new(vec![CurveRow {
            global_step: 100,
            seed,
            v_learned: learned,
            v_learned_greedy: None,
            v_best_single: expert,
            v_top5_ever: expert,
            v_top5_recent: expert,
            v_initial: initial,
            gap_ever: expert - learned,
            gap_recent: expert - learned,
        }])
    }

    #[test]
    fn aggregates_final_rows() {
        let tasks = vec![
            (
                "a".to_string(),
                CurveTable::merge([table(0, 10.0, 5.0, 0.0), table(1, 10.0, 5.0, 0.0)]),
            ),
            ("b".to_string(), table(0, 4.0, 3.0, 2.0)),
            ("dead".to_string(), table(0, 1.0, 0.0, 1.0)),
        ];
        let knobs = BootstrapKnobs {
            n_resamples: 200,
            ..Default::default()
        };
        let (report, results) = aggregate_tables(&tasks, Variant::Ever, knobs).unwrap();
        assert_eq!(report.point_estimate, 0.5);
        assert_eq!(report.invalid_tasks, vec!["dead".to_string()]);
        assert_eq!(report.n_tasks, 2);
        assert_eq!(results.len(), 4);

        let mut buf = Vec::new();
        write_breakdown_csv(&mut buf, &results, knobs.epsilon).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(BREAKDOWN_COLUMNS));
        assert!(text.contains("a,1,ever,10.0,5.0,0.0,0.5,true"));
        assert!(text.contains("dead,0,ever,1.0,0.0,1.0,,false"));
    }

    #[test]
    fn all_invalid_is_an_error() {
        let tasks = vec![("dead".to_string(), table(0, 1.0, 0.0, 1.0))];
        assert!(matches!(
            aggregate_tables(&tasks, Variant::Recent, BootstrapKnobs::default()),
            Err(AggregateError::AllTasksInvalid(_))
        ));
    }
}
