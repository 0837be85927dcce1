use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::aggregate::{TaskResult, Variant};
use crate::tracker::{ExperienceTracker, MetricsPoint, TrackerConfig, TrackerError};
use crate::trajectory::{EpisodeRecord, PolicyMode};

pub const CURVE_COLUMNS: [&str; 10] = [
    "global_step",
    "seed",
    "v_learned",
    "v_learned_greedy",
    "v_best_single",
    "v_top5_ever",
    "v_top5_recent",
    "v_initial",
    "gap_ever",
    "gap_recent",
];

#[derive(Debug, Error)]
pub enum CurveError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("curve table is empty")]
    Empty,
    #[error("log contains no episodes")]
    EmptyLog,
    #[error("eval_every must be positive")]
    InvalidEvalEvery,
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub global_step: u64,
    pub seed: u64,
    pub v_learned: f64,
    pub v_learned_greedy: Option<f64>,
    pub v_best_single: f64,
    pub v_top5_ever: f64,
    pub v_top5_recent: f64,
    pub v_initial: f64,
    pub gap_ever: f64,
    pub gap_recent: f64,
}

impl CurveRow {
    pub fn from_metrics(seed: u64, m: &MetricsPoint) -> Self {
        Self {
            global_step: m.global_step,
            seed,
            v_learned: m.v_learned,
            v_learned_greedy: m.v_learned_greedy,
            v_best_single: m.v_best_single,
            v_top5_ever: m.v_top5_ever,
            v_top5_recent: m.v_top5_recent,
            v_initial: m.v_initial,
            gap_ever: m.gap_ever,
            gap_recent: m.gap_recent,
        }
    }

    /// Value columns in CSV order, after `global_step` and `seed`.
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            Some(self.v_learned),
            self.v_learned_greedy,
            Some(self.v_best_single),
            Some(self.v_top5_ever),
            Some(self.v_top5_recent),
            Some(self.v_initial),
            Some(self.gap_ever),
            Some(self.gap_recent),
        ]
    }
}

/// Estimator curves, rows sorted by `(seed, global_step)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurveTable {
    rows: Vec<CurveRow>,
}

impl CurveTable {
    pub fn new(mut rows: Vec<CurveRow>) -> Self {
        rows.sort_by_key(|r| (r.seed, r.global_step));
        Self { rows }
    }

    pub fn from_metrics(seed: u64, metrics: &[MetricsPoint]) -> Self {
        Self::new(metrics.iter().map(|m| CurveRow::from_metrics(seed, m)).collect())
    }

    pub fn rows(&self) -> &[CurveRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn merge(tables: impl IntoIterator<Item = CurveTable>) -> Self {
        Self::new(tables.into_iter().flat_map(|t| t.rows).collect())
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    }

    /// Last row of every seed.
    pub fn final_rows(&self) -> Vec<CurveRow> {
        let mut last: BTreeMap<u64, CurveRow> = BTreeMap::new();
        for r in &self.rows {
            last.insert(r.seed, *r);
        }
        last.into_values().collect()
    }

    /// One result per seed, taken from that seed's final row.
    pub fn task_results(&self, task_name: &str, variant: Variant) -> Vec<TaskResult> {
        self.final_rows()
            .into_iter()
            .map(|r| TaskResult {
                task_name: task_name.to_string(),
                variant,
                v_expert: match variant {
                    Variant::Ever => r.v_top5_ever,
                    Variant::Recent => r.v_top5_recent,
                },
                v_learned: r.v_learned,
                v_initial: r.v_initial,
                seed: r.seed,
            })
            .collect()
    }

    /// CSV with the exact column header; floats in shortest round-trip form,
    /// an empty cell for a missing greedy value.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", CURVE_COLUMNS.join(","))?;
        for r in &self.rows {
            write!(out, "{},{}", r.global_step, r.seed)?;
            for v in r.values() {
                match v {
                    Some(v) => write!(out, ",{v:?}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
        }
        out.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self, CurveError> {
        let mut lines = reader.lines().enumerate();
        let header = loop {
            match lines.next() {
                None => return Err(CurveError::Empty),
                Some((_, l)) => {
                    let l = l?;
                    if !l.trim().is_empty() {
                        break l;
                    }
                }
            }
        };
        if header.trim_end() != CURVE_COLUMNS.join(",") {
            return Err(CurveError::Parse {
                line: 1,
                message: format!("unexpected header `{header}`"),
            });
        }
        let mut rows = Vec::new();
        for (i, l) in lines {
            let l = l?;
            let line = i + 1;
            if l.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = l.trim_end().split(',').collect();
            if cells.len() != CURVE_COLUMNS.len() {
                return Err(CurveError::Parse {
                    line,
                    message: format!("expected {} cells, found {}", CURVE_COLUMNS.len(), cells.len()),
                });
            }
            let err = |col: usize| CurveError::Parse {
                line,
                message: format!("bad value in column `{}`", CURVE_COLUMNS[col]),
            };
            let int = |col: usize| cells[col].parse::<u64>().map_err(|_| err(col));
            let float = |col: usize| cells[col].parse::<f64>().map_err(|_| err(col));
            rows.push(CurveRow {
                global_step: int(0)?,
                seed: int(1)?,
                v_learned: float(2)?,
                v_learned_greedy: if cells[3].is_empty() { None } else { Some(float(3)?) },
                v_best_single: float(4)?,
                v_top5_ever: float(5)?,
                v_top5_recent: float(6)?,
                v_initial: float(7)?,
                gap_ever: float(8)?,
                gap_recent: float(9)?,
            });
        }
        Ok(Self::new(rows))
    }
}

/// Recomputes the snapshot sequence of a run from its episode log alone.
///
/// Snapshots follow the runner's schedule: after every `eval_every` training
/// episodes, once any greedy evaluation episodes that immediately follow have
/// been recorded, and after the final training episode.
pub fn analyze_episodes(
    episodes: &[EpisodeRecord],
    tracker_config: TrackerConfig,
    eval_every: usize,
) -> Result<Vec<MetricsPoint>, CurveError> {
    if episodes.is_empty() {
        return Err(CurveError::EmptyLog);
    }
    if eval_every == 0 {
        return Err(CurveError::InvalidEvalEvery);
    }
    let mut tracker = ExperienceTracker::new(tracker_config)?;
    let mut metrics = Vec::new();
    let mut training = 0usize;
    let mut pending = false;
    let mut unsnapshotted = false;
    let mut global_step = 0u64;

    for ep in episodes {
        let is_training = ep.policy_mode == PolicyMode::Stochastic;
        if is_training && pending {
            metrics.push(tracker.snapshot(global_step, PolicyMode::Stochastic)?);
            pending = false;
            unsnapshotted = false;
        }
        tracker.record_episode(ep)?;
        if is_training {
            training += 1;
            global_step = ep.global_step_at_end;
            unsnapshotted = true;
            if training.is_multiple_of(eval_every) {
                pending = true;
            }
        }
    }
    if unsnapshotted {
        metrics.push(tracker.snapshot(global_step, PolicyMode::Stochastic)?);
    }
    Ok(metrics)
}
