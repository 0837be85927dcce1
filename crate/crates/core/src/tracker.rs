//! Streaming experience tracker.
//!
//! The tracker sits between an agent and its environment and sees every
//! finished episode. It keeps:
//!
//! * the scalar return of every training episode (the all-time pool),
//! * full records of the best `top_capacity` training episodes, so the
//!   maximum-return action sequence is always available for replay,
//! * the last `recent_window` training returns (the recent pool),
//! * the last `eval_window` returns per [`PolicyMode`], for the learned-policy
//!   estimate,
//! * the first `initial_episodes` returns, frozen into the initial-policy value.
//!
//! Greedy evaluation episodes only feed their evaluation window; the pools
//! hold the experience the learner actually trained on.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{anchored_mean, mean, top_k_mean, EstimatorError, TopKQuery};
use crate::trajectory::{EpisodeRecord, PolicyMode};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackerError {
    #[error("episode id {got} is not greater than the last recorded id {last}")]
    OutOfOrderEpisode { last: u64, got: u64 },
    #[error("no episodes recorded")]
    NoEpisodes,
    #[error("no {0} episodes recorded")]
    NoPolicyEpisodes(PolicyMode),
    #[error("initial value needs {needed} episodes, only {seen} recorded")]
    TooFewEpisodes { needed: usize, seen: usize },
    #[error("non-finite return {value} for episode {episode_id}")]
    NaNReward { episode_id: u64, value: f64 },
    #[error("invalid tracker config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Episodes in the recent pool.
    pub recent_window: usize,
    /// Episodes averaged for the learned-policy value, per policy mode.
    pub eval_window: usize,
    /// Full episode records kept for replay.
    pub top_capacity: usize,
    /// Episodes averaged for the initial-policy value.
    pub initial_episodes: usize,
    /// Fraction of a pool that enters the top-k mean.
    pub fraction: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            recent_window: 100,
            eval_window: 20,
            top_capacity: 64,
            initial_episodes: 8,
            fraction: 0.05,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        let positive = [
            ("recent_window", self.recent_window),
            ("eval_window", self.eval_window),
            ("top_capacity", self.top_capacity),
            ("initial_episodes", self.initial_episodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrackerError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        self.query()
            .validate()
            .map_err(|e| TrackerError::InvalidConfig(e.to_string()))
    }

    pub fn query(&self) -> TopKQuery {
        TopKQuery {
            fraction: self.fraction,
            min_k: 1,
        }
    }
}

/// One snapshot of every estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsPoint {
    pub global_step: u64,
    pub policy_mode: PolicyMode,
    /// Mean of the evaluation window for `policy_mode`.
    pub v_learned: f64,
    /// Mean of the greedy evaluation window, when greedy episodes exist.
    pub v_learned_greedy: Option<f64>,
    pub v_best_single: f64,
    pub v_top5_ever: f64,
    pub v_top5_recent: f64,
    pub v_initial: f64,
    /// True while fewer than `initial_episodes` episodes have been seen.
    pub initial_provisional: bool,
    pub gap_ever: f64,
    pub gap_recent: f64,
}

/// Orders the top store: higher return first, then lower episode id.
#[derive(Debug, Clone, Copy)]
struct Rank {
    ret: f64,
    id: u64,
}

impl PartialEq for Rank {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}

impl Eq for Rank {}

impl PartialOrd for Rank {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Rank {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.ret.total_cmp(&self.ret).then(self.id.cmp(&other.id))
    }
}

#[derive(Debug, Clone)]
pub struct ExperienceTracker {
    config: TrackerConfig,
    all_returns: Vec<(u64, f64)>,
    top_store: BTreeMap<Rank, EpisodeRecord>,
    recent_window: VecDeque<f64>,
    eval_windows: [VecDeque<f64>; 2],
    initial_returns: Vec<f64>,
    initial_value: Option<f64>,
    episode_count: usize,
    last_id: Option<u64>,
}

impl ExperienceTracker {
    pub fn new(config: TrackerConfig) -> Result<Self, TrackerError> {
        config.validate()?;
        Ok(Self {
            config,
            all_returns: Vec::new(),
            top_store: BTreeMap::new(),
            recent_window: VecDeque::with_capacity(config.recent_window),
            eval_windows: [VecDeque::new(), VecDeque::new()],
            initial_returns: Vec::with_capacity(config.initial_episodes),
            initial_value: None,
            episode_count: 0,
            last_id: None,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Episodes of any mode recorded so far.
    pub fn episode_count(&self) -> usize {
        self.episode_count
    }

    /// `(episode_id, return)` of every training episode, in record order.
    pub fn all_returns(&self) -> &[(u64, f64)] {
        &self.all_returns
    }

    /// Retained full records, best first.
    pub fn top_episodes(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.top_store.values()
    }

    pub fn recent_returns(&self) -> impl Iterator<Item = f64> + '_ {
        self.recent_window.iter().copied()
    }

    pub fn record_episode(&mut self, episode: &EpisodeRecord) -> Result<(), TrackerError> {
        if let Some(last) = self.last_id {
            if episode.episode_id <= last {
                return Err(TrackerError::OutOfOrderEpisode {
                    last,
                    got: episode.episode_id,
                });
            }
        }
        let ret = episode.return_extrinsic;
        if !ret.is_finite() {
            return Err(TrackerError::NaNReward {
                episode_id: episode.episode_id,
                value: ret,
            });
        }
        self.last_id = Some(episode.episode_id);
        self.episode_count += 1;

        push_bounded(
            &mut self.eval_windows[episode.policy_mode.index()],
            ret,
            self.config.eval_window,
        );

        if self.initial_returns.len() < self.config.initial_episodes {
            self.initial_returns.push(ret);
        }

        if episode.policy_mode == PolicyMode::Greedy {
            return Ok(());
        }

        self.all_returns.push((episode.episode_id, ret));
        push_bounded(&mut self.recent_window, ret, self.config.recent_window);

        let rank = Rank {
            ret,
            id: episode.episode_id,
        };
        if self.top_store.len() < self.config.top_capacity {
            self.top_store.insert(rank, episode.clone());
        } else if let Some(worst) = self.top_store.last_key_value().map(|(k, _)| *k) {
            if rank < worst {
                self.top_store.pop_last();
                self.top_store.insert(rank, episode.clone());
            }
        }
        Ok(())
    }

    /// Mean return of the first `initial_episodes` episodes. Idempotent once
    /// enough episodes have been seen.
    pub fn freeze_initial_value(&mut self) -> Result<f64, TrackerError> {
        if let Some(v) = self.initial_value {
            return Ok(v);
        }
        let needed = self.config.initial_episodes;
        if self.initial_returns.len() < needed {
            return Err(TrackerError::TooFewEpisodes {
                needed,
                seen: self.initial_returns.len(),
            });
        }
        let v = mean(&self.initial_returns);
        self.initial_value = Some(v);
        Ok(v)
    }

    /// The highest-return training episode, ties to the lowest id.
    pub fn best_single(&self) -> Result<&EpisodeRecord, TrackerError> {
        self.top_store.values().next().ok_or(TrackerError::NoEpisodes)
    }

    /// Mean of every training return.
    pub fn mean_return(&self) -> Result<f64, TrackerError> {
        let best = self.best_single()?.return_extrinsic;
        Ok(anchored_mean(best, self.all_returns.iter().map(|(_, r)| *r)))
    }

    pub fn eval_mean(&self, mode: PolicyMode) -> Option<f64> {
        let w = &self.eval_windows[mode.index()];
        (!w.is_empty()).then(|| {
            let v: Vec<f64> = w.iter().copied().collect();
            mean(&v)
        })
    }

    /// Computes every estimator at the current point of the run.
    ///
    /// Before `initial_episodes` episodes have been seen the initial value is
    /// the mean of what is available and the point is flagged provisional.
    pub fn snapshot(&self, global_step: u64, policy_mode: PolicyMode) -> Result<MetricsPoint, TrackerError> {
        if self.episode_count == 0 {
            return Err(TrackerError::NoEpisodes);
        }
        let v_best_single = self.best_single()?.return_extrinsic;
        let v_learned = self
            .eval_mean(policy_mode)
            .ok_or(TrackerError::NoPolicyEpisodes(policy_mode))?;
        let q = self.config.query();
        let ever: Vec<f64> = self.all_returns.iter().map(|(_, r)| *r).collect();
        let v_top5_ever = top_k_mean(&ever, q)?;
        let recent: Vec<f64> = self.recent_window.iter().copied().collect();
        let v_top5_recent = top_k_mean(&recent, q)?;

        let (v_initial, initial_provisional) = match self.initial_value {
            Some(v) => (v, false),
            None if self.initial_returns.len() >= self.config.initial_episodes => (mean(&self.initial_returns), false),
            None => (mean(&self.initial_returns), true),
        };

        Ok(MetricsPoint {
            global_step,
            policy_mode,
            v_learned,
            v_learned_greedy: self.eval_mean(PolicyMode::Greedy),
            v_best_single,
            v_top5_ever,
            v_top5_recent,
            v_initial,
            initial_provisional,
            gap_ever: v_top5_ever - v_learned,
            gap_recent: v_top5_recent - v_learned,
        })
    }
}

fn push_bounded(window: &mut VecDeque<f64>, value: f64, cap: usize) {
    if window.len() == cap {
        window.pop_front();
    }
    window.push_back(value);
}
