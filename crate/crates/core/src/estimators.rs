//! Experience-optimal value estimators.
//!
//! * [`best_single`]: the highest-return trajectory ever recorded. In a
//!   deterministic environment its action sequence is itself a policy, and
//!   [`replay_verify`] checks that replaying it reproduces the recorded return.
//! * [`top_k_mean`]: mean return of the best `k` trajectories of a pool, with
//!   `k = max(min_k, ceil(fraction * N))` (top 5% by default).
//! * [`heuristic_optimal_bound`]: the `r_max / (1 - gamma)` upper bound that
//!   is commonly used when the true optimum is unknown.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{self, EnvError, EnvSpec};
use crate::trajectory::EpisodeRecord;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("return pool is empty")]
    EmptyPool,
    #[error("no episodes recorded")]
    NoEpisodes,
    #[error("non-finite return {0} in pool")]
    NonFinite(f64),
    #[error("episode has no actions to replay")]
    EmptyEpisode,
    #[error("environment ended at step {step}, recording has {recorded} actions")]
    EarlyTermination { step: usize, recorded: usize },
    #[error(
        "replay diverged{}: recorded return {recorded}, achieved {achieved}",
        .step.map(|s| format!(" at step {s}")).unwrap_or_default()
    )]
    DeterminismViolation {
        recorded: f64,
        achieved: f64,
        /// First step whose reward differs from the recording, when per-step
        /// rewards were recorded.
        step: Option<usize>,
    },
    #[error("replay_verify requires a deterministic environment spec")]
    StochasticEnv,
    #[error("gamma must lie in [0, 1), got {0}")]
    InvalidGamma(f64),
    #[error("invalid top-k query: {0}")]
    InvalidQuery(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Selects how many of the best trajectories enter [`top_k_mean`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopKQuery {
    pub fraction: f64,
    pub min_k: usize,
}

impl Default for TopKQuery {
    fn default() -> Self {
        Self {
            fraction: 0.05,
            min_k: 1,
        }
    }
}

impl TopKQuery {
    pub fn new(fraction: f64, min_k: usize) -> Result<Self, EstimatorError> {
        let q = Self { fraction, min_k };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(EstimatorError::InvalidQuery(format!(
                "fraction must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        if self.min_k == 0 {
            return Err(EstimatorError::InvalidQuery("min_k must be positive".into()));
        }
        Ok(())
    }

    /// `max(min_k, ceil(fraction * n))`, capped at `n`.
    ///
    /// The product is snapped to the nearest integer when it lies within a few
    /// ulps of it, so `0.05 * 60` yields 3 rather than 4.
    pub fn k_for(&self, n: usize) -> usize {
        let x = self.fraction * n as f64;
        let nearest = x.round();
        let k = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest as usize
        } else {
            x.ceil() as usize
        };
        k.max(self.min_k).min(n)
    }
}

/// `anchor + mean(v - anchor)`. Exact for constant inputs equal to the anchor,
/// and never above the anchor when every value is at most the anchor.
pub(crate) fn anchored_mean(anchor: f64, values: impl IntoIterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut acc = 0.0;
    for v in values {
        acc += v - anchor;
        n += 1;
    }
    anchor + acc / n as f64
}

/// Mean of a non-empty sequence, anchored on its first element.
pub(crate) fn mean(values: &[f64]) -> f64 {
    anchored_mean(values[0], values.iter().copied())
}

/// Mean of the `k` largest returns in `returns`.
///
/// The selected values are summed in descending order, anchored on the
/// maximum, so the result is a deterministic function of the multiset.
pub fn top_k_mean(returns: &[f64], q: TopKQuery) -> Result<f64, EstimatorError> {
    q.validate()?;
    if returns.is_empty() {
        return Err(EstimatorError::EmptyPool);
    }
    if let Some(bad) = returns.iter().find(|r| !r.is_finite()) {
        return Err(EstimatorError::NonFinite(*bad));
    }
    let k = q.k_for(returns.len());
    let mut pool = returns.to_vec();
    let desc = |a: &f64, b: &f64| b.total_cmp(a);
    if k < pool.len() {
        pool.select_nth_unstable_by(k - 1, desc);
        pool.truncate(k);
    }
    pool.sort_unstable_by(desc);
    Ok(anchored_mean(pool[0], pool.iter().copied()))
}

/// The episode with the highest extrinsic return; ties go to the lowest id.
pub fn best_single<'a, I>(episodes: I) -> Result<&'a EpisodeRecord, EstimatorError>
where
    I: IntoIterator<Item = &'a EpisodeRecord>,
{
    episodes
        .into_iter()
        .reduce(|best, ep| match ep.return_extrinsic.total_cmp(&best.return_extrinsic) {
            std::cmp::Ordering::Greater => ep,
            std::cmp::Ordering::Equal if ep.episode_id < best.episode_id => ep,
            _ => best,
        })
        .ok_or(EstimatorError::NoEpisodes)
}

/// Replays a recorded action sequence in a fresh deterministic environment.
///
/// The environment is rebuilt from `spec` with its seed replaced by the
/// episode's `env_seed`. Returns the achieved return, which must equal the
/// recorded one bit for bit.
pub fn replay_verify(spec: &EnvSpec, episode: &EpisodeRecord) -> Result<f64, EstimatorError> {
    if !spec.is_deterministic() {
        return Err(EstimatorError::StochasticEnv);
    }
    let achieved = replay_once(spec, episode, episode.env_seed)?;
    if achieved.ret.to_bits() != episode.return_extrinsic.to_bits() || !achieved.ended {
        let step = episode.rewards.as_ref().and_then(|recorded| {
            recorded
                .iter()
                .zip(&achieved.rewards)
                .position(|(a, b)| a.to_bits() != b.to_bits())
        });
        return Err(EstimatorError::DeterminismViolation {
            recorded: episode.return_extrinsic,
            achieved: achieved.ret,
            step: step.or((!achieved.ended).then_some(episode.actions.len())),
        });
    }
    Ok(achieved.ret)
}

struct Replay {
    ret: f64,
    rewards: Vec<f64>,
    ended: bool,
}

fn replay_once(spec: &EnvSpec, episode: &EpisodeRecord, seed: u64) -> Result<Replay, EstimatorError> {
    if episode.actions.is_empty() {
        return Err(EstimatorError::EmptyEpisode);
    }
    let spec = spec.clone().with_seed(seed);
    let (mut env, _) = env::reset(&spec)?;
    let mut rewards = Vec::with_capacity(episode.actions.len());
    let mut ret = 0.0;
    for (t, &a) in episode.actions.iter().enumerate() {
        if env.is_finished() {
            return Err(EstimatorError::EarlyTermination {
                step: t,
                recorded: episode.actions.len(),
            });
        }
        let s = env.step(a)?;
        ret += s.reward;
        rewards.push(s.reward);
    }
    Ok(Replay {
        ret,
        rewards,
        ended: env.is_finished(),
    })
}

/// Distribution of returns from replaying one action sequence under
/// independently seeded environment noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub recorded: f64,
}

/// Monte Carlo replay for stochastic environments. Replays stop early if the
/// environment ends before the recorded actions run out.
pub fn replay_monte_carlo(
    spec: &EnvSpec,
    episode: &EpisodeRecord,
    n_replays: usize,
    rng_seed: u64,
) -> Result<ReplaySummary, EstimatorError> {
    if episode.actions.is_empty() {
        return Err(EstimatorError::EmptyEpisode);
    }
    if n_replays == 0 {
        return Err(EstimatorError::EmptyPool);
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut returns = Vec::with_capacity(n_replays);
    for _ in 0..n_replays {
        let seeded = spec.clone().with_seed(seeds.random());
        let (mut env, _) = env::reset(&seeded)?;
        let mut ret = 0.0;
        for &a in &episode.actions {
            if env.is_finished() {
                break;
            }
            ret += env.step(a)?.reward;
        }
        returns.push(ret);
    }
    let m = mean(&returns);
    let var = returns.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / n_replays as f64;
    Ok(ReplaySummary {
        n: n_replays,
        mean: m,
        std: var.sqrt(),
        min: returns.iter().copied().fold(f64::INFINITY, f64::min),
        max: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        recorded: episode.return_extrinsic,
    })
}

/// `r_max / (1 - gamma)`.
pub fn heuristic_optimal_bound(r_max: f64, gamma: f64) -> Result<f64, EstimatorError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(EstimatorError::InvalidGamma(gamma));
    }
    Ok(r_max / (1.0 - gamma))
}
