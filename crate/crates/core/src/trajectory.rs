//! Episodes, transitions and run identity.
//!
//! Returns are undiscounted sums of extrinsic reward accumulated in step order.
//! Intrinsic bonuses ride along on each [`Transition`] but only ever feed
//! `return_total`, never the estimators.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EpisodeError {
    #[error("episode has no transitions")]
    EmptyEpisode,
    #[error("final transition (step {step}) carries neither done nor truncated")]
    NonTerminal { step: usize },
    #[error("transition at step {step} ends the episode before the final transition")]
    PrematureEnd { step: usize },
    #[error("transition {position} has step_index {found}, expected {position}")]
    StepIndex { position: usize, found: usize },
    #[error("non-finite reward {value} at step {step}")]
    NaNReward { step: usize, value: f64 },
}

/// How the acting policy picked its actions for an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    /// Sampling from the exploration rule; these are the training episodes.
    Stochastic,
    /// Argmax rollouts without learning updates.
    Greedy,
}

impl PolicyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyMode::Stochastic => "stochastic",
            PolicyMode::Greedy => "greedy",
        }
    }

    pub(crate) fn index(self) -> usize {
        match self {
            PolicyMode::Stochastic => 0,
            PolicyMode::Greedy => 1,
        }
    }
}

impl std::fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PolicyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stochastic" => Ok(PolicyMode::Stochastic),
            "greedy" => Ok(PolicyMode::Greedy),
            other => Err(format!("unknown policy mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub step_index: usize,
    pub action: usize,
    pub reward: f64,
    /// Exploration bonus paid on this step, 0 when none.
    pub intrinsic_reward: f64,
    pub done: bool,
    pub truncated: bool,
}

impl Transition {
    pub fn ends_episode(&self) -> bool {
        self.done || self.truncated
    }
}

/// One completed episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    pub actions: Vec<usize>,
    /// Per-step extrinsic rewards. `None` when the episode came from a log
    /// that only carried the return.
    pub rewards: Option<Vec<f64>>,
    pub return_extrinsic: f64,
    /// Extrinsic plus intrinsic; what the agent trained on.
    pub return_total: f64,
    pub length: usize,
    pub env_seed: u64,
    pub policy_mode: PolicyMode,
    pub global_step_at_end: u64,
    pub truncated: bool,
}

/// Per-episode bookkeeping that does not come from the transitions themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeContext {
    pub episode_id: u64,
    pub env_seed: u64,
    pub policy_mode: PolicyMode,
    pub global_step_at_end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunIdentity {
    pub algorithm_name: String,
    pub env_name: String,
    pub seed: u64,
    pub config_digest: String,
}

impl RunIdentity {
    pub fn new(algorithm_name: impl Into<String>, env_name: impl Into<String>, seed: u64, config_bytes: &[u8]) -> Self {
        Self {
            algorithm_name: algorithm_name.into(),
            env_name: env_name.into(),
            seed,
            config_digest: config_digest(config_bytes),
        }
    }
}

/// SHA-256 of the raw config bytes, lowercase hex.
pub fn config_digest(config_bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(config_bytes))
}

/// Seed of the environment instance used for one episode of a run.
///
/// Every episode gets its own instance so that a single logged episode can be
/// rebuilt and replayed without re-running the episodes before it.
pub fn episode_env_seed(run_seed: u64, episode_id: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(episode_id)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sums rewards strictly in step order.
pub fn undiscounted_return(rewards: &[f64]) -> f64 {
    rewards.iter().fold(0.0, |acc, r| acc + r)
}

/// Closes out an episode from its transitions.
pub fn finalize_episode(transitions: &[Transition], ctx: EpisodeContext) -> Result<EpisodeRecord, EpisodeError> {
    let last = transitions.last().ok_or(EpisodeError::EmptyEpisode)?;
    if !last.ends_episode() {
        return Err(EpisodeError::NonTerminal {
            step: transitions.len() - 1,
        });
    }
    for (position, t) in transitions.iter().enumerate() {
        if t.step_index != position {
            return Err(EpisodeError::StepIndex {
                position,
                found: t.step_index,
            });
        }
        if position + 1 < transitions.len() && t.ends_episode() {
            return Err(EpisodeError::PrematureEnd { step: position });
        }
        if !t.reward.is_finite() {
            return Err(EpisodeError::NaNReward {
                step: position,
                value: t.reward,
            });
        }
    }

    let actions: Vec<usize> = transitions.iter().map(|t| t.action).collect();
    let rewards: Vec<f64> = transitions.iter().map(|t| t.reward).collect();
    let return_extrinsic = undiscounted_return(&rewards);
    let return_total = transitions
        .iter()
        .fold(0.0, |acc, t| acc + (t.reward + t.intrinsic_reward));

    Ok(EpisodeRecord {
        episode_id: ctx.episode_id,
        length: actions.len(),
        actions,
        rewards: Some(rewards),
        return_extrinsic,
        return_total,
        env_seed: ctx.env_seed,
        policy_mode: ctx.policy_mode,
        global_step_at_end: ctx.global_step_at_end,
        truncated: last.truncated && !last.done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn transitions(rewards: &[f64]) -> Vec<Transition> {
        let n = rewards.len();
        rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| Transition {
                step_index: i,
                action: i % 2,
                reward: r,
                intrinsic_reward: 0.0,
                done: i + 1 == n,
                truncated: false,
            })
            .collect()
    }

    fn ctx() -> EpisodeContext {
        EpisodeContext {
            episode_id: 0,
            env_seed: 1,
            policy_mode: PolicyMode::Stochastic,
            global_step_at_end: 3,
        }
    }

    #[test]
    fn sparse_reward_on_last_step() {
        let ep = finalize_episode(&transitions(&[0.0, 0.0, 1.0]), ctx()).unwrap();
        assert_eq!(ep.return_extrinsic, 1.0);
        assert_eq!(ep.length, 3);
        assert_eq!(ep.actions, vec![0, 1, 0]);
    }

    #[test]
    fn single_step_episode() {
        let ep = finalize_episode(&transitions(&[0.0]), ctx()).unwrap();
        assert_eq!(ep.return_extrinsic, 0.0);
        assert_eq!(ep.length, 1);
    }

    #[test]
    fn return_matches_running_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let rewards: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut running = 0.0;
        for r in &rewards {
            running += *r;
        }
        let ep = finalize_episode(&transitions(&rewards), ctx()).unwrap();
        assert_eq!(ep.return_extrinsic.to_bits(), running.to_bits());
    }

    #[test]
    fn intrinsic_excluded_from_extrinsic() {
        let mut ts = transitions(&[0.5, 0.5]);
        ts[0].intrinsic_reward = 2.0;
        let ep = finalize_episode(&ts, ctx()).unwrap();
        assert_eq!(ep.return_extrinsic, 1.0);
        assert_eq!(ep.return_total, 3.0);
    }

    #[test]
    fn truncated_episode_is_complete() {
        let mut ts = transitions(&[0.0, 0.25]);
        ts[1].done = false;
        ts[1].truncated = true;
        let ep = finalize_episode(&ts, ctx()).unwrap();
        assert!(ep.truncated);
        assert_eq!(ep.return_extrinsic, 0.25);
    }

    #[test]
    fn error_paths() {
        assert_eq!(finalize_episode(&[], ctx()), Err(EpisodeError::EmptyEpisode));

        let mut ts = transitions(&[0.0, 0.0]);
        ts[1].done = false;
        assert_eq!(finalize_episode(&ts, ctx()), Err(EpisodeError::NonTerminal { step: 1 }));

        let mut ts = transitions(&[0.0, 0.0]);
        ts[0].done = true;
        assert_eq!(
            finalize_episode(&ts, ctx()),
            Err(EpisodeError::PrematureEnd { step: 0 })
        );

        let mut ts = transitions(&[0.0, 0.0]);
        ts[1].step_index = 5;
        assert!(matches!(
            finalize_episode(&ts, ctx()),
            Err(EpisodeError::StepIndex { position: 1, found: 5 })
        ));

        let ts = transitions(&[0.0, f64::NAN]);
        assert!(matches!(
            finalize_episode(&ts, ctx()),
            Err(EpisodeError::NaNReward { step: 1, .. })
        ));
    }

    #[test]
    fn digest_is_stable_for_identical_bytes() {
        let a = config_digest(b"seeds = [1]\n");
        assert_eq!(a, config_digest(b"seeds = [1]\n"));
        assert_ne!(a, config_digest(b"seeds = [2]\n"));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn env_seeds_differ_per_episode() {
        let a = episode_env_seed(3, 0);
        assert_eq!(a, episode_env_seed(3, 0));
        assert_ne!(a, episode_env_seed(3, 1));
        assert_ne!(a, episode_env_seed(4, 0));
    }
}
