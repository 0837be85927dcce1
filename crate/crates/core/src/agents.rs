//! Tabular reference agents and the experiment loop that drives them.
//!
//! Two learners generate experience streams for the tracker:
//!
//! * `q_learning`: one-step TD with an epsilon-greedy behaviour policy whose
//!   epsilon decays linearly over a fraction of the run.
//! * `policy_gradient`: softmax over tabular logits, REINFORCE with a
//!   per-episode mean baseline.
//!
//! Either can add a count-based novelty bonus `beta / sqrt(N(s'))` to the
//! reward it learns from. The bonus is a tabular stand-in for learned
//! novelty signals such as RND; it never enters the extrinsic return.
//!
//! States are binned by `observation / aggregation_factor` before lookup, which
//! aliases neighbouring states when the factor is above 1.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{self, EnvError, EnvSpec};
use crate::tracker::{ExperienceTracker, MetricsPoint, TrackerConfig, TrackerError};
use crate::trajectory::{
    episode_env_seed, finalize_episode, EpisodeContext, EpisodeError, EpisodeRecord, PolicyMode, RunIdentity,
    Transition,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    QLearning,
    PolicyGradient,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::QLearning => "q_learning",
            AgentKind::PolicyGradient => "policy_gradient",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub kind: AgentKind,
    #[serde(default = "defaults::epsilon_start")]
    pub epsilon_start: f64,
    #[serde(default = "defaults::epsilon_end")]
    pub epsilon_end: f64,
    /// Fraction of the run over which epsilon decays linearly.
    #[serde(default = "defaults::epsilon_decay_fraction")]
    pub epsilon_decay_fraction: f64,
    pub learning_rate: f64,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub bonus_beta: f64,
    #[serde(default = "defaults::aggregation_factor")]
    pub aggregation_factor: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn epsilon_start() -> f64 {
        1.0
    }
    pub fn epsilon_end() -> f64 {
        0.05
    }
    pub fn epsilon_decay_fraction() -> f64 {
        0.5
    }
    pub fn gamma() -> f64 {
        0.99
    }
    pub fn aggregation_factor() -> usize {
        1
    }
}

impl AgentSpec {
    pub fn q_learning(learning_rate: f64) -> Self {
        Self {
            kind: AgentKind::QLearning,
            epsilon_start: defaults::epsilon_start(),
            epsilon_end: defaults::epsilon_end(),
            epsilon_decay_fraction: defaults::epsilon_decay_fraction(),
            learning_rate,
            gamma: defaults::gamma(),
            bonus_beta: 0.0,
            aggregation_factor: 1,
            seed: 0,
        }
    }

    pub fn policy_gradient(learning_rate: f64) -> Self {
        Self {
            kind: AgentKind::PolicyGradient,
            ..Self::q_learning(learning_rate)
        }
    }

    /// Name used in run identities and logs, e.g. `q_learning+bonus`.
    pub fn algorithm_name(&self) -> String {
        if self.bonus_beta > 0.0 {
            format!("{}+bonus", self.kind.as_str())
        } else {
            self.kind.as_str().to_string()
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.epsilon_start) || !unit(self.epsilon_end) {
            return Err(AgentError::InvalidSpec("epsilon endpoints must lie in [0, 1]".into()));
        }
        if !unit(self.epsilon_decay_fraction) {
            return Err(AgentError::InvalidSpec(
                "epsilon_decay_fraction must lie in [0, 1]".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(AgentError::InvalidSpec(
                "learning_rate must be a finite non-negative number".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(AgentError::InvalidSpec("gamma must lie in [0, 1)".into()));
        }
        if !(self.bonus_beta >= 0.0 && self.bonus_beta.is_finite()) {
            return Err(AgentError::InvalidSpec("bonus_beta must be >= 0".into()));
        }
        if self.aggregation_factor == 0 {
            return Err(AgentError::InvalidSpec("aggregation_factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// Visit counts behind the novelty bonus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BonusState {
    pub visit_counts: BTreeMap<usize, u64>,
}

impl BonusState {
    /// Counts a visit to `state` and returns `beta / sqrt(count)`.
    pub fn visit(&mut self, state: usize, beta: f64) -> f64 {
        let c = self.visit_counts.entry(state).or_insert(0);
        *c += 1;
        beta / (*c as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct Agent {
    spec: AgentSpec,
    num_actions: usize,
    /// Q-values or softmax logits, per binned state.
    table: BTreeMap<usize, Vec<f64>>,
    bonus: BonusState,
    epsilon: f64,
    rng: ChaCha8Rng,
    /// (binned state, action, learning reward) of the current episode.
    episode: Vec<(usize, usize, f64)>,
}

impl Agent {
    pub fn new(spec: AgentSpec, num_actions: usize) -> Result<Self, AgentError> {
        spec.validate()?;
        if num_actions == 0 {
            return Err(AgentError::InvalidSpec("agent needs at least one action".into()));
        }
        Ok(Self {
            epsilon: spec.epsilon_start,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec,
            num_actions,
            table: BTreeMap::new(),
            bonus: BonusState::default(),
            episode: Vec::new(),
        })
    }

    pub fn spec(&self) -> &AgentSpec {
        &self.spec
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn bin(&self, observation: usize) -> usize {
        observation / self.spec.aggregation_factor
    }

    /// Action preferences for an observation; zeros for unseen states.
    pub fn preferences(&self, observation: usize) -> Vec<f64> {
        self.table
            .get(&self.bin(observation))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.num_actions])
    }

    /// Sets epsilon from the schedule, given how many training episodes have
    /// completed out of the run's total.
    pub fn set_progress(&mut self, episodes_done: usize, total_episodes: usize) {
        let horizon = self.spec.epsilon_decay_fraction * total_episodes as f64;
        let frac = if horizon <= 0.0 {
            1.0
        } else {
            (episodes_done as f64 / horizon).min(1.0)
        };
        self.epsilon = self.spec.epsilon_start + (self.spec.epsilon_end - self.spec.epsilon_start) * frac;
    }

    pub fn act(&mut self, observation: usize, mode: PolicyMode) -> usize {
        let prefs = self.preferences(observation);
        match mode {
            PolicyMode::Greedy => argmax(&prefs),
            PolicyMode::Stochastic => match self.spec.kind {
                AgentKind::QLearning => {
                    if self.rng.random::<f64>() < self.epsilon {
                        self.rng.random_range(0..self.num_actions)
                    } else {
                        argmax(&prefs)
                    }
                }
                AgentKind::PolicyGradient => {
                    let probs = softmax(&prefs);
                    let u: f64 = self.rng.random();
                    let mut acc = 0.0;
                    for (a, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            return a;
                        }
                    }
                    self.num_actions - 1
                }
            },
        }
    }

    /// Counts the visit to `next_observation` and returns the bonus paid for it.
    pub fn intrinsic_bonus(&mut self, next_observation: usize) -> f64 {
        if self.spec.bonus_beta == 0.0 {
            return 0.0;
        }
        let s = self.bin(next_observation);
        self.bonus.visit(s, self.spec.bonus_beta)
    }

    /// Learns from one transition `observation --action--> next_observation`.
    /// The learning reward is `reward + intrinsic_reward`.
    pub fn observe(&mut self, observation: usize, transition: &Transition, next_observation: usize) {
        let s = self.bin(observation);
        let reward = transition.reward + transition.intrinsic_reward;
        match self.spec.kind {
            AgentKind::QLearning => {
                let lr = self.spec.learning_rate;
                if lr == 0.0 {
                    return;
                }
                let bootstrap = if transition.done {
                    0.0
                } else {
                    let next = self.preferences(next_observation);
                    next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                };
                let target = reward + self.spec.gamma * bootstrap;
                let n = self.num_actions;
                let q = self.table.entry(s).or_insert_with(|| vec![0.0; n]);
                q[transition.action] += lr * (target - q[transition.action]);
            }
            AgentKind::PolicyGradient => {
                self.episode.push((s, transition.action, reward));
                if transition.ends_episode() {
                    self.finish_policy_episode();
                }
            }
        }
    }

    fn finish_policy_episode(&mut self) {
        let steps = std::mem::take(&mut self.episode);
        let lr = self.spec.learning_rate;
        if lr == 0.0 || steps.is_empty() {
            return;
        }
        let mut returns = vec![0.0; steps.len()];
        let mut g = 0.0;
        for (i, (_, _, r)) in steps.iter().enumerate().rev() {
            g = r + self.spec.gamma * g;
            returns[i] = g;
        }
        let baseline = returns.iter().sum::<f64>() / returns.len() as f64;
        let n = self.num_actions;
        for ((s, a, _), g) in steps.iter().zip(&returns) {
            let advantage = g - baseline;
            let logits = self.table.entry(*s).or_insert_with(|| vec![0.0; n]);
            let probs = softmax(logits);
            for (b, p) in probs.iter().enumerate() {
                let indicator = if b == *a { 1.0 } else { 0.0 };
                logits[b] += lr * advantage * (indicator - p);
            }
        }
    }

    /// Hash over the learned table and visit counts. States whose entries
    /// are all zero are skipped, so lazily created rows do not change it.
    pub fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        for (s, row) in &self.table {
            if row.iter().all(|v| *v == 0.0) {
                continue;
            }
            h.update((*s as u64).to_le_bytes());
            for v in row {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.update(b"counts");
        for (s, c) in &self.bonus.visit_counts {
            h.update((*s as u64).to_le_bytes());
            h.update(c.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn bonus_state(&self) -> &BonusState {
        &self.bonus
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Training schedule of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSchedule {
    pub n_episodes: usize,
    /// A metrics snapshot is taken after every `eval_every` training episodes
    /// (and at the end of the run).
    pub eval_every: usize,
    /// Run one greedy evaluation episode before each snapshot.
    pub greedy_eval: bool,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub identity: RunIdentity,
    /// Training and evaluation episodes in id order.
    pub episodes: Vec<EpisodeRecord>,
    pub metrics: Vec<MetricsPoint>,
    /// The tracker's final state, including retained top episodes.
    pub tracker: ExperienceTracker,
}

/// Plays one episode. Training episodes update the agent; greedy ones do not.
fn play_episode(
    env_spec: &EnvSpec,
    agent: &mut Agent,
    ctx: EpisodeContext,
) -> Result<(EpisodeRecord, u64), AgentError> {
    let spec = env_spec.clone().with_seed(ctx.env_seed);
    let (mut env, mut obs) = env::reset(&spec)?;
    let training = ctx.policy_mode == PolicyMode::Stochastic;
    let mut transitions = Vec::new();
    while !env.is_finished() {
        let action = agent.act(obs, ctx.policy_mode);
        let step = env.step(action)?;
        let intrinsic = if training {
            agent.intrinsic_bonus(step.observation)
        } else {
            0.0
        };
        let t = Transition {
            step_index: transitions.len(),
            action,
            reward: step.reward,
            intrinsic_reward: intrinsic,
            done: step.done,
            truncated: step.truncated,
        };
        if training {
            agent.observe(obs, &t, step.observation);
        }
        transitions.push(t);
        obs = step.observation;
    }
    let steps = transitions.len() as u64;
    let record = finalize_episode(
        &transitions,
        EpisodeContext {
            global_step_at_end: ctx.global_step_at_end + if training { steps } else { 0 },
            ..ctx
        },
    )?;
    Ok((record, steps))
}

/// Trains an agent, recording every episode and a snapshot per evaluation
/// point. Fully determined by the two specs, the schedule and the tracker
/// config.
pub fn run_experiment(
    env_spec: &EnvSpec,
    agent_spec: &AgentSpec,
    schedule: RunSchedule,
    tracker_config: TrackerConfig,
    config_bytes: &[u8],
) -> Result<RunLog, AgentError> {
    env_spec.validate()?;
    if schedule.eval_every == 0 {
        return Err(AgentError::InvalidSpec("eval_every must be positive".into()));
    }
    let mut agent = Agent::new(agent_spec.clone(), env_spec.name.num_actions())?;
    let mut tracker = ExperienceTracker::new(tracker_config)?;
    let identity = RunIdentity::new(
        agent_spec.algorithm_name(),
        env_spec.name.as_str(),
        env_spec.seed,
        config_bytes,
    );

    let mut episodes = Vec::new();
    let mut metrics = Vec::new();
    let mut global_step = 0u64;
    let mut next_id = 0u64;

    let mut play = |agent: &mut Agent, mode: PolicyMode, global_step: u64| {
        let id = next_id;
        next_id += 1;
        play_episode(
            env_spec,
            agent,
            EpisodeContext {
                episode_id: id,
                env_seed: episode_env_seed(env_spec.seed, id),
                policy_mode: mode,
                global_step_at_end: global_step,
            },
        )
    };

    for i in 0..schedule.n_episodes {
        agent.set_progress(i, schedule.n_episodes);
        let (record, steps) = play(&mut agent, PolicyMode::Stochastic, global_step)?;
        global_step += steps;
        tracker.record_episode(&record)?;
        episodes.push(record);

        let done = i + 1;
        if done.is_multiple_of(schedule.eval_every) || done == schedule.n_episodes {
            if schedule.greedy_eval {
                let (record, _) = play(&mut agent, PolicyMode::Greedy, global_step)?;
                tracker.record_episode(&record)?;
                episodes.push(record);
            }
            metrics.push(tracker.snapshot(global_step, PolicyMode::Stochastic)?);
        }
    }

    Ok(RunLog {
        identity,
        episodes,
        metrics,
        tracker,
    })
}
