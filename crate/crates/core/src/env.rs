//! Small discrete environments with exact determinism contracts.
//!
//! Four tasks cover the regimes the diagnostics care about:
//!
//! * `deep_sea` - sparse reward behind a per-step cost for moving right; the
//!   optimum requires moving right on every one of the N steps.
//! * `key_corridor` - the agent starts mid-corridor, must walk to the key at
//!   the left end, then to the door at the right end.
//! * `dense_grid` - an N x N grid with shaping reward for every unit of
//!   Manhattan progress toward the far corner.
//! * `mini_invaders` - a gun on a row of N columns shoots targets that appear
//!   in a fixed pattern; +1 per hit over a fixed horizon.
//!
//! With `stochastic_slip = p > 0` the executed action repeats the previously
//! executed one with probability p. The slip stream is drawn from a ChaCha
//! generator seeded by `EnvSpec::seed`, so trajectories are reproducible for a
//! given (spec, action sequence) either way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on the number of action sequences `optimal_return` will enumerate.
pub const MAX_ENUMERATION: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("step called on a terminated episode")]
    SteppedTerminal,
    #[error("action {action} out of range for {num_actions} actions")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("action-sequence space {space} exceeds the enumeration cap")]
    TooLargeToEnumerate { space: String },
    #[error("optimal return is only defined for deterministic specs")]
    NotDeterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    DeepSea,
    KeyCorridor,
    DenseGrid,
    MiniInvaders,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::DeepSea => "deep_sea",
            EnvKind::KeyCorridor => "key_corridor",
            EnvKind::DenseGrid => "dense_grid",
            EnvKind::MiniInvaders => "mini_invaders",
        }
    }

    pub fn num_actions(self) -> usize {
        match self {
            EnvKind::DeepSea | EnvKind::KeyCorridor => 2,
            EnvKind::DenseGrid => 4,
            EnvKind::MiniInvaders => 3,
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deep_sea" => Ok(EnvKind::DeepSea),
            "key_corridor" => Ok(EnvKind::KeyCorridor),
            "dense_grid" => Ok(EnvKind::DenseGrid),
            "mini_invaders" => Ok(EnvKind::MiniInvaders),
            other => Err(EnvError::InvalidSpec(format!("unknown environment `{other}`"))),
        }
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub name: EnvKind,
    pub size: usize,
    #[serde(default)]
    pub stochastic_slip: f64,
    /// Defaults per kind: deep_sea N, key_corridor 4N, dense_grid 4N, mini_invaders 64.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl EnvSpec {
    pub fn new(name: EnvKind, size: usize) -> Self {
        Self {
            name,
            size,
            stochastic_slip: 0.0,
            max_steps: None,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_slip(mut self, slip: f64) -> Self {
        self.stochastic_slip = slip;
        self
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = Some(max_steps);
        self
    }

    pub fn is_deterministic(&self) -> bool {
        self.stochastic_slip == 0.0
    }

    pub fn effective_max_steps(&self) -> usize {
        self.max_steps.unwrap_or(match self.name {
            EnvKind::DeepSea => self.size,
            EnvKind::KeyCorridor | EnvKind::DenseGrid => 4 * self.size,
            EnvKind::MiniInvaders => 64,
        })
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let min_size = match self.name {
            EnvKind::DeepSea => 1,
            EnvKind::DenseGrid | EnvKind::MiniInvaders => 2,
            EnvKind::KeyCorridor => 3,
        };
        if self.size < min_size {
            return Err(EnvError::InvalidSpec(format!(
                "{} needs size >= {min_size}, got {}",
                self.name, self.size
            )));
        }
        if !(0.0..1.0).contains(&self.stochastic_slip) {
            return Err(EnvError::InvalidSpec(format!(
                "stochastic_slip must lie in [0, 1), got {}",
                self.stochastic_slip
            )));
        }
        if self.max_steps == Some(0) {
            return Err(EnvError::InvalidSpec("max_steps must be positive".into()));
        }
        Ok(())
    }

    /// Number of distinct observation ids the environment can emit.
    pub fn num_observations(&self) -> usize {
        let n = self.size;
        match self.name {
            EnvKind::DeepSea => (n + 1) * (n + 1),
            EnvKind::KeyCorridor => 2 * n,
            EnvKind::DenseGrid => n * n,
            EnvKind::MiniInvaders => n * n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub observation: usize,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Game {
    DeepSea { row: usize, col: usize },
    KeyCorridor { pos: usize, has_key: bool },
    DenseGrid { x: usize, y: usize },
    MiniInvaders { gun: usize, hits: usize },
}

/// A live environment instance.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    max_steps: usize,
    game: Game,
    t: usize,
    finished: bool,
    prev_action: Option<usize>,
    rng: ChaCha8Rng,
}

/// Builds a fresh instance and returns it with its initial observation.
pub fn reset(spec: &EnvSpec) -> Result<(Env, usize), EnvError> {
    spec.validate()?;
    let game = match spec.name {
        EnvKind::DeepSea => Game::DeepSea { row: 0, col: 0 },
        EnvKind::KeyCorridor => Game::KeyCorridor {
            pos: spec.size / 2,
            has_key: false,
        },
        EnvKind::DenseGrid => Game::DenseGrid { x: 0, y: 0 },
        EnvKind::MiniInvaders => Game::MiniInvaders {
            gun: spec.size / 2,
            hits: 0,
        },
    };
    let env = Env {
        spec: spec.clone(),
        max_steps: spec.effective_max_steps(),
        game,
        t: 0,
        finished: false,
        prev_action: None,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let obs = env.observation();
    Ok((env, obs))
}

impl Env {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn num_actions(&self) -> usize {
        self.spec.name.num_actions()
    }

    pub fn is_deterministic(&self) -> bool {
        self.spec.is_deterministic()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn elapsed_steps(&self) -> usize {
        self.t
    }

    pub fn observation(&self) -> usize {
        let n = self.spec.size;
        match self.game {
            Game::DeepSea { row, col } => row * (n + 1) + col,
            Game::KeyCorridor { pos, has_key } => pos * 2 + usize::from(has_key),
            Game::DenseGrid { x, y } => y * n + x,
            Game::MiniInvaders { gun, hits } => gun * n + target_column(hits, n),
        }
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if self.finished {
            return Err(EnvError::SteppedTerminal);
        }
        let num_actions = self.num_actions();
        if action >= num_actions {
            return Err(EnvError::InvalidAction { action, num_actions });
        }

        let executed = if self.spec.stochastic_slip > 0.0 {
            let u: f64 = self.rng.random();
            match self.prev_action {
                Some(prev) if u < self.spec.stochastic_slip => prev,
                _ => action,
            }
        } else {
            action
        };
        self.prev_action = Some(executed);

        let n = self.spec.size;
        let (reward, natural_end) = match &mut self.game {
            Game::DeepSea { row, col } => {
                let mut reward = 0.0;
                if executed == 1 {
                    reward -= 0.01 / n as f64;
                    *col += 1;
                } else {
                    *col = col.saturating_sub(1);
                }
                *row += 1;
                let end = *row == n;
                if end && *col == n {
                    reward += 1.0;
                }
                (reward, end)
            }
            Game::KeyCorridor { pos, has_key } => {
                if executed == 1 {
                    *pos = (*pos + 1).min(n - 1);
                } else {
                    *pos = pos.saturating_sub(1);
                }
                if *pos == 0 {
                    *has_key = true;
                }
                if *pos == n - 1 {
                    (if *has_key { 1.0 } else { 0.0 }, true)
                } else {
                    (0.0, false)
                }
            }
            Game::DenseGrid { x, y } => {
                let before = (n - 1 - *x) + (n - 1 - *y);
                match executed {
                    0 => *y = y.saturating_sub(1),
                    1 => *x = (*x + 1).min(n - 1),
                    2 => *y = (*y + 1).min(n - 1),
                    _ => *x = x.saturating_sub(1),
                }
                let after = (n - 1 - *x) + (n - 1 - *y);
                let unit = dense_grid_unit(n);
                let reward = match after.cmp(&before) {
                    std::cmp::Ordering::Less => unit,
                    std::cmp::Ordering::Greater => -unit,
                    std::cmp::Ordering::Equal => 0.0,
                };
                (reward, after == 0)
            }
            Game::MiniInvaders { gun, hits } => {
                let mut reward = 0.0;
                match executed {
                    0 => *gun = gun.saturating_sub(1),
                    1 => *gun = (*gun + 1).min(n - 1),
                    _ => {
                        if *gun == target_column(*hits, n) {
                            *hits += 1;
                            reward = 1.0;
                        }
                    }
                }
                (reward, false)
            }
        };

        self.t += 1;
        let truncated = !natural_end && self.t >= self.max_steps;
        let done = natural_end;
        self.finished = done || truncated;
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done,
            truncated,
        })
    }
}

/// Shaping reward per unit of Manhattan progress on a dense grid.
///
/// A power of two no larger than `1 / (2(N-1))`, so every partial return is
/// exact and the optimal return is `2(N-1) * unit <= 1`.
pub fn dense_grid_unit(size: usize) -> f64 {
    let path = (2 * (size - 1)) as f64;
    2f64.powi(-(path.log2().ceil() as i32))
}

fn target_column(hits: usize, n: usize) -> usize {
    (hits * 5 + 2) % n
}

/// Exact optimal undiscounted return of a deterministic spec.
pub fn optimal_return(spec: &EnvSpec) -> Result<f64, EnvError> {
    spec.validate()?;
    if !spec.is_deterministic() {
        return Err(EnvError::NotDeterministic);
    }
    let n = spec.size;
    let horizon = spec.effective_max_steps();
    match spec.name {
        EnvKind::DeepSea => {
            if horizon < n {
                // The goal cannot be reached before truncation; staying left is free.
                return Ok(0.0);
            }
            rollout(spec, &vec![1; n])
        }
        EnvKind::KeyCorridor => {
            let needed = n / 2 + (n - 1);
            Ok(if needed <= horizon { 1.0 } else { 0.0 })
        }
        EnvKind::DenseGrid => {
            let path = 2 * (n - 1);
            Ok(path.min(horizon) as f64 * dense_grid_unit(n))
        }
        EnvKind::MiniInvaders => enumerate_optimum(spec),
    }
}

/// Runs a fixed action sequence from reset and returns the achieved return.
pub fn rollout(spec: &EnvSpec, actions: &[usize]) -> Result<f64, EnvError> {
    let (mut env, _) = reset(spec)?;
    let mut ret = 0.0;
    for &a in actions {
        if env.is_finished() {
            break;
        }
        ret += env.step(a)?.reward;
    }
    Ok(ret)
}

/// Exhaustive search over all action sequences up to the horizon.
///
/// Sequences that end early are not extended, but the cap is applied to the
/// full `|A|^horizon` space regardless.
fn enumerate_optimum(spec: &EnvSpec) -> Result<f64, EnvError> {
    let num_actions = spec.name.num_actions();
    let horizon = spec.effective_max_steps();
    let space = (num_actions as u128).checked_pow(horizon as u32);
    match space {
        Some(s) if s <= MAX_ENUMERATION => {}
        _ => {
            return Err(EnvError::TooLargeToEnumerate {
                space: format!("{num_actions}^{horizon}"),
            })
        }
    }

    // Iterative DFS carrying (env, return so far).
    let (root, _) = reset(spec)?;
    let mut best = f64::NEG_INFINITY;
    let mut stack = vec![(root, 0.0f64)];
    while let Some((env, ret)) = stack.pop() {
        if env.is_finished() {
            best = best.max(ret);
            continue;
        }
        for a in 0..num_actions {
            let mut child = env.clone();
            let step = child.step(a)?;
            stack.push((child, ret + step.reward));
        }
    }
    Ok(best)
}
