use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentSpec, RunSchedule};
use crate::env::EnvSpec;
use crate::tracker::TrackerConfig;
use crate::trajectory::config_digest;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config is not valid UTF-8")]
    Encoding,
    #[error("config parse error")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Everything needed to reproduce a set of runs.
///
/// ```toml
/// seeds = [0, 1, 2, 3]
/// n_episodes = 3000
/// eval_every = 50
/// greedy_eval = true
/// output_dir = "out/deep_sea"
///
/// [env]
/// name = "deep_sea"
/// size = 16
///
/// [agent]
/// kind = "q_learning"
/// learning_rate = 0.2
/// epsilon_decay_fraction = 0.1
///
/// [tracker]
/// recent_window = 100
/// ```
///
/// Per-run seeds override `env.seed` and `agent.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub n_episodes: usize,
    pub eval_every: usize,
    #[serde(default = "default_true")]
    pub greedy_eval: bool,
    pub output_dir: PathBuf,
    pub env: EnvSpec,
    pub agent: AgentSpec,
    #[serde(default)]
    pub tracker: TrackerConfig,
}

fn default_true() -> bool {
    true
}

/// A parsed config together with the exact bytes it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub bytes: Vec<u8>,
}

impl LoadedConfig {
    pub fn digest(&self) -> String {
        config_digest(&self.bytes)
    }
}

impl RunConfig {
    pub fn parse(bytes: &[u8]) -> Result<LoadedConfig, ConfigError> {
        let text = std::str::from_utf8(bytes).map_err(|_| ConfigError::Encoding)?;
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(LoadedConfig {
            config,
            bytes: bytes.to_vec(),
        })
    }

    pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&bytes)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".into()));
        }
        if self.n_episodes == 0 || self.eval_every == 0 {
            return Err(ConfigError::Invalid(
                "n_episodes and eval_every must be positive".into(),
            ));
        }
        self.env.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.agent.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.tracker
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn schedule(&self) -> RunSchedule {
        RunSchedule {
            n_episodes: self.n_episodes,
            eval_every: self.eval_every,
            greedy_eval: self.greedy_eval,
        }
    }

    /// Env and agent specs for one seed.
    pub fn specs_for_seed(&self, seed: u64) -> (EnvSpec, AgentSpec) {
        let env = self.env.clone().with_seed(seed);
        let mut agent = self.agent.clone();
        agent.seed = seed;
        (env, agent)
    }

    /// File stem shared by the log and curve table of one seed.
    pub fn run_stem(&self, seed: u64) -> String {
        format!("{}_{}_seed{}", self.env.name, self.agent.algorithm_name(), seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentKind;
    use crate::env::EnvKind;

    const MINIMAL: &str = r#"
seeds = [1, 2]
n_episodes = 10
eval_every = 5
output_dir = "out"

[env]
name = "deep_sea"
size = 8

[agent]
kind = "q_learning"
learning_rate = 0.1
"#;

    #[test]
    fn parses_with_defaults() {
        let loaded = RunConfig::parse(MINIMAL.as_bytes()).unwrap();
        let c = &loaded.config;
        assert_eq!(c.env.name, EnvKind::DeepSea);
        assert_eq!(c.agent.kind, AgentKind::QLearning);
        assert_eq!(c.agent.epsilon_end, 0.05);
        assert_eq!(c.tracker, TrackerConfig::default());
        assert!(c.greedy_eval);
        let (env, agent) = c.specs_for_seed(2);
        assert_eq!((env.seed, agent.seed), (2, 2));
        assert_eq!(c.run_stem(2), "deep_sea_q_learning_seed2");
        assert_eq!(loaded.digest(), config_digest(MINIMAL.as_bytes()));
    }

    #[test]
    fn rejects_bad_configs() {
        let empty_seeds = MINIMAL.replace("seeds = [1, 2]", "seeds = []");
        assert!(matches!(
            RunConfig::parse(empty_seeds.as_bytes()),
            Err(ConfigError::Invalid(_))
        ));
        let unknown = format!("{MINIMAL}\n[tracker]\nwindow = 3\n");
        assert!(matches!(
            RunConfig::parse(unknown.as_bytes()),
            Err(ConfigError::Parse(_))
        ));
        let bad_fraction = format!("{MINIMAL}\n[tracker]\nfraction = 0.0\n");
        assert!(RunConfig::parse(bad_fraction.as_bytes()).is_err());
        let bad_env = MINIMAL.replace("size = 8", "size = 0");
        assert!(RunConfig::parse(bad_env.as_bytes()).is_err());
    }
}
