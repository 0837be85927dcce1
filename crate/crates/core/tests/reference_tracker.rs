//! The incremental tracker against a naive one that recomputes everything
//! from the full episode stream with full sorts.

use subopt::log_io::{read_log, write_log, LogHeader};
use subopt::{
    run_experiment, AgentSpec, EnvKind, EnvSpec, EpisodeRecord, ExperienceTracker, MetricsPoint, PolicyMode,
    RunSchedule, TrackerConfig,
};

struct Naive {
    config: TrackerConfig,
    training: Vec<(u64, f64)>,
    greedy: Vec<f64>,
    first: Vec<f64>,
}

fn plain_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn k_for(n: usize) -> usize {
    n.div_ceil(20).max(1)
}

fn top_mean(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    plain_mean(&s[..k_for(s.len())])
}

fn tail(v: &[f64], n: usize) -> &[f64] {
    &v[v.len().saturating_sub(n)..]
}

impl Naive {
    fn record(&mut self, ep: &EpisodeRecord) {
        if self.first.len() < self.config.initial_episodes {
            self.first.push(ep.return_extrinsic);
        }
        match ep.policy_mode {
            PolicyMode::Greedy => self.greedy.push(ep.return_extrinsic),
            PolicyMode::Stochastic => self.training.push((ep.episode_id, ep.return_extrinsic)),
        }
    }

    fn check(&self, m: &MetricsPoint) {
        let returns: Vec<f64> = self.training.iter().map(|t| t.1).collect();
        let best = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(m.v_best_single, best);
        let close = |a: f64, b: f64, what: &str| assert!((a - b).abs() < 1e-12, "{what}: {a} vs {b}");
        close(m.v_top5_ever, top_mean(&returns), "top5_ever");
        close(
            m.v_top5_recent,
            top_mean(tail(&returns, self.config.recent_window)),
            "top5_recent",
        );
        close(
            m.v_learned,
            plain_mean(tail(&returns, self.config.eval_window)),
            "learned",
        );
        close(
            m.v_learned_greedy.unwrap(),
            plain_mean(tail(&self.greedy, self.config.eval_window)),
            "learned_greedy",
        );
        close(m.v_initial, plain_mean(&self.first), "initial");
    }
}

#[test]
fn deep_sea_run_matches_naive_tracker() {
    let env = EnvSpec::new(EnvKind::DeepSea, 10).with_seed(5);
    let mut agent = AgentSpec::q_learning(0.3);
    agent.seed = 5;
    agent.bonus_beta = 0.5;
    let config = TrackerConfig {
        recent_window: 50,
        ..TrackerConfig::default()
    };
    let schedule = RunSchedule {
        n_episodes: 2000,
        eval_every: 25,
        greedy_eval: true,
    };
    let run = run_experiment(&env, &agent, schedule, config, b"").unwrap();
    assert_eq!(run.metrics.len(), 80);

    let mut naive = Naive {
        config,
        training: Vec::new(),
        greedy: Vec::new(),
        first: Vec::new(),
    };
    let mut metrics = run.metrics.iter();
    let mut previous_best = f64::NEG_INFINITY;
    for ep in &run.episodes {
        naive.record(ep);
        if ep.policy_mode == PolicyMode::Greedy {
            let m = metrics.next().unwrap();
            naive.check(m);
            assert!(m.v_best_single >= previous_best);
            previous_best = m.v_best_single;
        }
    }
    assert!(metrics.next().is_none());

    let mut ranked = naive.training.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let kept: Vec<u64> = run.tracker.top_episodes().map(|e| e.episode_id).collect();
    let want: Vec<u64> = ranked.iter().take(config.top_capacity).map(|t| t.0).collect();
    assert_eq!(kept, want);
}

#[test]
fn initial_value_is_mean_of_logged_prefix() {
    let env = EnvSpec::new(EnvKind::DeepSea, 8).with_seed(9);
    let mut agent = AgentSpec::q_learning(0.0);
    agent.epsilon_end = 1.0;
    agent.seed = 9;
    let schedule = RunSchedule {
        n_episodes: 100,
        eval_every: 100,
        greedy_eval: false,
    };
    let config = TrackerConfig {
        initial_episodes: 32,
        ..TrackerConfig::default()
    };
    let run = run_experiment(&env, &agent, schedule, config, b"").unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("random.jsonl");
    write_log(&path, &LogHeader::from(&run.identity), &run.episodes).unwrap();
    let log = read_log(&path).unwrap();
    let prefix: Vec<f64> = log.episodes[..32].iter().map(|e| e.return_extrinsic).collect();
    let oracle = prefix.iter().sum::<f64>() / 32.0;

    let mut tracker = ExperienceTracker::new(config).unwrap();
    for ep in &log.episodes[..31] {
        tracker.record_episode(ep).unwrap();
    }
    assert!(tracker.freeze_initial_value().is_err());
    for ep in &log.episodes[31..] {
        tracker.record_episode(ep).unwrap();
    }
    let v = tracker.freeze_initial_value().unwrap();
    assert!((v - oracle).abs() < 1e-15, "{v} vs {oracle}");
    assert!(
        prefix.iter().any(|&r| r != prefix[0]),
        "random policy gives varied returns"
    );
}
