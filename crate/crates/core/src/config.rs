//! Run configuration and its line-oriented `key = value` text format.
//!
//! Parsing starts from the reference hyperparameters (3×512 tanh networks,
//! learning rates 1e-3, SAC α = 0.05, ...). `preset = desk` swaps in the
//! small-network, CPU-sized values used by the test suite and the CLI
//! examples; it is applied before any other key regardless of position.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Dipper,
    DipperNoV,
    DpoFlat,
    Hier,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Dipper,
        Algorithm::DipperNoV,
        Algorithm::DpoFlat,
        Algorithm::Hier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dipper => "DIPPER",
            Algorithm::DipperNoV => "DIPPER_NO_V",
            Algorithm::DpoFlat => "DPO_FLAT",
            Algorithm::Hier => "HIER",
        }
    }

    pub fn is_hierarchical(self) -> bool {
        self != Algorithm::DpoFlat
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("algorithm", format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Reference,
    Desk,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Reference => "reference",
            Preset::Desk => "desk",
        }
    }
}

/// How synthetic preferences turn scores into labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    Deterministic,
    BradleyTerry,
}

/// Which task-progress score the preference oracle compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    SparseFinalReward,
    NegativeGoalDistance,
    /// Shortest-path steps through the maze instead of straight-line distance.
    NegativePathDistance,
    /// Minus the decisions taken and the closest shortest-path distance to
    /// the goal: faster success and closer approach both score higher.
    Progress,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub algorithm: Algorithm,
    pub width: usize,
    pub height: usize,
    /// Lower-level achievement radius (cells).
    pub epsilon: f64,
    /// Final-goal success radius (cells).
    pub delta: f64,
    /// Subgoal emissions per episode (T).
    pub horizon_high: usize,
    /// Primitive steps per subgoal window (K).
    pub horizon_low: usize,
    pub beta: f64,
    pub lambda: f64,
    /// Lower-level SAC entropy weight α.
    pub entropy_weight: f64,
    pub gamma: f64,
    pub gamma_high: f64,
    pub activation: Activation,
    pub layers: usize,
    pub hidden: usize,
    pub q_lr: f64,
    pub pi_lr: f64,
    pub value_lr: f64,
    pub dpo_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub buffer_size: usize,
    pub pair_buffer_size: usize,
    pub n_cycles: usize,
    pub n_batches: usize,
    pub batch_size: usize,
    pub reward_batch_size: usize,
    pub random_eps: f64,
    pub polyak: f64,
    pub m_relabel: usize,
    pub m_value: usize,
    pub total_steps: usize,
    pub cycle_steps: usize,
    pub eval_episodes: usize,
    pub oracle_mode: OracleMode,
    pub scoring: Scoring,
    pub tie_tolerance: f64,
    /// Measure higher-level log-probabilities against a uniform policy.
    pub uniform_reference: bool,
    /// Center the value term on the batch mean value per step.
    pub value_baseline: bool,
    pub seeds: Vec<u64>,
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl RunConfig {
    /// Reference hyperparameters.
    pub fn reference() -> Self {
        Self {
            preset: Preset::Reference,
            algorithm: Algorithm::Dipper,
            width: 8,
            height: 8,
            epsilon: 1.5,
            delta: 1.5,
            horizon_high: 15,
            horizon_low: 15,
            beta: 1.0,
            lambda: 0.5,
            entropy_weight: 0.05,
            gamma: 0.95,
            gamma_high: 0.95,
            activation: Activation::Tanh,
            layers: 3,
            hidden: 512,
            q_lr: 0.001,
            pi_lr: 0.001,
            value_lr: 0.001,
            dpo_lr: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            buffer_size: 10_000_000,
            pair_buffer_size: 2_000,
            n_cycles: 1,
            n_batches: 10,
            batch_size: 1024,
            reward_batch_size: 50,
            random_eps: 0.2,
            polyak: 0.05,
            m_relabel: 2_000,
            m_value: 10,
            total_steps: 300_000,
            cycle_steps: 1_000,
            eval_episodes: 20,
            oracle_mode: OracleMode::Deterministic,
            scoring: Scoring::NegativeGoalDistance,
            tie_tolerance: 1e-9,
            uniform_reference: false,
            value_baseline: false,
            seeds: vec![0, 1, 2, 3, 4],
            record_wall_time: false,
        }
    }

    /// Small networks and budgets sized for a single laptop core.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            layers: 2,
            hidden: 64,
            buffer_size: 100_000,
            batch_size: 128,
            n_batches: 40,
            n_cycles: 10,
            entropy_weight: 0.005,
            beta: 5.0,
            oracle_mode: OracleMode::BradleyTerry,
            scoring: Scoring::Progress,
            uniform_reference: true,
            total_steps: 300_000,
            ..Self::reference()
        }
    }

    /// Episode budget L = T·K.
    pub fn episode_budget(&self) -> usize {
        self.horizon_high * self.horizon_low
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        vec![self.hidden; self.layers]
    }

    /// Effective regularization weight: DIPPER-No-V always runs with λ = 0.
    pub fn effective_lambda(&self) -> f64 {
        match self.algorithm {
            Algorithm::DipperNoV => 0.0,
            _ => self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, key: &str, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, msg))
            }
        }
        check(self.width >= 5, "W", "must be at least 5")?;
        check(self.height >= 5, "H", "must be at least 5")?;
        check(self.epsilon > 0.0, "epsilon", "must be positive")?;
        check(self.delta > 0.0, "delta", "must be positive")?;
        check(self.horizon_high >= 1, "T", "must be at least 1")?;
        check(self.horizon_low >= 1, "K", "must be at least 1")?;
        check(self.beta > 0.0 && self.beta.is_finite(), "beta", "must be positive")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda", "must be non-negative")?;
        check(self.entropy_weight >= 0.0, "alpha", "must be non-negative")?;
        check(self.gamma > 0.0 && self.gamma < 1.0, "gamma", "must lie in (0, 1)")?;
        check(self.gamma_high > 0.0 && self.gamma_high < 1.0, "gamma_high", "must lie in (0, 1)")?;
        check(self.layers >= 1, "layers", "must be at least 1")?;
        check(self.hidden >= 1, "hidden", "must be at least 1")?;
        for (key, lr) in [
            ("Q_lr", self.q_lr),
            ("pi_lr", self.pi_lr),
            ("value_lr", self.value_lr),
            ("dpo_lr", self.dpo_lr),
        ] {
            check(lr > 0.0 && lr.is_finite(), key, "must be positive")?;
        }
        check((0.0..1.0).contains(&self.adam_beta1), "adam_beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.adam_beta2), "adam_beta2", "must lie in [0, 1)")?;
        check(self.buffer_size >= 1, "buffer_size", "must be positive")?;
        check(self.pair_buffer_size >= 1, "pair_buffer_size", "must be positive")?;
        check(self.n_cycles >= 1, "n_cycles", "must be positive")?;
        check(self.batch_size >= 1, "batch_size", "must be positive")?;
        check(self.reward_batch_size >= 1, "reward_batch_size", "must be positive")?;
        check((0.0..=1.0).contains(&self.random_eps), "random_eps", "must lie in [0, 1]")?;
        check(self.polyak > 0.0 && self.polyak <= 1.0, "polyak", "must lie in (0, 1]")?;
        check(self.m_relabel >= 1, "m_relabel", "must be positive")?;
        check(self.cycle_steps >= 1, "cycle_steps", "must be positive")?;
        check(self.total_steps >= 1, "total_steps", "must be positive")?;
        check(self.eval_episodes >= 1, "eval_episodes", "must be positive")?;
        check(self.tie_tolerance >= 0.0, "tie_tolerance", "must be non-negative")?;
        check(!self.seeds.is_empty(), "seeds", "needs at least one seed")?;
        Ok(())
    }

    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => {
                *self = match value {
                    "reference" => Self::reference(),
                    "desk" => Self::desk(),
                    _ => return Err(Error::config(key, format!("unknown preset `{value}`"))),
                }
            }
            "algorithm" => self.algorithm = value.parse()?,
            "W" => self.width = parse_usize(key, value)?,
            "H" => self.height = parse_usize(key, value)?,
            "epsilon" => self.epsilon = parse_f64(key, value)?,
            "delta" => self.delta = parse_f64(key, value)?,
            "T" => self.horizon_high = parse_usize(key, value)?,
            "K" => self.horizon_low = parse_usize(key, value)?,
            "beta" => self.beta = parse_f64(key, value)?,
            "lambda" => self.lambda = parse_f64(key, value)?,
            "alpha" => self.entropy_weight = parse_f64(key, value)?,
            "gamma" => self.gamma = parse_f64(key, value)?,
            "gamma_high" => self.gamma_high = parse_f64(key, value)?,
            "activation" => {
                self.activation = match value {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    _ => return Err(Error::config(key, format!("unknown activation `{value}`"))),
                }
            }
            "layers" => self.layers = parse_usize(key, value)?,
            "hidden" => self.hidden = parse_usize(key, value)?,
            "Q_lr" => self.q_lr = parse_f64(key, value)?,
            "pi_lr" => self.pi_lr = parse_f64(key, value)?,
            "value_lr" => self.value_lr = parse_f64(key, value)?,
            "dpo_lr" => self.dpo_lr = parse_f64(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_f64(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_f64(key, value)?,
            "buffer_size" => self.buffer_size = parse_usize(key, value)?,
            "pair_buffer_size" => self.pair_buffer_size = parse_usize(key, value)?,
            "n_cycles" => self.n_cycles = parse_usize(key, value)?,
            "n_batches" => self.n_batches = parse_usize(key, value)?,
            "batch_size" => self.batch_size = parse_usize(key, value)?,
            "reward_batch_size" => self.reward_batch_size = parse_usize(key, value)?,
            "random_eps" => self.random_eps = parse_f64(key, value)?,
            "polyak" => self.polyak = parse_f64(key, value)?,
            "m_relabel" => self.m_relabel = parse_usize(key, value)?,
            "m_value" => self.m_value = parse_usize(key, value)?,
            "total_steps" => self.total_steps = parse_usize(key, value)?,
            "cycle_steps" => self.cycle_steps = parse_usize(key, value)?,
            "eval_episodes" => self.eval_episodes = parse_usize(key, value)?,
            "oracle" => {
                self.oracle_mode = match value {
                    "deterministic" => OracleMode::Deterministic,
                    "bradley_terry" => OracleMode::BradleyTerry,
                    _ => return Err(Error::config(key, format!("unknown oracle mode `{value}`"))),
                }
            }
            "scorer" => {
                self.scoring = match value {
                    "sparse_final_reward" => Scoring::SparseFinalReward,
                    "negative_goal_distance" => Scoring::NegativeGoalDistance,
                    "negative_path_distance" => Scoring::NegativePathDistance,
                    "progress" => Scoring::Progress,
                    _ => return Err(Error::config(key, format!("unknown scorer `{value}`"))),
                }
            }
            "tie_tolerance" => self.tie_tolerance = parse_f64(key, value)?,
            "reference" => {
                self.uniform_reference = match value {
                    "none" => false,
                    "uniform" => true,
                    _ => return Err(Error::config(key, format!("unknown reference `{value}`; use none or uniform"))),
                }
            }
            "value_baseline" => {
                self.value_baseline = match value {
                    "none" => false,
                    "batch_mean" => true,
                    _ => return Err(Error::config(key, format!("unknown value baseline `{value}`; use none or batch_mean"))),
                }
            }
            "seeds" => self.seeds = parse_seed_list(value)?,
            "wall_time" => {
                self.record_wall_time = value
                    .parse()
                    .map_err(|_| Error::config(key, format!("expected true/false, got `{value}`")))?
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Render in the same format `parse_config` reads.
    pub fn render(&self) -> String {
        let activation = match self.activation {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        };
        let oracle = match self.oracle_mode {
            OracleMode::Deterministic => "deterministic",
            OracleMode::BradleyTerry => "bradley_terry",
        };
        let scorer = match self.scoring {
            Scoring::SparseFinalReward => "sparse_final_reward",
            Scoring::NegativeGoalDistance => "negative_goal_distance",
            Scoring::NegativePathDistance => "negative_path_distance",
            Scoring::Progress => "progress",
        };
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let entries: Vec<(&str, String)> = vec![
            ("preset", self.preset.name().into()),
            ("algorithm", self.algorithm.name().into()),
            ("W", self.width.to_string()),
            ("H", self.height.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("delta", self.delta.to_string()),
            ("T", self.horizon_high.to_string()),
            ("K", self.horizon_low.to_string()),
            ("beta", self.beta.to_string()),
            ("lambda", self.lambda.to_string()),
            ("alpha", self.entropy_weight.to_string()),
            ("gamma", self.gamma.to_string()),
            ("gamma_high", self.gamma_high.to_string()),
            ("activation", activation.into()),
            ("layers", self.layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("Q_lr", self.q_lr.to_string()),
            ("pi_lr", self.pi_lr.to_string()),
            ("value_lr", self.value_lr.to_string()),
            ("dpo_lr", self.dpo_lr.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("buffer_size", self.buffer_size.to_string()),
            ("pair_buffer_size", self.pair_buffer_size.to_string()),
            ("n_cycles", self.n_cycles.to_string()),
            ("n_batches", self.n_batches.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("reward_batch_size", self.reward_batch_size.to_string()),
            ("random_eps", self.random_eps.to_string()),
            ("polyak", self.polyak.to_string()),
            ("m_relabel", self.m_relabel.to_string()),
            ("m_value", self.m_value.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("cycle_steps", self.cycle_steps.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("oracle", oracle.into()),
            ("scorer", scorer.into()),
            ("tie_tolerance", self.tie_tolerance.to_string()),
            ("reference", if self.uniform_reference { "uniform" } else { "none" }.into()),
            ("value_baseline", if self.value_baseline { "batch_mean" } else { "none" }.into()),
            ("seeds", seeds),
            ("wall_time", self.record_wall_time.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::config(key, format!("expected a number, got `{value}`")))
}

/// Integers may be written as `1000` or `1e7`.
fn parse_usize(key: &str, value: &str) -> Result<usize> {
    if let Ok(v) = value.parse::<usize>() {
        return Ok(v);
    }
    match value.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v <= usize::MAX as f64 => Ok(v as usize),
        _ => Err(Error::config(key, format!("expected a non-negative integer, got `{value}`"))),
    }
}

pub fn parse_seed_list(value: &str) -> Result<Vec<u64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| Error::config("seeds", format!("bad seed `{s}`")))
        })
        .collect()
}

/// Split text into `(key, value)` assignments. Several assignments may share
/// a line; `#` starts a comment.
pub fn assignments(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("");
        let line = line.split('=').map(str::trim).collect::<Vec<_>>().join("=");
        for token in line.split_whitespace() {
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got `{token}`")))?;
            if k.is_empty() || v.is_empty() {
                return Err(Error::Parse(format!("incomplete assignment `{token}`")));
            }
            out.push((k.to_string(), v.to_string()));
        }
    }
    Ok(out)
}

/// Parse `key = value` text on top of the reference defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    apply_assignments(RunConfig::reference(), &assignments(text)?)
}

/// Apply assignments to `base` (preset first), then validate.
pub fn apply_assignments(base: RunConfig, pairs: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = base;
    for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
        cfg.set(k, v)?;
    }
    let mut budget = None;
    for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
        if k == "L" {
            budget = Some(parse_usize(k, v)?);
        } else {
            cfg.set(k, v)?;
        }
    }
    if let Some(l) = budget {
        if l != cfg.episode_budget() {
            return Err(Error::config(
                "L",
                format!("must equal T*K = {}", cfg.episode_budget()),
            ));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn beta_alone_fills_reference_defaults() {
        let cfg = parse_config("beta=0.05").unwrap();
        assert_eq!(cfg.beta, 0.05);
        assert_eq!(cfg.hidden, 512);
        assert_eq!(cfg.layers, 3);
        assert_eq!(cfg.q_lr, 0.001);
        assert_eq!(cfg.pi_lr, 0.001);
        assert_eq!(cfg.entropy_weight, 0.05);
        assert_eq!(cfg.batch_size, 1024);
        assert_eq!(cfg.buffer_size, 10_000_000);
        assert_eq!(cfg.activation, Activation::Tanh);
    }

    #[test]
    fn negative_beta_names_key() {
        match parse_config("beta=-1") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "beta"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_names_key() {
        match parse_config("bogus = 3") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "bogus"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn episode_budget_from_horizons() {
        let cfg = parse_config("T=15 K=15").unwrap();
        assert_eq!(cfg.episode_budget(), 225);
        assert!(parse_config("T=15 K=15 L=225").is_ok());
        assert!(parse_config("T=15 K=15 L=200").is_err());
    }

    #[test]
    fn comments_and_spacing() {
        let cfg = parse_config("# header\npreset = desk\nlambda = 0.25 # trailing\n\nbuffer_size = 1e4\n").unwrap();
        assert_eq!(cfg.preset, Preset::Desk);
        assert_eq!(cfg.hidden, 64);
        assert_eq!(cfg.lambda, 0.25);
        assert_eq!(cfg.buffer_size, 10_000);
    }

    #[test]
    fn preset_applies_before_other_keys() {
        let cfg = parse_config("hidden = 32\npreset = desk").unwrap();
        assert_eq!(cfg.hidden, 32);
    }

    #[test]
    fn scorer_and_reference_keys() {
        let cfg = parse_config("scorer = progress\nreference = uniform\noracle = bradley_terry").unwrap();
        assert_eq!(cfg.scoring, Scoring::Progress);
        assert!(cfg.uniform_reference);
        assert_eq!(cfg.oracle_mode, OracleMode::BradleyTerry);
        assert!(parse_config("reference = learned").is_err());
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(
            beta in 1e-3f64..10.0,
            lambda in 0.0f64..5.0,
            t in 1usize..30,
            k in 1usize..30,
            seeds in proptest::collection::vec(any::<u64>(), 1..6),
            desk in any::<bool>(),
            alg in 0usize..4,
            scorer in 0usize..4,
            bt in any::<bool>(),
            uniform in any::<bool>(),
            centered in any::<bool>(),
        ) {
            let mut cfg = if desk { RunConfig::desk() } else { RunConfig::reference() };
            cfg.beta = beta;
            cfg.lambda = lambda;
            cfg.horizon_high = t;
            cfg.horizon_low = k;
            cfg.seeds = seeds;
            cfg.algorithm = Algorithm::ALL[alg];
            cfg.scoring = [
                Scoring::SparseFinalReward,
                Scoring::NegativeGoalDistance,
                Scoring::NegativePathDistance,
                Scoring::Progress,
            ][scorer];
            cfg.oracle_mode = if bt { OracleMode::BradleyTerry } else { OracleMode::Deterministic };
            cfg.uniform_reference = uniform;
            cfg.value_baseline = centered;
            let back = parse_config(&cfg.render()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
