//! End-to-end training loop for every algorithm, evaluation, and sweeps.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::buffer::{PreferenceDataset, ReplayBuffer};
use crate::config::{Algorithm, RunConfig};
use crate::env::{generate_maze, GridEnv, Layout};
use crate::error::{Error, Result};
use crate::features::Encoder;
use crate::harness::metrics::{lower_q_metric, subgoal_distance, WindowRecord};
use crate::harness::report::{EpochRow, RunReport};
use crate::higher::{dipper_loss_and_grad, dpo_flat_loss_and_grad, DpoBatch, FlatPolicy, HigherPolicy};
use crate::lower::{rollout_lower, ActMode, DiscreteSac, LowerAgent, SacBatch, SacSettings, ValueNet};
use crate::model::{FlatPair, FlatTrajectory, HighStep, HighTrajectory, HighTransition, LowTransition, Subgoal, TrajectoryPair};
use crate::preference::{label_pair, relabel_dataset, OracleSpec};
use crate::rng::RunRng;

/// The higher level of a run, or the flat agent when there is none.
#[derive(Debug, Clone)]
pub enum HighLevel {
    Dpo(HigherPolicy),
    Sac { sac: DiscreteSac, encoder: Encoder },
    Flat(FlatPolicy),
}

impl HighLevel {
    pub fn new<R: Rng>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        Ok(match cfg.algorithm {
            Algorithm::Dipper | Algorithm::DipperNoV => HighLevel::Dpo(HigherPolicy::new(cfg, rng)?),
            Algorithm::Hier => {
                let encoder = Encoder::new(cfg.width, cfg.height);
                let sac = DiscreteSac::new(
                    encoder.higher_dim(),
                    cfg.hidden_dims(),
                    cfg.activation,
                    cfg.width * cfg.height,
                    SacSettings::from_config(cfg, cfg.gamma_high),
                    rng,
                )?;
                HighLevel::Sac { sac, encoder }
            }
            Algorithm::DpoFlat => HighLevel::Flat(FlatPolicy::new(cfg, rng)?),
        })
    }

    pub fn choose_subgoal<R: Rng>(&self, state: &crate::model::GoalState, mode: ActMode, rng: &mut R) -> Result<Subgoal> {
        match self {
            HighLevel::Dpo(p) => p.sample_subgoal(state, mode, rng),
            HighLevel::Sac { sac, encoder } => {
                let idx = sac.act(&encoder.higher_row(state), mode, rng)?;
                Ok(Subgoal::new(encoder.cell_of(idx)))
            }
            HighLevel::Flat(_) => Err(Error::Unsupported("the flat agent emits no subgoals".into())),
        }
    }
}

/// Everything one hierarchical episode produced.
#[derive(Debug, Clone)]
pub struct HierEpisode {
    pub trajectory: HighTrajectory,
    pub windows: Vec<WindowRecord>,
    pub low: Vec<LowTransition>,
    pub high: Vec<HighTransition>,
    pub success: bool,
    pub steps: usize,
}

/// Up to `T` subgoal windows of at most `K` primitive steps each.
#[allow(clippy::too_many_arguments)]
pub fn hier_episode(
    cfg: &RunConfig,
    layout: &Layout,
    high: &HighLevel,
    lower: &LowerAgent,
    mode: ActMode,
    random_eps: f64,
    rng_high: &mut ChaCha8Rng,
    rng_low: &mut ChaCha8Rng,
) -> Result<HierEpisode> {
    let mut env = GridEnv::new(layout.clone(), cfg.episode_budget(), cfg.delta)?;
    env.reset();
    let mut steps = Vec::new();
    let mut windows = Vec::new();
    let mut low = Vec::new();
    let mut high_tr = Vec::new();
    let mut success = false;
    for _ in 0..cfg.horizon_high {
        if env.is_done() {
            break;
        }
        let state = env.state().clone();
        let subgoal = high.choose_subgoal(&state, mode, rng_high)?;
        let out = rollout_lower(lower, &mut env, subgoal, cfg.horizon_low, mode, random_eps, rng_low)?;
        success |= out.env_reward > 0.0;
        windows.push(WindowRecord {
            state: state.clone(),
            subgoal,
            end: out.end_state.position,
        });
        high_tr.push(HighTransition {
            state: state.clone(),
            subgoal,
            env_reward: out.env_reward,
            next_state: out.end_state.clone(),
            done: out.env_reward > 0.0,
        });
        steps.push(HighStep { state, subgoal });
        low.extend(out.transitions);
    }
    Ok(HierEpisode {
        trajectory: HighTrajectory {
            steps,
            end_state: env.state().clone(),
        },
        windows,
        low,
        high: high_tr,
        success,
        steps: env.steps(),
    })
}

/// One episode of the flat agent over the full primitive budget `T·K`.
pub fn flat_episode(
    cfg: &RunConfig,
    layout: &Layout,
    policy: &FlatPolicy,
    mode: ActMode,
    random_eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(FlatTrajectory, bool)> {
    let mut env = GridEnv::new(layout.clone(), cfg.episode_budget(), cfg.delta)?;
    env.reset();
    let mut steps = Vec::new();
    let mut success = false;
    while !env.is_done() {
        let state = env.state().clone();
        let action = if random_eps > 0.0 && rng.gen::<f64>() < random_eps {
            crate::model::Action::from_index(rng.gen_range(0..crate::model::Action::COUNT))
        } else {
            policy.act(&state, mode, rng)?
        };
        success |= env.step(action)?.env_reward > 0.0;
        steps.push((state, action));
    }
    Ok((
        FlatTrajectory {
            steps,
            end_state: env.state().clone(),
        },
        success,
    ))
}

#[derive(Debug, Default)]
struct Mean {
    total: f64,
    count: usize,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.total += v;
        self.count += 1;
    }

    fn get(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.total / self.count as f64
        }
    }
}

/// Greedy evaluation on freshly generated mazes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub success_rate: f64,
    pub subgoal_distance: f64,
    pub lower_q: f64,
}

pub fn evaluate(
    cfg: &RunConfig,
    high: &HighLevel,
    lower: Option<&LowerAgent>,
    value: Option<&ValueNet>,
    maze_rng: &mut ChaCha8Rng,
) -> Result<Evaluation> {
    // Greedy acting draws no randomness; these only satisfy the signatures.
    let mut idle_a = crate::rng::stream(0, crate::rng::Stream::Eval);
    let mut idle_b = idle_a.clone();
    let mut successes = 0usize;
    let mut windows = Vec::new();
    for _ in 0..cfg.eval_episodes {
        let layout = generate_maze(maze_rng.gen(), cfg.width, cfg.height, cfg.delta)?.layout();
        let success = match (high, lower) {
            (HighLevel::Flat(p), _) => flat_episode(cfg, &layout, p, ActMode::Greedy, 0.0, &mut idle_a)?.1,
            (_, Some(lower)) => {
                let ep = hier_episode(cfg, &layout, high, lower, ActMode::Greedy, 0.0, &mut idle_a, &mut idle_b)?;
                windows.extend(ep.windows);
                ep.success
            }
            (_, None) => return Err(Error::Unsupported("hierarchical evaluation needs a lower agent".into())),
        };
        successes += success as usize;
    }
    let lower_q = match value {
        Some(v) => lower_q_metric(&windows, |s, g| v.predict(s, g))?,
        None => None,
    };
    Ok(Evaluation {
        success_rate: successes as f64 / cfg.eval_episodes as f64,
        subgoal_distance: subgoal_distance(&windows).unwrap_or(f64::NAN),
        lower_q: lower_q.unwrap_or(f64::NAN),
    })
}

fn check_finite(v: f64, context: &str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::non_finite(context, step))
    }
}

fn encode_high_batch(encoder: &Encoder, batch: &[&HighTransition]) -> SacBatch {
    SacBatch {
        states: encoder.higher_matrix(batch.iter().map(|t| &t.state)),
        actions: batch.iter().map(|t| encoder.index_of(t.subgoal.cell)).collect(),
        rewards: batch.iter().map(|t| t.env_reward).collect(),
        next_states: encoder.higher_matrix(batch.iter().map(|t| &t.next_state)),
        dones: batch.iter().map(|t| t.done).collect(),
    }
}

/// Value-annotated DPO batch; with `lambda = 0` the values are skipped.
fn dpo_batch(cfg: &RunConfig, pairs: Vec<TrajectoryPair>, value: &ValueNet, lambda: f64) -> Result<DpoBatch> {
    let mut batch = value_batch(pairs, value, lambda)?;
    if cfg.value_baseline {
        batch = batch.with_mean_value_baseline();
    }
    Ok(if cfg.uniform_reference {
        batch.with_uniform_reference(cfg.width * cfg.height)
    } else {
        batch
    })
}

fn value_batch(pairs: Vec<TrajectoryPair>, value: &ValueNet, lambda: f64) -> Result<DpoBatch> {
    if lambda == 0.0 {
        return Ok(DpoBatch::without_values(pairs));
    }
    let rows = pairs
        .iter()
        .flat_map(|p| p.tau1.steps.iter().chain(&p.tau2.steps))
        .map(|s| (&s.state, s.subgoal))
        .collect::<Vec<_>>();
    let all = value.predict_many(rows.into_iter())?;
    let mut it = all.into_iter();
    let values = pairs
        .iter()
        .map(|p| {
            let v1: Vec<f64> = it.by_ref().take(p.tau1.len()).collect();
            let v2: Vec<f64> = it.by_ref().take(p.tau2.len()).collect();
            (v1, v2)
        })
        .collect();
    DpoBatch::new(pairs, values)
}

struct Run<'a> {
    cfg: &'a RunConfig,
    rng: RunRng,
    oracle: OracleSpec,
    high: HighLevel,
    lower: Option<LowerAgent>,
    value: Option<ValueNet>,
    low_buf: ReplayBuffer<LowTransition>,
    high_buf: ReplayBuffer<HighTransition>,
    pairs: PreferenceDataset<TrajectoryPair>,
    flat_pairs: PreferenceDataset<FlatPair>,
    env_steps: usize,
    updates: u64,
}

#[derive(Default)]
struct EpochLosses {
    higher: Mean,
    critic: Mean,
    actor: Mean,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RunRng::new(seed);
        let high = HighLevel::new(cfg, &mut rng.init)?;
        let (lower, value) = if cfg.algorithm.is_hierarchical() {
            (Some(LowerAgent::new(cfg, &mut rng.init)?), Some(ValueNet::new(cfg, &mut rng.init)?))
        } else {
            (None, None)
        };
        Ok(Self {
            cfg,
            rng,
            oracle: OracleSpec::from_config(cfg)?,
            high,
            lower,
            value,
            low_buf: ReplayBuffer::new(cfg.buffer_size)?,
            high_buf: ReplayBuffer::new(cfg.buffer_size)?,
            pairs: PreferenceDataset::new(cfg.pair_buffer_size)?,
            flat_pairs: PreferenceDataset::new(cfg.pair_buffer_size)?,
            env_steps: 0,
            updates: 0,
        })
    }

    /// Two episodes on one fresh maze, stored as a labelled pair.
    fn collect_pair(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let layout = generate_maze(self.rng.env.gen(), cfg.width, cfg.height, cfg.delta)?.layout();
        if let HighLevel::Flat(policy) = &self.high {
            let (t1, _) = flat_episode(cfg, &layout, policy, ActMode::Sample, cfg.random_eps, &mut self.rng.higher)?;
            let (t2, _) = flat_episode(cfg, &layout, policy, ActMode::Sample, cfg.random_eps, &mut self.rng.higher)?;
            self.env_steps += t1.steps.len() + t2.steps.len();
            let label = label_pair(&t1, &t2, &self.oracle, &mut self.rng.preference);
            self.flat_pairs.push_pair(FlatPair { tau1: t1, tau2: t2, label });
            return Ok(());
        }
        let lower = self.lower.as_ref().expect("hierarchical runs own a lower agent");
        let mut eps = Vec::with_capacity(2);
        for _ in 0..2 {
            let ep = hier_episode(
                cfg,
                &layout,
                &self.high,
                lower,
                ActMode::Sample,
                cfg.random_eps,
                &mut self.rng.higher,
                &mut self.rng.lower,
            )?;
            self.env_steps += ep.steps;
            self.low_buf.extend(ep.low);
            self.high_buf.extend(ep.high);
            eps.push(ep.trajectory);
        }
        let t2 = eps.pop().expect("two episodes");
        let t1 = eps.pop().expect("two episodes");
        let label = label_pair(&t1, &t2, &self.oracle, &mut self.rng.preference);
        self.pairs.push_pair(TrajectoryPair::new(t1, t2, label)?);
        Ok(())
    }

    fn update_higher(&mut self, losses: &mut EpochLosses) -> Result<()> {
        let cfg = self.cfg;
        let step = self.updates;
        match &mut self.high {
            HighLevel::Dpo(policy) => {
                if self.pairs.is_empty() {
                    return Ok(());
                }
                let n = cfg.reward_batch_size.min(self.pairs.len());
                let pairs: Vec<TrajectoryPair> =
                    self.pairs.sample_pairs(n, &mut self.rng.higher)?.into_iter().cloned().collect();
                let value = self.value.as_ref().expect("hierarchical runs own a value net");
                let lambda = cfg.effective_lambda();
                let batch = dpo_batch(cfg, pairs, value, lambda)?;
                let (loss, grad) = dipper_loss_and_grad(policy, &batch, cfg.beta, lambda)?;
                losses.higher.push(check_finite(loss, "higher DPO loss", step)?);
                policy.policy.apply_gradient(&grad)?;
            }
            HighLevel::Sac { sac, encoder } => {
                if self.high_buf.is_empty() {
                    return Ok(());
                }
                let batch = self.high_buf.sample(cfg.batch_size, &mut self.rng.higher)?;
                let l = sac.update(&encode_high_batch(encoder, &batch))?;
                losses.higher.push(check_finite(l.critic, "higher critic loss", step)?);
            }
            HighLevel::Flat(policy) => {
                if self.flat_pairs.is_empty() {
                    return Ok(());
                }
                let n = cfg.reward_batch_size.min(self.flat_pairs.len());
                let pairs = self.flat_pairs.sample_pairs(n, &mut self.rng.higher)?;
                let (loss, grad) = dpo_flat_loss_and_grad(policy, &pairs, cfg.beta)?;
                losses.higher.push(check_finite(loss, "flat DPO loss", step)?);
                policy.policy.apply_gradient(&grad)?;
            }
        }
        Ok(())
    }

    fn update_lower(&mut self, losses: &mut EpochLosses) -> Result<()> {
        let Some(lower) = self.lower.as_mut() else {
            return Ok(());
        };
        if self.low_buf.is_empty() {
            return Ok(());
        }
        let batch = self.low_buf.sample(self.cfg.batch_size, &mut self.rng.lower)?;
        let l = lower.sac_update(&batch)?;
        losses.critic.push(l.critic);
        losses.actor.push(l.actor);
        Ok(())
    }

    fn cycle(&mut self, losses: &mut EpochLosses, next_relabel: &mut usize) -> Result<()> {
        let cfg = self.cfg;
        let end = (self.env_steps + cfg.cycle_steps).min(cfg.total_steps);
        while self.env_steps < end {
            self.collect_pair()?;
        }
        if self.env_steps >= *next_relabel {
            relabel_dataset(&mut self.pairs, &self.oracle, &mut self.rng.preference);
            relabel_dataset(&mut self.flat_pairs, &self.oracle, &mut self.rng.preference);
            while *next_relabel <= self.env_steps {
                *next_relabel += cfg.m_relabel;
            }
        }
        if let Some(value) = self.value.as_mut() {
            if !self.low_buf.is_empty() {
                value.train_value(&self.low_buf, cfg.m_value, cfg.batch_size, &mut self.rng.lower)?;
            }
        }
        for _ in 0..cfg.n_batches {
            self.updates += 1;
            self.update_higher(losses)?;
            self.update_lower(losses)?;
        }
        Ok(())
    }

    fn train(mut self, label: &str, seed: u64) -> Result<RunReport> {
        let cfg = self.cfg;
        let clock = Instant::now();
        let mut report = RunReport::new(label, seed);
        let mut next_relabel = cfg.m_relabel;
        let mut epoch = 0;
        while self.env_steps < cfg.total_steps {
            let mut losses = EpochLosses::default();
            for _ in 0..cfg.n_cycles {
                if self.env_steps >= cfg.total_steps {
                    break;
                }
                self.cycle(&mut losses, &mut next_relabel)?;
            }
            let ev = evaluate(cfg, &self.high, self.lower.as_ref(), self.value.as_ref(), &mut self.rng.eval)?;
            log::info!(
                "{label} seed {seed} epoch {epoch} steps {} success {:.2} dist {:.2} q {:.3}",
                self.env_steps,
                ev.success_rate,
                ev.subgoal_distance,
                ev.lower_q
            );
            report.push(EpochRow {
                algo: label.to_string(),
                seed,
                epoch,
                env_steps: self.env_steps,
                success_rate: ev.success_rate,
                subgoal_distance: ev.subgoal_distance,
                lower_q: ev.lower_q,
                higher_loss: losses.higher.get(),
                critic_loss: losses.critic.get(),
                actor_loss: losses.actor.get(),
                wall_time_s: if cfg.record_wall_time { clock.elapsed().as_secs_f64() } else { 0.0 },
            })?;
            epoch += 1;
        }
        Ok(report)
    }
}

/// Train one seed, labelling rows with `label`. Numeric aborts carry the
/// seed and label in their context.
pub fn train_labeled(cfg: &RunConfig, seed: u64, label: &str) -> Result<RunReport> {
    Run::new(cfg, seed)?.train(label, seed).map_err(|e| match e {
        Error::NonFinite { context, step } => Error::NonFinite {
            context: format!("{label} seed {seed}: {context}"),
            step,
        },
        other => other,
    })
}

pub fn train(cfg: &RunConfig, seed: u64) -> Result<RunReport> {
    train_labeled(cfg, seed, cfg.algorithm.name())
}

/// Every configured seed, in parallel; reports come back in seed order.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    cfg.seeds.par_iter().map(|&s| train(cfg, s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Beta,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Beta => "beta",
        })
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "beta" => Ok(SweepParam::Beta),
            _ => Err(Error::config("param", format!("cannot sweep `{s}`; use lambda or beta"))),
        }
    }
}

/// Label used for the rows of one sweep point, e.g. `DIPPER:lambda=0.5`.
pub fn sweep_label(cfg: &RunConfig, param: SweepParam, value: f64) -> String {
    format!("{}:{param}={value}", cfg.algorithm.name())
}

/// Run every value with the same seed list.
pub fn sweep(cfg: &RunConfig, param: SweepParam, values: &[f64]) -> Result<Vec<RunReport>> {
    if values.len() < 2 {
        return Err(Error::config("values", "a sweep needs at least two values"));
    }
    let mut jobs = Vec::new();
    for &v in values {
        let mut c = cfg.clone();
        match param {
            SweepParam::Lambda => c.lambda = v,
            SweepParam::Beta => c.beta = v,
        }
        c.validate()?;
        for &seed in &cfg.seeds {
            jobs.push((c.clone(), seed, sweep_label(cfg, param, v)));
        }
    }
    jobs.par_iter().map(|(c, seed, label)| train_labeled(c, *seed, label)).collect()
}
