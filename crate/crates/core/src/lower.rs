//! Goal-conditioned lower level: discrete soft actor-critic with exact
//! expectations over actions, and the fitted value net `V^L_m` that the
//! higher level uses as a feasibility signal.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::buffer::ReplayBuffer;
use crate::config::RunConfig;
use crate::env::GridEnv;
use crate::error::{Error, Result};
use crate::features::Encoder;
use crate::model::{Action, Cell, GoalState, LowTransition, Subgoal};
use crate::nn::{log_softmax_backward, log_softmax_rows, Activation, AdamState, Mlp, MlpSpec, ParamTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a categorical distribution given log-probabilities.
pub fn sample_categorical<R: Rng>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Subgoal achievement indicator `1{|s − g|² < ε²}`.
pub fn lower_reward(position: Cell, subgoal: Subgoal, epsilon: f64) -> f64 {
    if position.within(subgoal.cell, epsilon) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SacSettings {
    pub alpha: f64,
    pub gamma: f64,
    pub polyak: f64,
    pub q_lr: f64,
    pub pi_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl SacSettings {
    pub fn from_config(cfg: &RunConfig, gamma: f64) -> Self {
        Self {
            alpha: cfg.entropy_weight,
            gamma,
            polyak: cfg.polyak,
            q_lr: cfg.q_lr,
            pi_lr: cfg.pi_lr,
            adam_beta1: cfg.adam_beta1,
            adam_beta2: cfg.adam_beta2,
        }
    }
}

/// Encoded transition batch.
#[derive(Debug, Clone)]
pub struct SacBatch {
    pub states: Array2<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub dones: Vec<bool>,
}

impl SacBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SacLosses {
    pub critic: f64,
    pub actor: f64,
    pub entropy: f64,
}

/// Soft actor-critic over a finite action set: twin critics, Polyak-averaged
/// targets, and a categorical actor.
#[derive(Debug, Clone)]
pub struct DiscreteSac {
    actor: Mlp,
    q1: Mlp,
    q2: Mlp,
    q1_target: Mlp,
    q2_target: Mlp,
    actor_opt: AdamState,
    q1_opt: AdamState,
    q2_opt: AdamState,
    settings: SacSettings,
    updates: u64,
}

fn elementwise_min(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    out.zip_mut_with(b, |x, &y| *x = x.min(y));
    out
}

impl DiscreteSac {
    pub fn new<R: Rng>(
        input_dim: usize,
        hidden: Vec<usize>,
        activation: Activation,
        n_actions: usize,
        settings: SacSettings,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = MlpSpec::new(input_dim, hidden, n_actions, activation);
        let actor = Mlp::new(spec.clone(), 0.01, rng)?;
        let q1 = Mlp::new(spec.clone(), 0.1, rng)?;
        let q2 = Mlp::new(spec, 0.1, rng)?;
        Ok(Self::from_parts(actor, q1, q2, settings))
    }

    /// Assemble from explicit networks; targets start as copies of the critics.
    pub fn from_parts(actor: Mlp, q1: Mlp, q2: Mlp, settings: SacSettings) -> Self {
        let adam = |net: &Mlp, lr| AdamState::new(net.n_params(), lr, settings.adam_beta1, settings.adam_beta2);
        Self {
            actor_opt: adam(&actor, settings.pi_lr),
            q1_opt: adam(&q1, settings.q_lr),
            q2_opt: adam(&q2, settings.q_lr),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            settings,
            updates: 0,
        }
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critics(&self) -> (&Mlp, &Mlp) {
        (&self.q1, &self.q2)
    }

    pub fn target_critics(&self) -> (&Mlp, &Mlp) {
        (&self.q1_target, &self.q2_target)
    }

    pub fn settings(&self) -> &SacSettings {
        &self.settings
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn n_actions(&self) -> usize {
        self.actor.spec().output_dim
    }

    pub fn policy_log_probs(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(log_softmax_rows(&self.actor.predict(states)?, 1.0))
    }

    pub fn min_q(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(elementwise_min(&self.q1.predict(states)?, &self.q2.predict(states)?))
    }

    pub fn act<R: Rng>(&self, features: &[f64], mode: ActMode, rng: &mut R) -> Result<usize> {
        let logits = self.actor.predict_one(features)?;
        Ok(match mode {
            ActMode::Greedy => argmax_first(&logits),
            ActMode::Sample => sample_categorical(&crate::nn::log_softmax_policy(&logits, 1.0), rng),
        })
    }

    /// Soft Bellman targets `r + γ(1−d)·Σ_a' π(a'|s')[min Q̄(s',a') − α log π(a'|s')]`.
    pub fn critic_targets(&self, batch: &SacBatch) -> Result<Vec<f64>> {
        let lp = self.policy_log_probs(batch.next_states.view())?;
        let q = elementwise_min(
            &self.q1_target.predict(batch.next_states.view())?,
            &self.q2_target.predict(batch.next_states.view())?,
        );
        let alpha = self.settings.alpha;
        Ok((0..batch.len())
            .map(|i| {
                if batch.dones[i] {
                    return batch.rewards[i];
                }
                let soft_v: f64 = lp
                    .row(i)
                    .iter()
                    .zip(q.row(i))
                    .map(|(&l, &qv)| l.exp() * (qv - alpha * l))
                    .sum();
                batch.rewards[i] + self.settings.gamma * soft_v
            })
            .collect())
    }

    fn critic_loss_one(critic: &Mlp, batch: &SacBatch, targets: &[f64]) -> Result<(f64, ParamTensor)> {
        let (out, cache) = critic.forward(batch.states.view())?;
        let n = batch.len() as f64;
        let mut upstream = Array2::zeros(out.dim());
        let mut loss = 0.0;
        for i in 0..batch.len() {
            let err = out[[i, batch.actions[i]]] - targets[i];
            loss += 0.5 * err * err / n;
            upstream[[i, batch.actions[i]]] = err / n;
        }
        Ok((loss, critic.backward(&cache, upstream.view())?))
    }

    /// Sum of both critics' mean ½-squared TD errors against fixed `targets`.
    pub fn critic_loss_and_grads(&self, batch: &SacBatch, targets: &[f64]) -> Result<(f64, ParamTensor, ParamTensor)> {
        let (l1, g1) = Self::critic_loss_one(&self.q1, batch, targets)?;
        let (l2, g2) = Self::critic_loss_one(&self.q2, batch, targets)?;
        Ok((l1 + l2, g1, g2))
    }

    /// Actor loss `E_s Σ_a π(a|s)[α log π(a|s) − min Q(s,a)]` with the
    /// expectation over actions taken exactly. Returns `(loss, entropy, grad)`.
    pub fn actor_loss_and_grad(&self, states: ArrayView2<f64>) -> Result<(f64, f64, ParamTensor)> {
        let q = self.min_q(states)?;
        let (logits, cache) = self.actor.forward(states)?;
        let lp = log_softmax_rows(&logits, 1.0);
        let n = states.nrows() as f64;
        let alpha = self.settings.alpha;
        let mut loss = 0.0;
        let mut entropy = 0.0;
        let mut upstream = Array2::zeros(lp.dim());
        for ((mut up, lrow), qrow) in upstream.axis_iter_mut(Axis(0)).zip(lp.axis_iter(Axis(0))).zip(q.axis_iter(Axis(0))) {
            for a in 0..lrow.len() {
                let p = lrow[a].exp();
                let f = alpha * lrow[a] - qrow[a];
                loss += p * f / n;
                entropy -= p * lrow[a] / n;
                up[a] = p * (f + alpha) / n;
            }
        }
        let dlogits = log_softmax_backward(lp.view(), upstream.view(), 1.0);
        Ok((loss, entropy, self.actor.backward(&cache, dlogits.view())?))
    }

    pub fn update(&mut self, batch: &SacBatch) -> Result<SacLosses> {
        if batch.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let step = self.updates + 1;
        let targets = self.critic_targets(batch)?;
        let (critic, g1, g2) = self.critic_loss_and_grads(batch, &targets)?;
        if !critic.is_finite() {
            return Err(Error::non_finite("critic loss", step));
        }
        self.q1_opt.step(self.q1.params_mut(), &g1.values)?;
        self.q2_opt.step(self.q2.params_mut(), &g2.values)?;
        let (actor, entropy, ga) = self.actor_loss_and_grad(batch.states.view())?;
        if !actor.is_finite() {
            return Err(Error::non_finite("actor loss", step));
        }
        self.actor_opt.step(self.actor.params_mut(), &ga.values)?;
        let rate = self.settings.polyak;
        self.q1_target.soft_update_from(&self.q1, rate);
        self.q2_target.soft_update_from(&self.q2, rate);
        self.updates = step;
        Ok(SacLosses { critic, actor, entropy })
    }
}

/// Lower-level goal-reaching agent `π^L(a | s, g)`.
#[derive(Debug, Clone)]
pub struct LowerAgent {
    pub sac: DiscreteSac,
    pub encoder: Encoder,
    pub epsilon: f64,
}

impl LowerAgent {
    pub fn new<R: Rng>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(cfg.width, cfg.height);
        let sac = DiscreteSac::new(
            encoder.lower_dim(),
            cfg.hidden_dims(),
            cfg.activation,
            Action::COUNT,
            SacSettings::from_config(cfg, cfg.gamma),
            rng,
        )?;
        Ok(Self {
            sac,
            encoder,
            epsilon: cfg.epsilon,
        })
    }

    pub fn act<R: Rng>(&self, state: &GoalState, subgoal: Subgoal, mode: ActMode, rng: &mut R) -> Result<Action> {
        let features = self.encoder.lower_row(state, subgoal);
        Ok(Action::from_index(self.sac.act(&features, mode, rng)?))
    }

    pub fn encode_batch(&self, batch: &[&LowTransition]) -> SacBatch {
        SacBatch {
            states: self.encoder.lower_matrix(batch.iter().map(|t| (&t.state, t.subgoal))),
            actions: batch.iter().map(|t| t.action.index()).collect(),
            rewards: batch.iter().map(|t| t.reward).collect(),
            next_states: self.encoder.lower_matrix(batch.iter().map(|t| (&t.next_state, t.subgoal))),
            dones: batch.iter().map(|t| t.done).collect(),
        }
    }

    pub fn sac_update(&mut self, batch: &[&LowTransition]) -> Result<SacLosses> {
        let encoded = self.encode_batch(batch);
        self.sac.update(&encoded)
    }
}

/// Result of one lower-level window.
#[derive(Debug, Clone)]
pub struct LowerRollout {
    pub transitions: Vec<LowTransition>,
    pub end_state: GoalState,
    pub achieved: bool,
    pub env_reward: f64,
    pub env_done: bool,
}

/// Run the lower policy toward `subgoal` for at most `k` primitive steps,
/// stopping early on achievement or episode end. With probability
/// `random_eps` an action is replaced by a uniform one.
pub fn rollout_lower<R: Rng>(
    agent: &LowerAgent,
    env: &mut GridEnv,
    subgoal: Subgoal,
    k: usize,
    mode: ActMode,
    random_eps: f64,
    rng: &mut R,
) -> Result<LowerRollout> {
    if k == 0 {
        return Err(Error::Layout("lower window K must be at least 1".into()));
    }
    let mut transitions = Vec::with_capacity(k);
    let mut state = env.state().clone();
    let mut env_reward = 0.0;
    let mut achieved = false;
    let mut env_done = env.is_done();
    for _ in 0..k {
        if env_done {
            break;
        }
        let action = if random_eps > 0.0 && rng.gen::<f64>() < random_eps {
            Action::from_index(rng.gen_range(0..Action::COUNT))
        } else {
            agent.act(&state, subgoal, mode, rng)?
        };
        let step = env.step(action)?;
        let reward = lower_reward(step.next_state.position, subgoal, agent.epsilon);
        achieved = reward > 0.0;
        env_reward += step.env_reward;
        env_done = step.done;
        transitions.push(LowTransition {
            state,
            subgoal,
            action,
            reward,
            next_state: step.next_state.clone(),
            done: achieved,
        });
        state = step.next_state;
        if achieved {
            break;
        }
    }
    Ok(LowerRollout {
        transitions,
        end_state: state,
        achieved,
        env_reward,
        env_done,
    })
}

/// Fitted value `V^L_m(s, g)`: expected discounted subgoal-reaching return.
#[derive(Debug, Clone)]
pub struct ValueNet {
    pub mlp: Mlp,
    opt: AdamState,
    pub gamma: f64,
    pub encoder: Encoder,
}

impl ValueNet {
    pub fn new<R: Rng>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(cfg.width, cfg.height);
        let spec = MlpSpec::new(encoder.lower_dim(), cfg.hidden_dims(), 1, cfg.activation);
        let mlp = Mlp::new(spec, 0.1, rng)?;
        Ok(Self::from_mlp(mlp, cfg.value_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.gamma, encoder))
    }

    pub fn from_mlp(mlp: Mlp, lr: f64, beta1: f64, beta2: f64, gamma: f64, encoder: Encoder) -> Self {
        let opt = AdamState::new(mlp.n_params(), lr, beta1, beta2);
        Self { mlp, opt, gamma, encoder }
    }

    pub fn predict(&self, state: &GoalState, subgoal: Subgoal) -> Result<f64> {
        Ok(self.mlp.predict_one(&self.encoder.lower_row(state, subgoal))?[0])
    }

    pub fn predict_many<'a>(&self, rows: impl ExactSizeIterator<Item = (&'a GoalState, Subgoal)>) -> Result<Vec<f64>> {
        if rows.len() == 0 {
            return Ok(Vec::new());
        }
        let x = self.encoder.lower_matrix(rows);
        Ok(self.mlp.predict(x.view())?.column(0).to_vec())
    }

    /// Regression targets `r + γ(1−done)·V(s', g)` under the current parameters.
    pub fn td_targets(&self, batch: &[&LowTransition]) -> Result<Vec<f64>> {
        let next = self.predict_many(batch.iter().map(|t| (&t.next_state, t.subgoal)))?;
        Ok(batch
            .iter()
            .zip(next)
            .map(|(t, v)| t.reward + if t.done { 0.0 } else { self.gamma * v })
            .collect())
    }

    /// Mean ½-squared error against fixed targets, with its gradient.
    pub fn regression_loss_and_grad(&self, features: ArrayView2<f64>, targets: &[f64]) -> Result<(f64, ParamTensor)> {
        let (out, cache) = self.mlp.forward(features)?;
        let n = targets.len() as f64;
        let mut upstream = Array2::zeros(out.dim());
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let err = out[[i, 0]] - y;
            loss += 0.5 * err * err / n;
            upstream[[i, 0]] = err / n;
        }
        Ok((loss, self.mlp.backward(&cache, upstream.view())?))
    }

    /// One fitted-value-iteration gradient step on `batch`.
    pub fn fit_step(&mut self, batch: &[&LowTransition]) -> Result<f64> {
        let targets = self.td_targets(batch)?;
        let x = self.encoder.lower_matrix(batch.iter().map(|t| (&t.state, t.subgoal)));
        let (loss, grad) = self.regression_loss_and_grad(x.view(), &targets)?;
        if !loss.is_finite() {
            return Err(Error::non_finite("value loss", self.opt.steps() + 1));
        }
        self.opt.step(self.mlp.params_mut(), &grad.values)?;
        Ok(loss)
    }

    /// `iterations` fitted-value steps on uniform batches; returns the mean loss.
    pub fn train_value<R: Rng>(
        &mut self,
        buffer: &ReplayBuffer<LowTransition>,
        iterations: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if buffer.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let mut total = 0.0;
        let mut last_batch = Vec::new();
        for _ in 0..iterations {
            last_batch = buffer.sample(batch_size, rng)?;
            total += self.fit_step(&last_batch)?;
        }
        if !last_batch.is_empty() {
            let hi = 1.0 / (1.0 - self.gamma) + 0.1;
            let preds = self.predict_many(last_batch.iter().map(|t| (&t.state, t.subgoal)))?;
            if let Some(v) = preds.iter().find(|v| **v < -0.1 || **v > hi) {
                log::warn!("value prediction {v:.3} outside sanity band [-0.1, {hi:.3}]");
            }
        }
        Ok(if iterations == 0 { 0.0 } else { total / iterations as f64 })
    }
}
