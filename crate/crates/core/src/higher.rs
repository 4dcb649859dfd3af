//! Higher-level subgoal policy and the primitive-regularized DPO loss.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::Encoder;
use crate::lower::{argmax_first, sample_categorical, ActMode};
use crate::model::{Action, FlatPair, GoalState, HighTrajectory, PreferenceLabel, Subgoal, TrajectoryPair};
use crate::nn::{log_sigmoid, log_softmax_backward, log_softmax_policy, log_softmax_rows, sigmoid, AdamState, Mlp, MlpSpec, ParamTensor};

/// Softmax policy over a fixed number of discrete choices.
#[derive(Debug, Clone)]
pub struct CategoricalPolicy {
    pub mlp: Mlp,
    opt: AdamState,
}

impl CategoricalPolicy {
    pub fn new<R: Rng>(spec: MlpSpec, lr: f64, beta1: f64, beta2: f64, rng: &mut R) -> Result<Self> {
        let mlp = Mlp::new(spec, 0.01, rng)?;
        Ok(Self::from_mlp(mlp, lr, beta1, beta2))
    }

    pub fn from_mlp(mlp: Mlp, lr: f64, beta1: f64, beta2: f64) -> Self {
        let opt = AdamState::new(mlp.n_params(), lr, beta1, beta2);
        Self { mlp, opt }
    }

    pub fn log_probs_one(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(log_softmax_policy(&self.mlp.predict_one(features)?, 1.0))
    }

    pub fn choose<R: Rng>(&self, features: &[f64], mode: ActMode, rng: &mut R) -> Result<usize> {
        let logits = self.mlp.predict_one(features)?;
        Ok(match mode {
            ActMode::Greedy => argmax_first(&logits),
            ActMode::Sample => sample_categorical(&log_softmax_policy(&logits, 1.0), rng),
        })
    }

    pub fn apply_gradient(&mut self, grad: &ParamTensor) -> Result<()> {
        self.opt.step(self.mlp.params_mut(), &grad.values)
    }

    pub fn steps(&self) -> u64 {
        self.opt.steps()
    }
}

/// `π^H(g | s, g*)` over every cell of the grid, walls included.
#[derive(Debug, Clone)]
pub struct HigherPolicy {
    pub policy: CategoricalPolicy,
    pub encoder: Encoder,
}

impl HigherPolicy {
    pub fn new<R: Rng>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(cfg.width, cfg.height);
        let spec = MlpSpec::new(
            encoder.higher_dim(),
            cfg.hidden_dims(),
            cfg.width * cfg.height,
            cfg.activation,
        );
        let policy = CategoricalPolicy::new(spec, cfg.dpo_lr, cfg.adam_beta1, cfg.adam_beta2, rng)?;
        Ok(Self { policy, encoder })
    }

    pub fn sample_subgoal<R: Rng>(&self, state: &GoalState, mode: ActMode, rng: &mut R) -> Result<Subgoal> {
        let idx = self.policy.choose(&self.encoder.higher_row(state), mode, rng)?;
        Ok(Subgoal::new(self.encoder.cell_of(idx)))
    }

    pub fn log_probs(&self, state: &GoalState) -> Result<Vec<f64>> {
        self.policy.log_probs_one(&self.encoder.higher_row(state))
    }
}

/// Flat primitive-action policy `π(a | s, g*)` for the DPO_FLAT baseline.
#[derive(Debug, Clone)]
pub struct FlatPolicy {
    pub policy: CategoricalPolicy,
    pub encoder: Encoder,
}

impl FlatPolicy {
    pub fn new<R: Rng>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(cfg.width, cfg.height);
        let spec = MlpSpec::new(encoder.higher_dim(), cfg.hidden_dims(), Action::COUNT, cfg.activation);
        let policy = CategoricalPolicy::new(spec, cfg.dpo_lr, cfg.adam_beta1, cfg.adam_beta2, rng)?;
        Ok(Self { policy, encoder })
    }

    pub fn act<R: Rng>(&self, state: &GoalState, mode: ActMode, rng: &mut R) -> Result<Action> {
        let idx = self.policy.choose(&self.encoder.higher_row(state), mode, rng)?;
        Ok(Action::from_index(idx))
    }
}

/// One encoded pair: row ranges into the batch, the value-sum difference
/// `Σ V¹ − Σ V²`, and a constant added to the pair logit.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub first: Range<usize>,
    pub second: Range<usize>,
    pub value_diff: f64,
    pub offset: f64,
    pub label: PreferenceLabel,
}

/// Network inputs and chosen actions for every step of every pair.
#[derive(Debug, Clone)]
pub struct PreferenceBatch {
    pub features: Array2<f64>,
    pub actions: Vec<usize>,
    pub pairs: Vec<EncodedPair>,
}

impl PreferenceBatch {
    pub fn new(features: Array2<f64>, actions: Vec<usize>, pairs: Vec<EncodedPair>) -> Result<Self> {
        if features.nrows() != actions.len() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                got: actions.len(),
            });
        }
        let n = actions.len();
        if pairs.iter().any(|p| p.first.end > n || p.second.end > n) {
            return Err(Error::ValueCache("pair rows exceed the batch".into()));
        }
        Ok(Self { features, actions, pairs })
    }
}

/// Pair logit `β(Σ log π¹ − Σ log π²) + λ(Σ V¹ − Σ V²) + offset`.
pub fn pair_logit(sum_lp1: f64, sum_lp2: f64, value_diff: f64, offset: f64, beta: f64, lambda: f64) -> f64 {
    let v = if lambda == 0.0 { 0.0 } else { lambda * value_diff };
    beta * (sum_lp1 - sum_lp2) + v + offset
}

/// Cross-entropy between the label and `(σ(Δ), σ(−Δ))`.
pub fn pair_loss(delta: f64, label: PreferenceLabel) -> f64 {
    let (y1, y2) = label.probs();
    let mut loss = 0.0;
    if y1 > 0.0 {
        loss -= y1 * log_sigmoid(delta);
    }
    if y2 > 0.0 {
        loss -= y2 * log_sigmoid(-delta);
    }
    loss
}

fn check_coefficients(beta: f64, lambda: f64) -> Result<()> {
    if !(beta > 0.0) {
        return Err(Error::config("beta", "must be positive"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config("lambda", "must be non-negative"));
    }
    Ok(())
}

fn chosen_sum(lp: &Array2<f64>, actions: &[usize], rows: &Range<usize>) -> f64 {
    rows.clone().map(|r| lp[[r, actions[r]]]).sum()
}

fn batch_loss(lp: &Array2<f64>, batch: &PreferenceBatch, beta: f64, lambda: f64) -> (f64, Vec<f64>) {
    let mut deltas = Vec::with_capacity(batch.pairs.len());
    let mut loss = 0.0;
    for p in &batch.pairs {
        let d = pair_logit(
            chosen_sum(lp, &batch.actions, &p.first),
            chosen_sum(lp, &batch.actions, &p.second),
            p.value_diff,
            p.offset,
            beta,
            lambda,
        );
        loss += pair_loss(d, p.label);
        deltas.push(d);
    }
    (loss / batch.pairs.len().max(1) as f64, deltas)
}

/// Mean preference loss of `mlp` on an encoded batch.
pub fn preference_loss(mlp: &Mlp, batch: &PreferenceBatch, beta: f64, lambda: f64) -> Result<f64> {
    check_coefficients(beta, lambda)?;
    if batch.pairs.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let lp = log_softmax_rows(&mlp.predict(batch.features.view())?, 1.0);
    Ok(batch_loss(&lp, batch, beta, lambda).0)
}

/// Loss and its gradient by reverse-mode differentiation through the
/// batched forward pass.
pub fn preference_loss_and_grad(mlp: &Mlp, batch: &PreferenceBatch, beta: f64, lambda: f64) -> Result<(f64, ParamTensor)> {
    check_coefficients(beta, lambda)?;
    if batch.pairs.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let (logits, cache) = mlp.forward(batch.features.view())?;
    let lp = log_softmax_rows(&logits, 1.0);
    let (loss, deltas) = batch_loss(&lp, batch, beta, lambda);
    let n = batch.pairs.len() as f64;
    let mut upstream = Array2::zeros(lp.dim());
    for (p, d) in batch.pairs.iter().zip(deltas) {
        let (y1, _) = p.label.probs();
        let g = (sigmoid(d) - y1) * beta / n;
        for r in p.first.clone() {
            upstream[[r, batch.actions[r]]] += g;
        }
        for r in p.second.clone() {
            upstream[[r, batch.actions[r]]] -= g;
        }
    }
    let dlogits = log_softmax_backward(lp.view(), upstream.view(), 1.0);
    Ok((loss, mlp.backward(&cache, dlogits.view())?))
}

/// Trajectory pairs plus `V^L_m(s_t, g_t)` for every step of both sides.
///
/// With `log_reference` set, every step's log-probability is measured
/// against that constant reference log-probability, which removes the bias
/// toward shorter trajectories when the two sides differ in length.
/// `value_baseline` is subtracted from every step's value in the same way.
#[derive(Debug, Clone)]
pub struct DpoBatch {
    pub pairs: Vec<TrajectoryPair>,
    pub values: Vec<(Vec<f64>, Vec<f64>)>,
    pub log_reference: Option<f64>,
    pub value_baseline: f64,
}

impl DpoBatch {
    pub fn new(pairs: Vec<TrajectoryPair>, values: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        if pairs.len() != values.len() {
            return Err(Error::ValueCache(format!("{} pairs but {} value entries", pairs.len(), values.len())));
        }
        for (i, (p, (v1, v2))) in pairs.iter().zip(&values).enumerate() {
            if p.tau1.len() != v1.len() || p.tau2.len() != v2.len() {
                return Err(Error::ValueCache(format!("pair {i}: value count does not match trajectory length")));
            }
            if v1.iter().chain(v2).any(|v| !v.is_finite()) {
                return Err(Error::ValueCache(format!("pair {i}: non-finite value")));
            }
        }
        Ok(Self {
            pairs,
            values,
            log_reference: None,
            value_baseline: 0.0,
        })
    }

    /// Same pairs with all values zero, for the value-free objective.
    pub fn without_values(pairs: Vec<TrajectoryPair>) -> Self {
        let values = pairs.iter().map(|p| (vec![0.0; p.tau1.len()], vec![0.0; p.tau2.len()])).collect();
        Self {
            pairs,
            values,
            log_reference: None,
            value_baseline: 0.0,
        }
    }

    /// Measure log-probabilities against a uniform policy over `n_subgoals`.
    pub fn with_uniform_reference(mut self, n_subgoals: usize) -> Self {
        self.log_reference = Some(-(n_subgoals as f64).ln());
        self
    }

    /// Center values on their mean over every step in the batch.
    pub fn with_mean_value_baseline(mut self) -> Self {
        let (sum, count) = self
            .values
            .iter()
            .flat_map(|(a, b)| a.iter().chain(b))
            .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        self.value_baseline = if count == 0 { 0.0 } else { sum / count as f64 };
        self
    }

    fn value_sum(&self, values: &[f64]) -> f64 {
        values.iter().map(|v| v - self.value_baseline).sum()
    }

    fn reference_offset(&self, pair: &TrajectoryPair, beta: f64) -> f64 {
        match self.log_reference {
            Some(lr) => -beta * (pair.tau1.len() as f64 - pair.tau2.len() as f64) * lr,
            None => 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Encode for the loss at temperature `beta` (the reference offset scales with it).
    pub fn encode(&self, encoder: &Encoder, beta: f64) -> Result<PreferenceBatch> {
        let states: Vec<&GoalState> = self
            .pairs
            .iter()
            .flat_map(|p| p.tau1.steps.iter().chain(&p.tau2.steps).map(|s| &s.state))
            .collect();
        let actions: Vec<usize> = self
            .pairs
            .iter()
            .flat_map(|p| p.tau1.steps.iter().chain(&p.tau2.steps).map(|s| encoder.index_of(s.subgoal.cell)))
            .collect();
        let mut pairs = Vec::with_capacity(self.pairs.len());
        let mut row = 0;
        for (p, (v1, v2)) in self.pairs.iter().zip(&self.values) {
            let first = row..row + p.tau1.len();
            let second = first.end..first.end + p.tau2.len();
            row = second.end;
            pairs.push(EncodedPair {
                first,
                second,
                value_diff: self.value_sum(v1) - self.value_sum(v2),
                offset: self.reference_offset(p, beta),
                label: p.label,
            });
        }
        PreferenceBatch::new(encoder.higher_matrix(states.into_iter()), actions, pairs)
    }
}

pub fn dipper_loss(policy: &HigherPolicy, batch: &DpoBatch, beta: f64, lambda: f64) -> Result<f64> {
    preference_loss(&policy.policy.mlp, &batch.encode(&policy.encoder, beta)?, beta, lambda)
}

pub fn dipper_loss_and_grad(policy: &HigherPolicy, batch: &DpoBatch, beta: f64, lambda: f64) -> Result<(f64, ParamTensor)> {
    preference_loss_and_grad(&policy.policy.mlp, &batch.encode(&policy.encoder, beta)?, beta, lambda)
}

/// `∇_θ log π(a | x)` from a single-row pass.
fn grad_log_prob(mlp: &Mlp, features: ArrayView2<f64>, action: usize) -> Result<ParamTensor> {
    let (logits, cache) = mlp.forward(features)?;
    let lp = log_softmax_rows(&logits, 1.0);
    let mut upstream = Array2::zeros(lp.dim());
    upstream[[0, action]] = 1.0;
    let dlogits = log_softmax_backward(lp.view(), upstream.view(), 1.0);
    mlp.backward(&cache, dlogits.view())
}

/// Gradient in its weighted-likelihood form:
/// `−β · mean σ(r̂² − r̂¹)(Σ∇log π(g¹) − Σ∇log π(g²))`, with each pair
/// oriented so that τ¹ is the preferred trajectory and
/// `r̂ = Σ β (log π − log π_ref) + λ Σ V`. Only hard labels are accepted.
pub fn dipper_grad_closed_form(policy: &HigherPolicy, batch: &DpoBatch, beta: f64, lambda: f64) -> Result<ParamTensor> {
    check_coefficients(beta, lambda)?;
    if batch.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let mlp = &policy.policy.mlp;
    let enc = &policy.encoder;
    let mut total = ParamTensor::zeros(mlp.spec());
    let n = batch.len() as f64;
    for (pair, (v1, v2)) in batch.pairs.iter().zip(&batch.values) {
        let (win, lose, vw, vl) = match pair.label {
            PreferenceLabel::First => (&pair.tau1, &pair.tau2, v1, v2),
            PreferenceLabel::Second => (&pair.tau2, &pair.tau1, v2, v1),
            PreferenceLabel::Tie => {
                return Err(Error::Unsupported(
                    "closed-form gradient needs hard labels; use the autodiff path".into(),
                ))
            }
        };
        let log_ref = batch.log_reference.unwrap_or(0.0);
        let implicit = |tau: &HighTrajectory, v: &[f64]| -> Result<f64> {
            let mut r = 0.0;
            for s in &tau.steps {
                r += beta * (policy.log_probs(&s.state)?[enc.index_of(s.subgoal.cell)] - log_ref);
            }
            Ok(r + lambda * batch.value_sum(v))
        };
        let weight = sigmoid(implicit(lose, vl)? - implicit(win, vw)?);
        for (tau, sign) in [(win, 1.0), (lose, -1.0)] {
            for s in &tau.steps {
                let x = Array2::from_shape_vec((1, enc.higher_dim()), enc.higher_row(&s.state)).expect("row shape");
                let g = grad_log_prob(mlp, x.view(), enc.index_of(s.subgoal.cell))?;
                let c = -beta * weight * sign / n;
                for (t, gi) in total.values.iter_mut().zip(&g.values) {
                    *t += c * gi;
                }
            }
        }
    }
    Ok(total)
}

/// Encode flat pairs, truncating both sides to their common length.
pub fn encode_flat_pairs(pairs: &[&FlatPair], encoder: &Encoder) -> Result<PreferenceBatch> {
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut encoded = Vec::with_capacity(pairs.len());
    for p in pairs {
        let n = p.tau1.steps.len().min(p.tau2.steps.len());
        let start = actions.len();
        for (s, a) in p.tau1.steps[..n].iter().chain(&p.tau2.steps[..n]) {
            states.push(s);
            actions.push(a.index());
        }
        encoded.push(EncodedPair {
            first: start..start + n,
            second: start + n..start + 2 * n,
            value_diff: 0.0,
            offset: 0.0,
            label: p.label,
        });
    }
    PreferenceBatch::new(encoder.higher_matrix(states.into_iter()), actions, encoded)
}

pub fn dpo_flat_loss(policy: &FlatPolicy, pairs: &[&FlatPair], beta: f64) -> Result<f64> {
    preference_loss(&policy.policy.mlp, &encode_flat_pairs(pairs, &policy.encoder)?, beta, 0.0)
}

pub fn dpo_flat_loss_and_grad(policy: &FlatPolicy, pairs: &[&FlatPair], beta: f64) -> Result<(f64, ParamTensor)> {
    preference_loss_and_grad(&policy.policy.mlp, &encode_flat_pairs(pairs, &policy.encoder)?, beta, 0.0)
}

/// Flat loss with an explicit uniform reference policy: each side's logit
/// contribution becomes `β Σ (log π − log π_ref)`.
pub fn dpo_flat_loss_with_reference(policy: &FlatPolicy, pairs: &[&FlatPair], beta: f64) -> Result<f64> {
    let mut batch = encode_flat_pairs(pairs, &policy.encoder)?;
    let log_ref = -(Action::COUNT as f64).ln();
    for p in &mut batch.pairs {
        p.offset = -beta * (p.first.len() as f64 * log_ref - p.second.len() as f64 * log_ref);
    }
    preference_loss(&policy.policy.mlp, &batch, beta, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cell, HighStep, Maze};
    use crate::nn::Activation;
    use crate::rng::{stream, Stream};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use std::sync::Arc;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.width = 4;
        cfg.height = 4;
        cfg.layers = 1;
        cfg.hidden = 6;
        cfg
    }

    fn policy(seed: u64) -> HigherPolicy {
        let cfg = small_cfg();
        let mut p = HigherPolicy::new(&cfg, &mut stream(seed, Stream::Init)).unwrap();
        // Larger weights than the default init so gradients are not tiny.
        let mut rng = stream(seed, Stream::Higher);
        for w in p.policy.mlp.params_mut() {
            *w = rng.gen_range(-0.5..0.5);
        }
        p
    }

    fn random_traj<R: Rng>(rng: &mut R, len: usize) -> HighTrajectory {
        let maze = Arc::new(Maze::open(4, 4));
        let goal = Cell::new(3, 3);
        let mut cell = || Cell::new(rng.gen_range(0..4), rng.gen_range(0..4));
        let steps = (0..len)
            .map(|_| HighStep {
                state: GoalState::new(cell(), Arc::clone(&maze), goal).unwrap(),
                subgoal: Subgoal::new(cell()),
            })
            .collect();
        HighTrajectory {
            steps,
            end_state: GoalState::new(cell(), maze, goal).unwrap(),
        }
    }

    fn random_batch(seed: u64, n: usize, hard: bool) -> DpoBatch {
        let mut rng = stream(seed, Stream::Preference);
        let mut pairs = Vec::new();
        let mut values = Vec::new();
        for _ in 0..n {
            let (l1, l2) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let t1 = random_traj(&mut rng, l1);
            let t2 = random_traj(&mut rng, l2);
            let label = match rng.gen_range(0..if hard { 2 } else { 3 }) {
                0 => PreferenceLabel::First,
                1 => PreferenceLabel::Second,
                _ => PreferenceLabel::Tie,
            };
            values.push(((0..l1).map(|_| rng.gen()).collect(), (0..l2).map(|_| rng.gen()).collect()));
            pairs.push(TrajectoryPair::new(t1, t2, label).unwrap());
        }
        DpoBatch::new(pairs, values).unwrap()
    }

    #[test]
    fn identical_trajectories_give_ln2() {
        let p = policy(1);
        let mut rng = stream(2, Stream::Preference);
        let t = random_traj(&mut rng, 3);
        for label in [PreferenceLabel::First, PreferenceLabel::Second, PreferenceLabel::Tie] {
            let pair = TrajectoryPair::new(t.clone(), t.clone(), label).unwrap();
            let b = DpoBatch::new(vec![pair], vec![(vec![0.3; 3], vec![0.3; 3])]).unwrap();
            assert!((dipper_loss(&p, &b, 1.0, 0.7).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    /// Single-output-layer net with zero weights, so the logits are the bias.
    fn fixed_logits(logits: &[f64]) -> Mlp {
        let spec = MlpSpec::new(1, vec![], logits.len(), Activation::Tanh);
        let mut mlp = Mlp::from_params(spec.clone(), ParamTensor::zeros(&spec)).unwrap();
        let n = mlp.n_params();
        mlp.params_mut()[n - logits.len()..].copy_from_slice(logits);
        mlp
    }

    fn one_step_batch(a1: usize, a2: usize, value_diff: f64, label: PreferenceLabel) -> PreferenceBatch {
        PreferenceBatch::new(
            Array2::zeros((2, 1)),
            vec![a1, a2],
            vec![EncodedPair {
                first: 0..1,
                second: 1..2,
                value_diff,
                offset: 0.0,
                label,
            }],
        )
        .unwrap()
    }

    #[test]
    fn reference_leaves_equal_lengths_unchanged() {
        let p = policy(4);
        let mut rng = stream(4, Stream::Preference);
        let pairs: Vec<_> = (0..4)
            .map(|_| TrajectoryPair::new(random_traj(&mut rng, 3), random_traj(&mut rng, 3), PreferenceLabel::First).unwrap())
            .collect();
        let plain = DpoBatch::without_values(pairs);
        let with_ref = plain.clone().with_uniform_reference(16);
        assert_eq!(dipper_loss(&p, &plain, 2.0, 0.0).unwrap(), dipper_loss(&p, &with_ref, 2.0, 0.0).unwrap());
    }

    #[test]
    fn value_baseline_cancels_for_equal_lengths() {
        let p = policy(6);
        let mut rng = stream(6, Stream::Preference);
        let mut pairs = Vec::new();
        let mut values = Vec::new();
        for _ in 0..3 {
            pairs.push(TrajectoryPair::new(random_traj(&mut rng, 4), random_traj(&mut rng, 4), PreferenceLabel::Second).unwrap());
            values.push(((0..4).map(|_| rng.gen()).collect(), (0..4).map(|_| rng.gen()).collect()));
        }
        let plain = DpoBatch::new(pairs, values).unwrap();
        let centered = plain.clone().with_mean_value_baseline();
        assert!(centered.value_baseline > 0.0);
        let (a, b) = (dipper_loss(&p, &plain, 1.0, 2.0).unwrap(), dipper_loss(&p, &centered, 1.0, 2.0).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn value_baseline_removes_length_bonus() {
        // Constant values: the longer side no longer gains λ·V per extra step.
        let mut p = policy(7);
        p.policy.mlp.params_mut().fill(0.0);
        let mut rng = stream(7, Stream::Preference);
        let pair = TrajectoryPair::new(random_traj(&mut rng, 2), random_traj(&mut rng, 5), PreferenceLabel::First).unwrap();
        let batch = DpoBatch::new(vec![pair], vec![(vec![0.8; 2], vec![0.8; 5])])
            .unwrap()
            .with_uniform_reference(16)
            .with_mean_value_baseline();
        assert!((dipper_loss(&p, &batch, 2.0, 3.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn uniform_policy_is_neutral_against_uniform_reference() {
        // A zero-logit policy is the reference itself, so Δ = 0 whatever the lengths.
        let mut p = policy(5);
        p.policy.mlp.params_mut().fill(0.0);
        let mut rng = stream(5, Stream::Preference);
        let pair = TrajectoryPair::new(random_traj(&mut rng, 1), random_traj(&mut rng, 4), PreferenceLabel::Second).unwrap();
        let plain = DpoBatch::without_values(vec![pair]);
        let with_ref = plain.clone().with_uniform_reference(16);
        assert!((dipper_loss(&p, &with_ref, 3.0, 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        // Without the reference the shorter first trajectory wins by 3·3·ln 16.
        let delta = 9.0 * 16f64.ln();
        assert!((dipper_loss(&p, &plain, 3.0, 0.0).unwrap() - pair_loss(delta, PreferenceLabel::Second)).abs() < 1e-9);
    }

    #[test]
    fn closed_form_single_step_loss() {
        let mlp = fixed_logits(&[0.8f64.ln(), 0.2f64.ln()]);
        let b = one_step_batch(0, 1, 0.0, PreferenceLabel::First);
        assert!((preference_loss(&mlp, &b, 1.0, 0.0).unwrap() - 1.25f64.ln()).abs() < 1e-12);
        assert!((preference_loss(&mlp, &b, 1.0, 0.0).unwrap() - 0.223144).abs() < 1e-6);
    }

    #[test]
    fn value_term_with_uniform_policy() {
        let mlp = fixed_logits(&[0.0; 4]);
        let b = one_step_batch(2, 3, 0.9 - 0.1, PreferenceLabel::First);
        let loss = preference_loss(&mlp, &b, 1.0, 1.0).unwrap();
        let oracle = (1.0 + (-0.8f64).exp()).ln();
        assert!((loss - oracle).abs() < 1e-12);
        assert!((loss - 0.371101).abs() < 1e-6);
    }

    #[test]
    fn stable_at_extreme_logits() {
        assert!(pair_loss(800.0, PreferenceLabel::First) < 1e-300);
        assert!((pair_loss(-800.0, PreferenceLabel::First) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn mismatched_values_rejected() {
        let mut b = random_batch(3, 2, true);
        b.values[1].0.push(0.0);
        assert!(matches!(DpoBatch::new(b.pairs, b.values), Err(Error::ValueCache(_))));
        let mut b = random_batch(3, 2, true);
        b.values[0].1[0] = f64::NAN;
        assert!(matches!(DpoBatch::new(b.pairs, b.values), Err(Error::ValueCache(_))));
        let b = random_batch(3, 2, true);
        assert!(matches!(DpoBatch::new(b.pairs, vec![]), Err(Error::ValueCache(_))));
    }

    #[test]
    fn invalid_coefficients_rejected() {
        let p = policy(1);
        let b = random_batch(3, 2, true);
        assert!(dipper_loss(&p, &b, 0.0, 1.0).is_err());
        assert!(dipper_loss(&p, &b, 1.0, -1.0).is_err());
    }

    #[test]
    fn closed_form_matches_autodiff() {
        for seed in 0..5 {
            let p = policy(seed);
            let b = random_batch(seed + 10, 4, true);
            let b = match seed % 3 {
                0 => b,
                1 => b.with_uniform_reference(16),
                _ => b.with_uniform_reference(16).with_mean_value_baseline(),
            };
            for (beta, lambda) in [(1.0, 0.5), (0.3, 0.0), (2.0, 3.0)] {
                let (_, auto) = dipper_loss_and_grad(&p, &b, beta, lambda).unwrap();
                let closed = dipper_grad_closed_form(&p, &b, beta, lambda).unwrap();
                let max = auto
                    .values
                    .iter()
                    .zip(&closed.values)
                    .map(|(a, c)| (a - c).abs())
                    .fold(0.0, f64::max);
                assert!(max < 1e-10, "seed {seed}: max diff {max}");
            }
        }
    }

    #[test]
    fn autodiff_matches_finite_differences() {
        let p = policy(4);
        let b = random_batch(40, 3, false);
        let (_, g) = dipper_loss_and_grad(&p, &b, 0.7, 0.4).unwrap();
        let h = 1e-6;
        for i in (0..p.policy.mlp.n_params()).step_by(17) {
            let mut plus = p.clone();
            plus.policy.mlp.params_mut()[i] += h;
            let mut minus = p.clone();
            minus.policy.mlp.params_mut()[i] -= h;
            let fd = (dipper_loss(&plus, &b, 0.7, 0.4).unwrap() - dipper_loss(&minus, &b, 0.7, 0.4).unwrap()) / (2.0 * h);
            assert!((fd - g.values[i]).abs() < 1e-7, "param {i}: fd {fd} vs {}", g.values[i]);
        }
    }

    #[test]
    fn soft_labels_unsupported_in_closed_form() {
        let p = policy(1);
        let mut b = random_batch(5, 2, true);
        b.pairs[0].label = PreferenceLabel::Tie;
        assert!(matches!(dipper_grad_closed_form(&p, &b, 1.0, 1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn dominant_preferred_trajectory_has_vanishing_gradient() {
        let p = policy(2);
        let b = random_batch(6, 1, true);
        let mut b = DpoBatch::new(b.pairs, b.values).unwrap();
        let huge = 1e4;
        let (v1, v2) = &mut b.values[0];
        match b.pairs[0].label {
            PreferenceLabel::First => v1[0] = huge,
            _ => v2[0] = huge,
        }
        let g = dipper_grad_closed_form(&p, &b, 1.0, 1.0).unwrap();
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn swap_symmetry() {
        let p = policy(3);
        let b = random_batch(7, 3, true);
        let swapped = DpoBatch::new(
            b.pairs.iter().map(TrajectoryPair::swapped).collect(),
            b.values.iter().map(|(a, c)| (c.clone(), a.clone())).collect(),
        )
        .unwrap();
        assert_eq!(dipper_loss(&p, &b, 1.0, 0.5).unwrap(), dipper_loss(&p, &swapped, 1.0, 0.5).unwrap());
        let g1 = dipper_grad_closed_form(&p, &b, 1.0, 0.5).unwrap();
        let g2 = dipper_grad_closed_form(&p, &swapped, 1.0, 0.5).unwrap();
        assert_eq!(g1.values, g2.values);
    }

    #[test]
    fn zero_lambda_ignores_values() {
        let p = policy(3);
        let b = random_batch(8, 3, false);
        let stripped = DpoBatch::without_values(b.pairs.clone());
        assert_eq!(
            dipper_loss(&p, &b, 1.0, 0.0).unwrap().to_bits(),
            dipper_loss(&p, &stripped, 1.0, 0.0).unwrap().to_bits()
        );
    }

    #[test]
    fn gradient_step_raises_preferred_likelihood() {
        for seed in 0..10 {
            let p = policy(seed);
            let b = random_batch(seed + 100, 1, true);
            let pair = &b.pairs[0];
            let preferred = if pair.label == PreferenceLabel::First { &pair.tau1 } else { &pair.tau2 };
            let loglik = |pol: &HigherPolicy| -> f64 {
                preferred
                    .steps
                    .iter()
                    .map(|s| pol.log_probs(&s.state).unwrap()[pol.encoder.index_of(s.subgoal.cell)])
                    .sum()
            };
            let (_, g) = dipper_loss_and_grad(&p, &b, 1.0, 0.5).unwrap();
            let mut stepped = p.clone();
            for (w, gi) in stepped.policy.mlp.params_mut().iter_mut().zip(&g.values) {
                *w -= 1e-4 * gi;
            }
            assert!(loglik(&stepped) >= loglik(&p) - 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn feasibility_pressure() {
        let p = policy(5);
        let b = random_batch(9, 1, true);
        let mut hi = b.clone();
        let lo = b;
        let side = if hi.pairs[0].label == PreferenceLabel::First { &mut hi.values[0].0 } else { &mut hi.values[0].1 };
        side[0] += 0.5;
        assert!(dipper_loss(&p, &hi, 1.0, 0.5).unwrap() < dipper_loss(&p, &lo, 1.0, 0.5).unwrap());
    }

    fn flat_policy() -> FlatPolicy {
        FlatPolicy::new(&small_cfg(), &mut stream(1, Stream::Init)).unwrap()
    }

    fn flat_pair(seed: u64, n1: usize, n2: usize) -> FlatPair {
        let mut rng = stream(seed, Stream::Preference);
        let mut traj = |n| {
            let t = random_traj(&mut rng, n);
            crate::model::FlatTrajectory {
                steps: t.steps.iter().map(|s| (s.state.clone(), Action::from_index(s.subgoal.cell.x as usize))).collect(),
                end_state: t.end_state,
            }
        };
        FlatPair {
            tau1: traj(n1),
            tau2: traj(n2),
            label: PreferenceLabel::First,
        }
    }

    #[test]
    fn flat_identical_is_ln2() {
        let p = flat_policy();
        let mut pair = flat_pair(1, 4, 4);
        pair.tau2 = pair.tau1.clone();
        assert!((dpo_flat_loss(&p, &[&pair], 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn flat_equals_zero_lambda_preference_loss() {
        let p = flat_policy();
        let pairs = [flat_pair(2, 5, 3), flat_pair(3, 2, 2)];
        let refs: Vec<&FlatPair> = pairs.iter().collect();
        let batch = encode_flat_pairs(&refs, &p.encoder).unwrap();
        assert_eq!(
            dpo_flat_loss(&p, &refs, 0.8).unwrap(),
            preference_loss(&p.policy.mlp, &batch, 0.8, 0.0).unwrap()
        );
        assert_eq!(batch.pairs[0].first.len(), 3);
    }

    #[test]
    fn uniform_reference_cancels() {
        let p = flat_policy();
        let pairs = [flat_pair(4, 6, 6), flat_pair(5, 3, 7)];
        let refs: Vec<&FlatPair> = pairs.iter().collect();
        let plain = dpo_flat_loss(&p, &refs, 1.3).unwrap();
        let with_ref = dpo_flat_loss_with_reference(&p, &refs, 1.3).unwrap();
        assert!((plain - with_ref).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        let mut cfg = small_cfg();
        cfg.width = 3;
        cfg.height = 3;
        let mut p = HigherPolicy::new(&cfg, &mut stream(0, Stream::Init)).unwrap();
        p.policy.mlp.params_mut().iter_mut().for_each(|w| *w = 0.0);
        let maze = Arc::new(Maze::open(3, 3));
        let s = GoalState::new(Cell::new(0, 0), maze, Cell::new(2, 2)).unwrap();
        let mut rng = stream(3, Stream::Higher);
        let n = 100_000;
        let mut counts = [0usize; 9];
        for _ in 0..n {
            counts[p.encoder.index_of(p.sample_subgoal(&s, ActMode::Sample, &mut rng).unwrap().cell)] += 1;
        }
        let q = 1.0 / 9.0;
        let sd = (n as f64 * q * (1.0 - q)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * q).abs() < 3.0 * sd, "{counts:?}");
        }
        assert_eq!(p.sample_subgoal(&s, ActMode::Greedy, &mut rng).unwrap().cell, Cell::new(0, 0));
    }

    #[test]
    fn seeded_subgoal_sampling_repeats() {
        let p = policy(9);
        let maze = Arc::new(Maze::open(4, 4));
        let s = GoalState::new(Cell::new(1, 2), maze, Cell::new(3, 3)).unwrap();
        let draw = || {
            let mut rng = stream(4, Stream::Higher);
            (0..50).map(|_| p.sample_subgoal(&s, ActMode::Sample, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    proptest! {
        #[test]
        fn label_swap_exact(d in -30.0f64..30.0) {
            for l in [PreferenceLabel::First, PreferenceLabel::Second, PreferenceLabel::Tie] {
                prop_assert_eq!(pair_loss(d, l), pair_loss(-d, l.reversed()));
            }
        }

        #[test]
        fn loss_decreases_with_preferred_likelihood(lp1 in -10.0f64..0.0, lp2 in -10.0f64..0.0, bump in 1e-3f64..2.0) {
            let before = pair_loss(pair_logit(lp1, lp2, 0.0, 0.0, 1.0, 0.5), PreferenceLabel::First);
            let after = pair_loss(pair_logit(lp1 + bump, lp2, 0.0, 0.0, 1.0, 0.5), PreferenceLabel::First);
            prop_assert!(after < before);
        }
    }
}
