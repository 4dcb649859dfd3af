//! Exact soft dynamic programming on tiny finite-horizon MDPs, used to check
//! the identities behind the preference objective.

use std::fmt;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::higher::{pair_loss, preference_loss, EncodedPair, PreferenceBatch};
use crate::model::PreferenceLabel;
use crate::nn::{sigmoid, Activation, Mlp, MlpSpec, ParamTensor};

pub const MAX_STATES: usize = 8;
pub const MAX_ACTIONS: usize = 4;
pub const MAX_HORIZON: usize = 6;

/// Finite-horizon MDP with kernel `p[s][a][s']` and rewards `r[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
}

impl TabularMdp {
    pub fn new(horizon: usize, transitions: Vec<Vec<Vec<f64>>>, rewards: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = transitions.len();
        let n_actions = transitions.first().map_or(0, Vec::len);
        if n_states == 0 || n_states > MAX_STATES {
            return Err(Error::InvalidMdp(format!("{n_states} states, expected 1..={MAX_STATES}")));
        }
        if n_actions == 0 || n_actions > MAX_ACTIONS {
            return Err(Error::InvalidMdp(format!("{n_actions} actions, expected 1..={MAX_ACTIONS}")));
        }
        if horizon == 0 || horizon > MAX_HORIZON {
            return Err(Error::InvalidMdp(format!("horizon {horizon}, expected 1..={MAX_HORIZON}")));
        }
        if rewards.len() != n_states || rewards.iter().any(|r| r.len() != n_actions) {
            return Err(Error::InvalidMdp("reward table shape does not match the kernel".into()));
        }
        if rewards.iter().flatten().any(|r| !r.is_finite()) {
            return Err(Error::InvalidMdp("non-finite reward".into()));
        }
        for (s, row) in transitions.iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::InvalidMdp(format!("state {s} has {} actions", row.len())));
            }
            for (a, p) in row.iter().enumerate() {
                if p.len() != n_states || p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    return Err(Error::InvalidMdp(format!("bad kernel row ({s}, {a})")));
                }
                let total: f64 = p.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidMdp(format!("kernel row ({s}, {a}) sums to {total}")));
                }
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            horizon,
            transitions,
            rewards,
        })
    }

    /// Deterministic MDP from a successor table `next[s][a]`.
    pub fn deterministic(horizon: usize, next: &[Vec<usize>], rewards: Vec<Vec<f64>>) -> Result<Self> {
        let n = next.len();
        let transitions = next
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&sp| {
                        let mut p = vec![0.0; n];
                        if sp < n {
                            p[sp] = 1.0;
                        }
                        p
                    })
                    .collect()
            })
            .collect();
        Self::new(horizon, transitions, rewards)
    }

    pub fn random<R: Rng>(rng: &mut R, n_states: usize, n_actions: usize, horizon: usize, deterministic: bool) -> Result<Self> {
        let rewards = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        if deterministic {
            let next: Vec<Vec<usize>> = (0..n_states)
                .map(|_| (0..n_actions).map(|_| rng.gen_range(0..n_states)).collect())
                .collect();
            return Self::deterministic(horizon, &next, rewards);
        }
        let transitions = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| {
                        let w: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.05..1.0)).collect();
                        let total: f64 = w.iter().sum();
                        let mut p: Vec<f64> = w.iter().map(|x| x / total).collect();
                        let rest: f64 = p[1..].iter().sum();
                        p[0] = 1.0 - rest;
                        p
                    })
                    .collect()
            })
            .collect();
        Self::new(horizon, transitions, rewards)
    }

    pub fn is_deterministic(&self) -> bool {
        self.transitions.iter().flatten().all(|p| p.iter().all(|&x| x == 0.0 || x == 1.0))
    }

    /// Successor of `(s, a)` if the transition is deterministic.
    pub fn successor(&self, s: usize, a: usize) -> Option<usize> {
        let p = &self.transitions[s][a];
        p.iter().position(|&x| x == 1.0)
    }

    fn expected_next(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        self.transitions[s][a].iter().zip(values).map(|(p, v)| p * v).sum()
    }
}

/// Time-indexed soft-optimal values: `v[t][s]` for `t ∈ 0..=H` (with
/// `v[H] = 0`), `q[t][s][a]` and `log_policy[t][s][a]` for `t < H`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSolution {
    pub beta: f64,
    pub v: Vec<Vec<f64>>,
    pub q: Vec<Vec<Vec<f64>>>,
    pub log_policy: Vec<Vec<Vec<f64>>>,
}

impl SoftSolution {
    pub fn policy(&self, t: usize, s: usize, a: usize) -> f64 {
        self.log_policy[t][s][a].exp()
    }

    /// Largest violation of the log-sum-exp identity or of row normalization.
    pub fn invariant_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (t, qt) in self.q.iter().enumerate() {
            for (s, qs) in qt.iter().enumerate() {
                let lse = self.beta * logsumexp(qs.iter().map(|q| q / self.beta));
                worst = worst.max((lse - self.v[t][s]).abs());
                let total: f64 = self.log_policy[t][s].iter().map(|l| l.exp()).sum();
                worst = worst.max((total - 1.0).abs());
                for (a, q) in qs.iter().enumerate() {
                    let lp = (q - self.v[t][s]) / self.beta;
                    worst = worst.max((lp - self.log_policy[t][s][a]).abs());
                }
            }
        }
        worst
    }
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Backward induction `Q_t = R + E V_{t+1}`, `V_t = β log Σ exp(Q_t / β)`,
/// `π_t = exp((Q_t − V_t) / β)`, from `V_H = 0`.
pub fn soft_value_iteration(mdp: &TabularMdp, beta: f64) -> Result<SoftSolution> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config("beta", "must be positive"));
    }
    let (h, ns, na) = (mdp.horizon, mdp.n_states, mdp.n_actions);
    let mut v = vec![vec![0.0; ns]; h + 1];
    let mut q = vec![vec![vec![0.0; na]; ns]; h];
    let mut log_policy = vec![vec![vec![0.0; na]; ns]; h];
    for t in (0..h).rev() {
        for s in 0..ns {
            for a in 0..na {
                q[t][s][a] = mdp.rewards[s][a] + mdp.expected_next(s, a, &v[t + 1]);
            }
            let vs = beta * logsumexp(q[t][s].iter().map(|x| x / beta));
            v[t][s] = vs;
            for a in 0..na {
                log_policy[t][s][a] = (q[t][s][a] - vs) / beta;
            }
        }
    }
    Ok(SoftSolution { beta, v, q, log_policy })
}

/// Max over `(t, s, a)` of `|R(s,a) − (Q_t(s,a) − E_{s'} V_{t+1}(s'))|`.
pub fn check_bijection(mdp: &TabularMdp, solution: &SoftSolution) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..mdp.horizon {
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let implied = solution.q[t][s][a] - mdp.expected_next(s, a, &solution.v[t + 1]);
                worst = worst.max((mdp.rewards[s][a] - implied).abs());
            }
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TelescopeGap {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// Compare `Σ_t R_t` with `V_0(s_0) + Σ_t β log π_t(a_t | s_t)` along a
/// full-horizon state-action sequence.
pub fn check_telescoping(mdp: &TabularMdp, solution: &SoftSolution, trajectory: &[(usize, usize)]) -> Result<TelescopeGap> {
    if trajectory.len() != mdp.horizon {
        return Err(Error::InvalidMdp(format!(
            "trajectory has {} steps, horizon is {}",
            trajectory.len(),
            mdp.horizon
        )));
    }
    if trajectory.iter().any(|&(s, a)| s >= mdp.n_states || a >= mdp.n_actions) {
        return Err(Error::InvalidMdp("trajectory leaves the state or action space".into()));
    }
    let lhs: f64 = trajectory.iter().map(|&(s, a)| mdp.rewards[s][a]).sum();
    let rhs = solution.v[0][trajectory[0].0]
        + trajectory
            .iter()
            .enumerate()
            .map(|(t, &(s, a))| solution.beta * solution.log_policy[t][s][a])
            .sum::<f64>();
    Ok(TelescopeGap {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}

/// State-action sequence of a deterministic MDP from `s0` under `actions`.
pub fn roll_deterministic(mdp: &TabularMdp, s0: usize, actions: &[usize]) -> Result<Vec<(usize, usize)>> {
    let mut s = s0;
    let mut out = Vec::with_capacity(actions.len());
    for &a in actions {
        out.push((s, a));
        s = mdp
            .successor(s, a)
            .ok_or_else(|| Error::InvalidMdp("transition is not deterministic".into()))?;
    }
    Ok(out)
}

/// Every action sequence of length `len`, in lexicographic order.
pub fn action_sequences(n_actions: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..n_actions).map(move |a| {
                    let mut p = prefix.clone();
                    p.push(a);
                    p
                })
            })
            .collect();
    }
    out
}

/// Every full-horizon trajectory from `s0` with its probability under the
/// time-indexed policy `log_policy` (zero-probability paths omitted).
pub fn enumerate_trajectories(mdp: &TabularMdp, log_policy: &[Vec<Vec<f64>>], s0: usize) -> Vec<(Vec<(usize, usize)>, f64)> {
    let mut frontier = vec![(Vec::new(), s0, 1.0)];
    for t in 0..mdp.horizon {
        let mut next = Vec::new();
        for (path, s, p) in frontier {
            for a in 0..mdp.n_actions {
                let pa = p * log_policy[t][s][a].exp();
                for (sp, &ps) in mdp.transitions[s][a].iter().enumerate() {
                    if ps > 0.0 && pa > 0.0 {
                        let mut path2: Vec<(usize, usize)> = path.clone();
                        path2.push((s, a));
                        next.push((path2, sp, pa * ps));
                    }
                }
            }
        }
        frontier = next;
    }
    frontier.into_iter().map(|(path, _, p)| (path, p)).collect()
}

/// A preference pair of tabular trajectories sharing a start state.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPair {
    pub tau1: Vec<(usize, usize)>,
    pub tau2: Vec<(usize, usize)>,
    pub label: PreferenceLabel,
}

/// Pair loss with both the current lower value `V^L` and the optimal
/// `V^L_*`: the logit is
/// `Σ_t β log π¹ − β log π² − λ((V^L¹ − V^L_*¹) − (V^L² − V^L_*²))`.
pub fn exact_dipper_objective(
    pairs: &[TabularPair],
    log_policy: &[Vec<Vec<f64>>],
    beta: f64,
    lambda: f64,
    vl: &[Vec<f64>],
    vl_star: &[Vec<f64>],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let side = |tau: &[(usize, usize)]| -> (f64, f64) {
        let lp = tau.iter().enumerate().map(|(t, &(s, a))| log_policy[t][s][a]).sum();
        let gap = tau.iter().map(|&(s, a)| vl[s][a] - vl_star[s][a]).sum();
        (lp, gap)
    };
    let mut total = 0.0;
    for p in pairs {
        let (lp1, g1) = side(&p.tau1);
        let (lp2, g2) = side(&p.tau2);
        let delta = beta * (lp1 - lp2) - lambda * (g1 - g2);
        total += pair_loss(delta, p.label);
    }
    Ok(total / pairs.len() as f64)
}

/// Single-layer network whose logits on the one-hot `(t, s)` input are the
/// given log-policy entries, so tabular pairs can run through the
/// function-approximation loss unchanged.
pub fn tabular_policy_net(log_policy: &[Vec<Vec<f64>>]) -> Result<Mlp> {
    let h = log_policy.len();
    let ns = log_policy.first().map_or(0, Vec::len);
    let na = log_policy.first().and_then(|x| x.first()).map_or(0, Vec::len);
    let spec = MlpSpec::new(h * ns, vec![], na, Activation::Tanh);
    let mut params = ParamTensor::zeros(&spec);
    {
        let mut w = params.weights_mut(0);
        for (t, lt) in log_policy.iter().enumerate() {
            for (s, ls) in lt.iter().enumerate() {
                for (a, &l) in ls.iter().enumerate() {
                    w[[t * ns + s, a]] = l;
                }
            }
        }
    }
    Mlp::from_params(spec, params)
}

/// Encode tabular pairs for [`preference_loss`], with per-step values
/// `values[s][a]` feeding the value term.
pub fn encode_tabular_pairs(mdp: &TabularMdp, pairs: &[TabularPair], values: &[Vec<f64>]) -> Result<PreferenceBatch> {
    let ns = mdp.n_states;
    let rows: usize = pairs.iter().map(|p| p.tau1.len() + p.tau2.len()).sum();
    let mut features = Array2::zeros((rows, mdp.horizon * ns));
    let mut actions = Vec::with_capacity(rows);
    let mut encoded = Vec::with_capacity(pairs.len());
    let mut r = 0;
    for p in pairs {
        let start = r;
        for tau in [&p.tau1, &p.tau2] {
            for (t, &(s, a)) in tau.iter().enumerate() {
                features[[r, t * ns + s]] = 1.0;
                actions.push(a);
                r += 1;
            }
        }
        let mid = start + p.tau1.len();
        let sum = |tau: &[(usize, usize)]| tau.iter().map(|&(s, a)| values[s][a]).sum::<f64>();
        encoded.push(EncodedPair {
            first: start..mid,
            second: mid..r,
            value_diff: sum(&p.tau1) - sum(&p.tau2),
            offset: 0.0,
            label: p.label,
        });
    }
    PreferenceBatch::new(features, actions, encoded)
}

/// Loss of the practical objective on tabular pairs, computed through the
/// network path.
pub fn practical_objective(
    mdp: &TabularMdp,
    pairs: &[TabularPair],
    log_policy: &[Vec<Vec<f64>>],
    beta: f64,
    lambda: f64,
    values: &[Vec<f64>],
) -> Result<f64> {
    let net = tabular_policy_net(log_policy)?;
    preference_loss(&net, &encode_tabular_pairs(mdp, pairs, values)?, beta, lambda)
}

/// How preferences between two trajectories are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelModel {
    /// `P(τ¹ ≻ τ²) = σ(Σ R¹ − Σ R²)`.
    BradleyTerry,
    /// Every pair labelled `(0.5, 0.5)`.
    Uniform,
}

/// Expected gradient (w.r.t. tabular logits `θ[t][s][a]`) of the
/// weighted-likelihood form, with trajectories drawn from `log_policy`
/// starting at `s0`, both label outcomes weighted by the label model.
/// Returns the gradient's Euclidean norm.
pub fn expected_gradient_norm(
    mdp: &TabularMdp,
    log_policy: &[Vec<Vec<f64>>],
    beta: f64,
    s0: usize,
    labels: LabelModel,
) -> Result<f64> {
    let (h, ns, na) = (mdp.horizon, mdp.n_states, mdp.n_actions);
    let trajs = enumerate_trajectories(mdp, log_policy, s0);
    if trajs.len() > 4096 {
        return Err(Error::InvalidMdp(format!("{} trajectories is too many to enumerate pairs", trajs.len())));
    }
    let score_grad = |tau: &[(usize, usize)]| -> Vec<f64> {
        let mut g = vec![0.0; h * ns * na];
        for (t, &(s, a)) in tau.iter().enumerate() {
            for b in 0..na {
                let ind = if a == b { 1.0 } else { 0.0 };
                g[(t * ns + s) * na + b] += ind - log_policy[t][s][b].exp();
            }
        }
        g
    };
    let info: Vec<(f64, f64, f64, Vec<f64>)> = trajs
        .iter()
        .map(|(tau, p)| {
            let ret: f64 = tau.iter().map(|&(s, a)| mdp.rewards[s][a]).sum();
            let implicit: f64 = tau.iter().enumerate().map(|(t, &(s, a))| beta * log_policy[t][s][a]).sum();
            (*p, ret, implicit, score_grad(tau))
        })
        .collect();
    let mut total = vec![0.0; h * ns * na];
    for (p1, ret1, r1, g1) in &info {
        for (p2, ret2, r2, g2) in &info {
            let prefer_first = match labels {
                LabelModel::BradleyTerry => sigmoid(ret1 - ret2),
                LabelModel::Uniform => 0.5,
            };
            // Label (1,0): weight σ(r̂² − r̂¹) on (∇¹ − ∇²); label (0,1): the mirror.
            let coeff = prefer_first * sigmoid(r2 - r1) - (1.0 - prefer_first) * sigmoid(r1 - r2);
            let c = -beta * p1 * p2 * coeff;
            for ((t, a), b) in total.iter_mut().zip(g1).zip(g2) {
                *t += c * (a - b);
            }
        }
    }
    Ok(total.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Gradient norm at the soft-optimal policy under Bradley-Terry labels.
pub fn policy_fixed_point_check(mdp: &TabularMdp, beta: f64, s0: usize) -> Result<f64> {
    let sol = soft_value_iteration(mdp, beta)?;
    expected_gradient_norm(mdp, &sol.log_policy, beta, s0, LabelModel::BradleyTerry)
}

/// Optimal soft value of `s0` by brute force: for deterministic MDPs,
/// `β log Σ_{action sequences} exp(Σ R / β)`.
pub fn brute_force_soft_value(mdp: &TabularMdp, beta: f64, s0: usize) -> Result<f64> {
    let mut returns = Vec::new();
    for actions in action_sequences(mdp.n_actions, mdp.horizon) {
        let tau = roll_deterministic(mdp, s0, &actions)?;
        returns.push(tau.iter().map(|&(s, a)| mdp.rewards[s][a]).sum::<f64>() / beta);
    }
    Ok(beta * logsumexp(returns.into_iter()))
}

/// Entropy-regularized return `E_τ[Σ R − β Σ log π]` of a policy, by
/// enumeration over trajectories.
pub fn entropy_regularized_return(mdp: &TabularMdp, log_policy: &[Vec<Vec<f64>>], beta: f64, s0: usize) -> f64 {
    enumerate_trajectories(mdp, log_policy, s0)
        .iter()
        .map(|(tau, p)| {
            p * tau
                .iter()
                .enumerate()
                .map(|(t, &(s, a))| mdp.rewards[s][a] - beta * log_policy[t][s][a])
                .sum::<f64>()
        })
        .sum()
}

/// One verified quantity in an oracle report.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    pub value: f64,
    /// `None` when the quantity is reported but not asserted.
    pub tolerance: Option<f64>,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.tolerance.is_none_or(|tol| self.value.abs() < tol)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(OracleCheck::passed)
    }

    fn assert(&mut self, name: impl Into<String>, value: f64, tol: f64) {
        self.checks.push(OracleCheck {
            name: name.into(),
            value,
            tolerance: Some(tol),
        });
    }

    fn report(&mut self, name: impl Into<String>, value: f64) {
        self.checks.push(OracleCheck {
            name: name.into(),
            value,
            tolerance: None,
        });
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            match c.tolerance {
                Some(tol) => writeln!(
                    f,
                    "{} {} value={:.3e} tol={:.0e}",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    tol
                )?,
                None => writeln!(f, "INFO {} value={:.6e}", c.name, c.value)?,
            }
        }
        Ok(())
    }
}

/// Run every tabular identity on a batch of random MDPs.
pub fn run_oracle_suite<R: Rng>(rng: &mut R, instances: usize) -> Result<OracleReport> {
    let mut report = OracleReport::default();
    for i in 0..instances {
        for beta in [0.1, 1.0, 10.0] {
            let det = TabularMdp::random(rng, 4, 2, 4, true)?;
            let sol = soft_value_iteration(&det, beta)?;
            report.assert(format!("mdp{i} beta={beta} invariants"), sol.invariant_residual(), 1e-12);
            report.assert(format!("mdp{i} beta={beta} bijection"), check_bijection(&det, &sol), 1e-12);
            let mut worst: f64 = 0.0;
            for actions in action_sequences(det.n_actions, det.horizon) {
                let tau = roll_deterministic(&det, 0, &actions)?;
                worst = worst.max(check_telescoping(&det, &sol, &tau)?.gap);
            }
            report.assert(format!("mdp{i} beta={beta} telescoping"), worst, 1e-10);
            let brute = brute_force_soft_value(&det, beta, 0)?;
            report.assert(format!("mdp{i} beta={beta} soft value vs enumeration"), brute - sol.v[0][0], 1e-9);
        }
        let det = TabularMdp::random(rng, 3, 2, 3, true)?;
        report.assert(format!("mdp{i} fixed-point gradient"), policy_fixed_point_check(&det, 1.0, 0)?, 1e-9);
        let stoch = TabularMdp::random(rng, 3, 2, 3, false)?;
        let sol = soft_value_iteration(&stoch, 1.0)?;
        let trajs = enumerate_trajectories(&stoch, &sol.log_policy, 0);
        let worst = trajs
            .iter()
            .map(|(tau, _)| check_telescoping(&stoch, &sol, tau).map(|g| g.gap))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        report.report(format!("mdp{i} stochastic telescoping gap"), worst);
        report.report(format!("mdp{i} stochastic fixed-point gradient"), policy_fixed_point_check(&stoch, 1.0, 0)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::higher::pair_logit;
    use crate::rng::{stream, Stream};

    #[test]
    fn trivial_single_action() {
        let mdp = TabularMdp::deterministic(1, &[vec![0]], vec![vec![0.0]]).unwrap();
        let sol = soft_value_iteration(&mdp, 1.0).unwrap();
        assert_eq!(sol.v[0][0], 0.0);
        assert_eq!(sol.policy(0, 0, 0), 1.0);
    }

    #[test]
    fn two_armed_closed_form() {
        let mdp = TabularMdp::deterministic(1, &[vec![0, 0]], vec![vec![1.0, 0.0]]).unwrap();
        let sol = soft_value_iteration(&mdp, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((sol.v[0][0] - (e + 1.0).ln()).abs() < 1e-12);
        assert!((sol.v[0][0] - 1.313262).abs() < 1e-6);
        assert!((sol.policy(0, 0, 0) - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_kernels() {
        assert!(TabularMdp::new(1, vec![vec![vec![0.5, 0.4]]; 2], vec![vec![0.0]; 2]).is_err());
        assert!(TabularMdp::new(7, vec![vec![vec![1.0]]], vec![vec![0.0]]).is_err());
        assert!(TabularMdp::new(1, vec![vec![vec![1.0]]], vec![vec![f64::NAN]]).is_err());
        assert!(TabularMdp::new(1, vec![vec![vec![1.0]]; 9], vec![vec![0.0]; 9]).is_err());
    }

    #[test]
    fn zero_reward_values_are_entropy_only() {
        // With no reward every action sequence is equally good: V_0 = H·β·ln|A|.
        let mut rng = stream(1, Stream::Eval);
        let mut mdp = TabularMdp::random(&mut rng, 4, 3, 4, true).unwrap();
        mdp.rewards = vec![vec![0.0; 3]; 4];
        let sol = soft_value_iteration(&mdp, 0.5).unwrap();
        for s in 0..4 {
            assert!((sol.v[0][s] - 4.0 * 0.5 * 3f64.ln()).abs() < 1e-12);
        }
        assert!(check_bijection(&mdp, &sol) < 1e-12);
    }

    #[test]
    fn telescoping_holds_on_every_deterministic_path() {
        let mut rng = stream(2, Stream::Eval);
        for beta in [0.1, 1.0, 10.0] {
            let mdp = TabularMdp::random(&mut rng, 4, 3, 4, true).unwrap();
            let sol = soft_value_iteration(&mdp, beta).unwrap();
            for s0 in 0..4 {
                for actions in action_sequences(3, 4) {
                    let tau = roll_deterministic(&mdp, s0, &actions).unwrap();
                    assert!(check_telescoping(&mdp, &sol, &tau).unwrap().gap < 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_step_gap_is_zero() {
        let mdp = TabularMdp::deterministic(1, &[vec![0, 0]], vec![vec![0.3, -1.2]]).unwrap();
        let sol = soft_value_iteration(&mdp, 0.7).unwrap();
        for a in 0..2 {
            assert!(check_telescoping(&mdp, &sol, &[(0, a)]).unwrap().gap < 1e-15);
        }
    }

    #[test]
    fn telescoping_needs_full_horizon() {
        let mdp = TabularMdp::deterministic(2, &[vec![0]], vec![vec![0.0]]).unwrap();
        let sol = soft_value_iteration(&mdp, 1.0).unwrap();
        assert!(check_telescoping(&mdp, &sol, &[(0, 0)]).is_err());
    }

    #[test]
    fn soft_value_matches_enumeration() {
        let mut rng = stream(3, Stream::Eval);
        for _ in 0..5 {
            let mdp = TabularMdp::random(&mut rng, 5, 2, 5, true).unwrap();
            let sol = soft_value_iteration(&mdp, 0.8).unwrap();
            for s0 in 0..5 {
                let brute = brute_force_soft_value(&mdp, 0.8, s0).unwrap();
                assert!((brute - sol.v[0][s0]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stochastic_soft_value_is_entropy_regularized_return() {
        let mut rng = stream(4, Stream::Eval);
        let mdp = TabularMdp::random(&mut rng, 5, 2, 3, false).unwrap();
        let sol = soft_value_iteration(&mdp, 1.0).unwrap();
        let ret = entropy_regularized_return(&mdp, &sol.log_policy, 1.0, 2);
        assert!((ret - sol.v[0][2]).abs() < 1e-10);
        assert!(check_bijection(&mdp, &sol) < 1e-12);
        assert!(sol.invariant_residual() < 1e-12);
    }

    fn random_pairs<R: Rng>(rng: &mut R, mdp: &TabularMdp, n: usize) -> Vec<TabularPair> {
        (0..n)
            .map(|_| {
                let seq = |rng: &mut R| (0..mdp.horizon).map(|_| rng.gen_range(0..mdp.n_actions)).collect::<Vec<_>>();
                let a1 = seq(rng);
                let a2 = seq(rng);
                TabularPair {
                    tau1: roll_deterministic(mdp, 0, &a1).unwrap(),
                    tau2: roll_deterministic(mdp, 0, &a2).unwrap(),
                    label: [PreferenceLabel::First, PreferenceLabel::Second, PreferenceLabel::Tie][rng.gen_range(0..3)],
                }
            })
            .collect()
    }

    fn random_table<R: Rng>(rng: &mut R, ns: usize, na: usize) -> Vec<Vec<f64>> {
        (0..ns).map(|_| (0..na).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()
    }

    #[test]
    fn regularizer_vanishes_when_values_agree() {
        let mut rng = stream(5, Stream::Eval);
        let mdp = TabularMdp::random(&mut rng, 4, 3, 3, true).unwrap();
        let sol = soft_value_iteration(&mdp, 1.0).unwrap();
        let pairs = random_pairs(&mut rng, &mdp, 6);
        let v = random_table(&mut rng, 4, 3);
        let exact = exact_dipper_objective(&pairs, &sol.log_policy, 1.0, 2.0, &v, &v).unwrap();
        let plain = exact_dipper_objective(&pairs, &sol.log_policy, 1.0, 0.0, &v, &v).unwrap();
        assert!((exact - plain).abs() < 1e-12);
    }

    #[test]
    fn zero_current_value_gives_practical_objective() {
        let mut rng = stream(6, Stream::Eval);
        for _ in 0..5 {
            let mdp = TabularMdp::random(&mut rng, 4, 3, 3, true).unwrap();
            let beta = rng.gen_range(0.2..2.0);
            let lambda = rng.gen_range(0.0..3.0);
            let sol = soft_value_iteration(&mdp, beta).unwrap();
            let pairs = random_pairs(&mut rng, &mdp, 5);
            let v_star = random_table(&mut rng, 4, 3);
            let zero = vec![vec![0.0; 3]; 4];
            let exact = exact_dipper_objective(&pairs, &sol.log_policy, beta, lambda, &zero, &v_star).unwrap();
            let practical = practical_objective(&mdp, &pairs, &sol.log_policy, beta, lambda, &v_star).unwrap();
            assert!((exact - practical).abs() < 1e-12, "{exact} vs {practical}");
        }
    }

    #[test]
    fn direct_pair_logit_agrees() {
        let mut rng = stream(7, Stream::Eval);
        let mdp = TabularMdp::random(&mut rng, 3, 2, 2, true).unwrap();
        let sol = soft_value_iteration(&mdp, 1.0).unwrap();
        let pairs = random_pairs(&mut rng, &mdp, 1);
        let v = random_table(&mut rng, 3, 2);
        let p = &pairs[0];
        let lp = |tau: &[(usize, usize)]| tau.iter().enumerate().map(|(t, &(s, a))| sol.log_policy[t][s][a]).sum::<f64>();
        let vs = |tau: &[(usize, usize)]| tau.iter().map(|&(s, a)| v[s][a]).sum::<f64>();
        let d = pair_logit(lp(&p.tau1), lp(&p.tau2), vs(&p.tau1) - vs(&p.tau2), 0.0, 1.0, 0.5);
        let practical = practical_objective(&mdp, &pairs, &sol.log_policy, 1.0, 0.5, &v).unwrap();
        assert!((pair_loss(d, p.label) - practical).abs() < 1e-12);
    }

    #[test]
    fn bandit_fixed_point() {
        let mdp = TabularMdp::deterministic(1, &[vec![0, 0]], vec![vec![1.0, 0.0]]).unwrap();
        assert!(policy_fixed_point_check(&mdp, 1.0, 0).unwrap() < 1e-6);
    }

    #[test]
    fn fixed_point_on_deterministic_chains() {
        let mut rng = stream(8, Stream::Eval);
        for beta in [0.5, 1.0, 2.0] {
            let mdp = TabularMdp::random(&mut rng, 3, 2, 3, true).unwrap();
            assert!(policy_fixed_point_check(&mdp, beta, 0).unwrap() < 1e-9);
        }
    }

    #[test]
    fn uniform_labels_at_uniform_policy() {
        let mut rng = stream(9, Stream::Eval);
        let mdp = TabularMdp::random(&mut rng, 3, 2, 3, true).unwrap();
        let uniform = vec![vec![vec![-(2f64.ln()); 2]; 3]; 3];
        assert!(expected_gradient_norm(&mdp, &uniform, 1.0, 0, LabelModel::Uniform).unwrap() < 1e-12);
    }

    #[test]
    fn suboptimal_policy_has_gradient() {
        let mdp = TabularMdp::deterministic(1, &[vec![0, 0]], vec![vec![1.0, 0.0]]).unwrap();
        let uniform = vec![vec![vec![-(2f64.ln()); 2]]];
        assert!(expected_gradient_norm(&mdp, &uniform, 1.0, 0, LabelModel::BradleyTerry).unwrap() > 1e-3);
    }

    #[test]
    fn oracle_suite_passes() {
        let report = run_oracle_suite(&mut stream(0, Stream::Eval), 2).unwrap();
        assert!(report.all_passed(), "{report}");
        assert!(report.to_string().lines().any(|l| l.starts_with("INFO")));
    }
}
