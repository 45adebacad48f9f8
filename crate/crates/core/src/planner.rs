//! Planning against a learned model plus bonus: exact value iteration for
//! discrete MDPs, and fitted Q-evaluation with softmax policy updates on
//! frozen features.

use rand::Rng as _;

use crate::diffnet::{Activation, OptimizerState};
use crate::lowrank::LowRankModel;
use crate::mdp::{dot, sample_categorical, softmax, Actor, Policy, TabularMdp};
use crate::spaces::{Point, Transition};
use crate::{Error, Result, Rng};

/// Default sup-norm tolerance of [`value_iteration`].
pub const VI_TOL: f64 = 1e-10;

/// Polyak rate for the target copy of [`AugmentedQ`].
pub const TARGET_TAU: f64 = 0.005;

#[derive(Clone, Debug, PartialEq)]
pub struct ValueIteration {
    pub v: Vec<f64>,
    /// `q[s * A + a]`
    pub q: Vec<f64>,
    /// Deterministic argmax policy, lowest index on ties.
    pub greedy: Policy,
    pub sweeps: usize,
}

/// Value iteration on `mdp.p` with the given reward table (`s * A + a`).
/// Terminal states have value zero.
pub fn value_iteration(mdp: &TabularMdp, reward: &[f64], gamma: f64, tol: f64) -> Result<ValueIteration> {
    value_iteration_from(mdp, reward, gamma, tol, None)
}

/// As [`value_iteration`], starting from `v0`.
pub fn value_iteration_from(
    mdp: &TabularMdp,
    reward: &[f64],
    gamma: f64,
    tol: f64,
    v0: Option<&[f64]>,
) -> Result<ValueIteration> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid("gamma must lie in (0, 1)"));
    }
    if reward.len() != ns * na {
        return Err(Error::DimensionMismatch { expected: ns * na, got: reward.len() });
    }
    if reward.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward".into()));
    }
    let mut v = match v0 {
        Some(v0) if v0.len() == ns => v0.to_vec(),
        Some(v0) => return Err(Error::DimensionMismatch { expected: ns, got: v0.len() }),
        None => vec![0.0; ns],
    };
    let mut q = vec![0.0; ns * na];
    let mut sweeps = 0;
    // contraction bound: enough sweeps to go from any start to tol
    let r_max = reward.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let budget = 100 + ((tol * (1.0 - gamma) / (r_max + 1.0)).ln() / gamma.ln()).ceil().max(0.0) as usize * 2;
    loop {
        sweeps += 1;
        backup(mdp, reward, gamma, &v, &mut q);
        let mut residual: f64 = 0.0;
        for s in 0..ns {
            let nv = if mdp.terminal[s] { 0.0 } else { q[s * na..(s + 1) * na].iter().cloned().fold(f64::NEG_INFINITY, f64::max) };
            residual = residual.max((nv - v[s]).abs());
            v[s] = nv;
        }
        if residual < tol {
            break;
        }
        if sweeps > budget {
            return Err(Error::Diverged { what: "value iteration".into(), step: sweeps });
        }
    }
    backup(mdp, reward, gamma, &v, &mut q);
    let actions: Vec<usize> = (0..ns).map(|s| argmax(&q[s * na..(s + 1) * na])).collect();
    Ok(ValueIteration { v, q, greedy: Policy::greedy(na, &actions)?, sweeps })
}

fn backup(mdp: &TabularMdp, reward: &[f64], gamma: f64, v: &[f64], q: &mut [f64]) {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    for s in 0..ns {
        for a in 0..na {
            q[s * na + a] = if mdp.terminal[s] { 0.0 } else { reward[s * na + a] + gamma * dot(mdp.row(s, a), v) };
        }
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Frozen feature map used by the planner.
pub trait FeatureMap {
    fn dim(&self) -> usize;
    fn features(&self, s: &Point, a: &Point) -> Result<Vec<f64>>;
}

impl FeatureMap for LowRankModel {
    fn dim(&self) -> usize {
        self.feature_dim()
    }

    fn features(&self, s: &Point, a: &Point) -> Result<Vec<f64>> {
        self.phi(s, a)
    }
}

/// One-hot `e_(s,a)` over a finite MDP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OneHotFeatures {
    pub n_states: usize,
    pub n_actions: usize,
}

impl FeatureMap for OneHotFeatures {
    fn dim(&self) -> usize {
        self.n_states * self.n_actions
    }

    fn features(&self, s: &Point, a: &Point) -> Result<Vec<f64>> {
        match (s, a) {
            (Point::Discrete(s), Point::Discrete(a)) if *s < self.n_states && *a < self.n_actions => {
                let mut v = vec![0.0; self.dim()];
                v[s * self.n_actions + a] = 1.0;
                Ok(v)
            }
            _ => Err(Error::invalid("one-hot features need an in-range discrete pair")),
        }
    }
}

/// Features of every action at `s`, in action order.
pub fn action_features(features: &dyn FeatureMap, s: &Point, n_actions: usize) -> Result<Vec<Vec<f64>>> {
    (0..n_actions).map(|a| features.features(s, &Point::Discrete(a))).collect()
}

/// Adapts a (possibly feature-based) policy to [`Actor`].
pub struct FeaturePolicy<'a> {
    pub policy: &'a Policy,
    pub features: &'a dyn FeatureMap,
}

impl Actor for FeaturePolicy<'_> {
    fn action_probs(&self, state: &Point) -> Result<Vec<f64>> {
        match self.policy {
            Policy::FeatureSoftmax { n_actions, .. } => {
                let f = action_features(self.features, state, *n_actions)?;
                self.policy.probs(state, Some(&f))
            }
            p => p.probs(state, None),
        }
    }
}

/// `Q(s,a) = w1' phi + w2' sigma(w3' phi)` with a Polyak-averaged target.
///
/// Parameters are laid out as `[w1 (d), w2 (m), w3 (d x m row-major)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedQ {
    pub d: usize,
    pub m: usize,
    pub sigma: Activation,
    pub params: Vec<f64>,
    pub target: Vec<f64>,
    pub tau: f64,
}

impl AugmentedQ {
    /// `w1 = w2 = 0`, `w3` Glorot-uniform.
    pub fn new(d: usize, m: usize, sigma: Activation, tau: f64, rng: &mut Rng) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if !matches!(sigma, Activation::Tanh | Activation::Relu) {
            return Err(Error::invalid("augmented Q supports tanh or relu"));
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::invalid("tau must lie in (0, 1]"));
        }
        let mut params = vec![0.0; d + m + d * m];
        let limit = (6.0 / (d + m).max(1) as f64).sqrt();
        for w in &mut params[d + m..] {
            *w = rng.random_range(-limit..limit);
        }
        Ok(AugmentedQ { d, m, sigma, target: params.clone(), params, tau })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn eval(&self, params: &[f64], phi: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (d, m) = (self.d, self.m);
        let mut q = dot(&params[..d], phi);
        let w2 = &params[d..d + m];
        let w3 = &params[d + m..];
        let mut hidden = vec![0.0; m];
        for (i, p) in phi.iter().enumerate() {
            if *p != 0.0 {
                for j in 0..m {
                    hidden[j] += w3[i * m + j] * p;
                }
            }
        }
        let act: Vec<f64> = hidden.iter().map(|h| self.sigma.apply(*h)).collect();
        q += dot(w2, &act);
        if let Some(g) = grad {
            g[..d].iter_mut().zip(phi).for_each(|(a, b)| *a += b);
            g[d..d + m].iter_mut().zip(&act).for_each(|(a, b)| *a += b);
            for j in 0..m {
                let c = w2[j] * self.sigma.derivative(hidden[j], act[j]);
                if c != 0.0 {
                    for (i, p) in phi.iter().enumerate() {
                        g[d + m + i * m + j] += c * p;
                    }
                }
            }
        }
        q
    }

    pub fn value(&self, phi: &[f64]) -> f64 {
        self.eval(&self.params, phi, None)
    }

    pub fn target_value(&self, phi: &[f64]) -> f64 {
        self.eval(&self.target, phi, None)
    }

    /// `target <- (1 - tau) target + tau online`
    pub fn polyak_update(&mut self) {
        let tau = self.tau;
        self.target.iter_mut().zip(&self.params).for_each(|(t, p)| *t = (1.0 - tau) * *t + tau * p);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyConfig {
    pub weight: f64,
    pub enabled: bool,
}

impl EntropyConfig {
    pub fn off() -> Self {
        EntropyConfig { weight: 0.0, enabled: false }
    }

    pub fn effective(&self) -> f64 {
        if self.enabled {
            self.weight
        } else {
            0.0
        }
    }
}

/// One TD regression sample with its bootstrap inputs resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct QSample {
    pub phi: Vec<f64>,
    pub reward: f64,
    /// Signed reward adjustment: `+b` optimistic, `-b` pessimistic.
    pub bonus: f64,
    /// `log pi(a|s)` of the taken action.
    pub log_pi: f64,
    /// `phi(s', a')` with `a' ~ pi(.|s')`.
    pub next_phi: Vec<f64>,
    pub done: bool,
}

/// Resolves `a' ~ pi(.|s')` and the adjustments for a transition batch.
pub fn q_samples(
    batch: &[Transition],
    features: &dyn FeatureMap,
    policy: &Policy,
    bonus_fn: &dyn Fn(&[f64]) -> Result<f64>,
    rng: &mut Rng,
) -> Result<Vec<QSample>> {
    let actor = FeaturePolicy { policy, features };
    batch
        .iter()
        .map(|t| {
            let phi = features.features(&t.state, &t.action)?;
            let probs = actor.action_probs(&t.state)?;
            let a = t.action.index().ok_or_else(|| Error::invalid("planner needs discrete actions"))?;
            let log_pi = probs.get(a).ok_or_else(|| Error::invalid("action out of range"))?.max(1e-300).ln();
            let next_probs = actor.action_probs(&t.next_state)?;
            let a_next = sample_categorical(&next_probs, rng);
            let next_phi = features.features(&t.next_state, &Point::Discrete(a_next))?;
            let bonus = bonus_fn(&phi)?;
            Ok(QSample { phi, reward: t.reward, bonus, log_pi, next_phi, done: t.terminal })
        })
        .collect()
}

/// `(1/n) sum (Q(s,a) - y + w log pi(a|s))^2` with
/// `y = r + b + gamma (1 - done) Q_target(s', a')`, and its gradient.
pub fn td_loss(q: &AugmentedQ, params: &[f64], samples: &[QSample], gamma: f64, entropy: EntropyConfig) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::NoData);
    }
    let n = samples.len() as f64;
    let w = entropy.effective();
    let mut grad = vec![0.0; q.num_params()];
    let mut scratch = vec![0.0; q.num_params()];
    let mut loss = 0.0;
    for s in samples {
        if s.phi.len() != q.d || s.next_phi.len() != q.d {
            return Err(Error::DimensionMismatch { expected: q.d, got: s.phi.len() });
        }
        let boot = if s.done { 0.0 } else { gamma * q.target_value(&s.next_phi) };
        let y = s.reward + s.bonus + boot;
        scratch.iter_mut().for_each(|v| *v = 0.0);
        let qv = q.eval(params, &s.phi, Some(&mut scratch));
        let delta = qv - y + w * s.log_pi;
        loss += delta * delta / n;
        grad.iter_mut().zip(&scratch).for_each(|(g, d)| *g += 2.0 * delta * d / n);
    }
    if !loss.is_finite() {
        return Err(Error::Diverged { what: "Q".into(), step: 0 });
    }
    Ok((loss, grad))
}

/// One gradient step on the TD loss followed by a Polyak target update.
/// Only `(w1, w2, w3)` move; features are read-only.
#[allow(clippy::too_many_arguments)]
pub fn fitted_q_step(
    q: &mut AugmentedQ,
    batch: &[Transition],
    features: &dyn FeatureMap,
    policy: &Policy,
    bonus_fn: &dyn Fn(&[f64]) -> Result<f64>,
    gamma: f64,
    entropy: EntropyConfig,
    optimizer: &mut OptimizerState,
    rng: &mut Rng,
) -> Result<f64> {
    let samples = q_samples(batch, features, policy, bonus_fn, rng)?;
    fitted_q_step_on(q, &samples, gamma, entropy, optimizer)
}

pub fn fitted_q_step_on(
    q: &mut AugmentedQ,
    samples: &[QSample],
    gamma: f64,
    entropy: EntropyConfig,
    optimizer: &mut OptimizerState,
) -> Result<f64> {
    let params = q.params.clone();
    let (loss, grad) = td_loss(q, &params, samples, gamma, entropy)?;
    optimizer
        .step(&mut q.params, &grad)
        .map_err(|_| Error::Diverged { what: "Q".into(), step: optimizer.steps_taken() as usize })?;
    q.polyak_update();
    Ok(loss)
}

/// Regularizer of the softmax policy objective.
#[derive(Clone, Copy, Debug)]
pub enum PolicyRegularizer<'a> {
    /// `- w sum_a pi log pi` (entropy bonus).
    Entropy(f64),
    /// `- reg KL(pi || pi_b)`; `behavior_logp[i][a]` per batch state.
    Kl { reg: f64, behavior_logp: &'a [Vec<f64>] },
}

pub fn policy_params(policy: &Policy) -> Result<Vec<f64>> {
    match policy {
        Policy::TabularSoftmax { logits, .. } => Ok(logits.clone()),
        Policy::FeatureSoftmax { weights, .. } => Ok(weights.clone()),
        _ => Err(Error::invalid("only softmax policies have trainable parameters")),
    }
}

pub fn set_policy_params(policy: &mut Policy, params: &[f64]) -> Result<()> {
    let target = match policy {
        Policy::TabularSoftmax { logits, .. } => logits,
        Policy::FeatureSoftmax { weights, .. } => weights,
        _ => return Err(Error::invalid("only softmax policies have trainable parameters")),
    };
    if target.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: target.len(), got: params.len() });
    }
    target.copy_from_slice(params);
    Ok(())
}

/// Policy inputs for one batch state: the state, `Q(s, .)` and, for
/// feature policies, `phi(s, .)`.
#[derive(Clone, Debug)]
pub struct PolicyState {
    pub state: Point,
    pub q: Vec<f64>,
    pub features: Option<Vec<Vec<f64>>>,
}

/// Negated all-actions objective
/// `-(1/n) sum_s sum_a pi(a|s) [Q(s,a) - reg term]` and its gradient
/// w.r.t. the policy parameters `params`.
pub fn policy_surrogate(
    policy: &Policy,
    params: &[f64],
    batch: &[PolicyState],
    regularizer: PolicyRegularizer<'_>,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::NoData);
    }
    let mut pol = policy.clone();
    set_policy_params(&mut pol, params)?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (i, ps) in batch.iter().enumerate() {
        let na = pol.n_actions();
        if ps.q.len() != na {
            return Err(Error::DimensionMismatch { expected: na, got: ps.q.len() });
        }
        let logits = policy_logits(&pol, ps)?;
        let pi = softmax(&logits);
        let log_pi: Vec<f64> = logits.iter().map(|l| l - crate::mdp::log_sum_exp(&logits)).collect();
        // A_a so that J = sum_a pi_a A_a and dJ/dlogit_b = pi_b (A_b - sum pi A)
        let adv: Vec<f64> = match regularizer {
            PolicyRegularizer::Entropy(w) => (0..na).map(|a| ps.q[a] - w * log_pi[a]).collect(),
            PolicyRegularizer::Kl { reg, behavior_logp } => {
                let b = behavior_logp.get(i).ok_or_else(|| Error::invalid("missing behavior log-probabilities"))?;
                (0..na).map(|a| ps.q[a] - reg * (log_pi[a] - b[a])).collect()
            }
        };
        let j: f64 = dot(&pi, &adv);
        loss -= j / n;
        let dlogits: Vec<f64> = (0..na).map(|b| -pi[b] * (adv[b] - j) / n).collect();
        match &pol {
            Policy::TabularSoftmax { n_actions, .. } => {
                let s = ps.state.index().expect("checked by policy_logits");
                for b in 0..na {
                    grad[s * n_actions + b] += dlogits[b];
                }
            }
            Policy::FeatureSoftmax { temperature, .. } => {
                let f = ps.features.as_ref().expect("checked by policy_logits");
                for b in 0..na {
                    grad.iter_mut().zip(&f[b]).for_each(|(g, x)| *g += dlogits[b] * x / temperature);
                }
            }
            _ => unreachable!("set_policy_params accepted the policy"),
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("policy surrogate".into()));
    }
    Ok((loss, grad))
}

fn policy_logits(policy: &Policy, ps: &PolicyState) -> Result<Vec<f64>> {
    match policy {
        Policy::TabularSoftmax { n_states, n_actions, logits } => match ps.state {
            Point::Discrete(s) if s < *n_states => Ok(logits[s * n_actions..(s + 1) * n_actions].to_vec()),
            _ => Err(Error::invalid("state outside the tabular policy")),
        },
        Policy::FeatureSoftmax { n_actions, weights, temperature } => {
            let f = ps.features.as_ref().ok_or_else(|| Error::invalid("feature policy needs action features"))?;
            if f.len() != *n_actions {
                return Err(Error::DimensionMismatch { expected: *n_actions, got: f.len() });
            }
            Ok(f.iter().map(|x| dot(weights, x) / temperature).collect())
        }
        _ => Err(Error::invalid("only softmax policies have trainable parameters")),
    }
}

/// Builds the per-state policy inputs from a Q-function on frozen features.
pub fn policy_states(states: &[Point], q: &AugmentedQ, features: &dyn FeatureMap, n_actions: usize, keep_features: bool) -> Result<Vec<PolicyState>> {
    states
        .iter()
        .map(|s| {
            let f = action_features(features, s, n_actions)?;
            let qv = f.iter().map(|x| q.value(x)).collect();
            Ok(PolicyState { state: s.clone(), q: qv, features: keep_features.then_some(f) })
        })
        .collect()
}

/// Ascent step on `E_s sum_a pi(a|s) (Q(s,a) - w log pi(a|s))`.
pub fn policy_gradient_step(
    policy: &mut Policy,
    batch: &[PolicyState],
    entropy: EntropyConfig,
    optimizer: &mut OptimizerState,
) -> Result<f64> {
    regularized_step(policy, batch, PolicyRegularizer::Entropy(entropy.effective()), optimizer)
}

/// Ascent step on `E_s [sum_a pi Q - reg KL(pi(.|s) || pi_b(.|s))]`.
pub fn offline_regularized_step(
    policy: &mut Policy,
    batch: &[PolicyState],
    behavior_logp: &[Vec<f64>],
    reg_weight: f64,
    optimizer: &mut OptimizerState,
) -> Result<f64> {
    if !(reg_weight >= 0.0) {
        return Err(Error::invalid("reg_weight must be nonnegative"));
    }
    regularized_step(policy, batch, PolicyRegularizer::Kl { reg: reg_weight, behavior_logp }, optimizer)
}

fn regularized_step(
    policy: &mut Policy,
    batch: &[PolicyState],
    regularizer: PolicyRegularizer<'_>,
    optimizer: &mut OptimizerState,
) -> Result<f64> {
    let mut params = policy_params(policy)?;
    let (loss, grad) = policy_surrogate(policy, &params, batch, regularizer)?;
    optimizer
        .step(&mut params, &grad)
        .map_err(|_| Error::Diverged { what: "policy".into(), step: optimizer.steps_taken() as usize })?;
    set_policy_params(policy, &params)?;
    Ok(loss)
}
