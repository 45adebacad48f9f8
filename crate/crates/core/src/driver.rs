//! The online optimistic loop, the offline pessimistic loop, replay
//! buffering, the coverage diagnostic and the offline dataset format.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};

use log::{info, warn};
use nalgebra::DMatrix;
use rand::Rng as _;

use crate::bonus::{bonus, BonusConfig, BonusMode, CovarianceState};
use crate::diffnet::{Activation, OptimizerState};
use crate::lowrank::{LowRankModel, Normalizer};
use crate::mdp::{check_gamma, sample_categorical, Actor, Environment, OccupancyEntry, OccupancyEstimate, Policy, TabularMdp};
use crate::nce::{train_representation, NceConfig, NoiseDistribution};
use crate::planner::{
    action_features, argmax, fitted_q_step_on, offline_regularized_step, policy_gradient_step, policy_states, q_samples,
    value_iteration_from, AugmentedQ, ValueIteration, EntropyConfig, FeatureMap, FeaturePolicy, PolicyState, TARGET_TAU,
};
use crate::spaces::{Point, Space, Transition};
use crate::{derive_seed, rng, Error, Result, Rng};

/// Sup-norm tolerance of the per-epoch tabular planner.
pub const PLANNER_TOL: f64 = 1e-8;

/// Monte-Carlo normalizer size for held-out likelihood on continuous spaces.
const HELDOUT_MC: usize = 1000;

/// FIFO buffer of transitions.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<Transition>,
    insertion_count: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("buffer capacity must be positive"));
        }
        Ok(ReplayBuffer { capacity, entries: VecDeque::new(), insertion_count: 0 })
    }

    pub fn push(&mut self, t: Transition) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(t);
        self.insertion_count += 1;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn insertion_count(&self) -> u64 {
        self.insertion_count
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter()
    }

    /// Oldest-first contiguous view.
    pub fn as_slice(&mut self) -> &[Transition] {
        self.entries.make_contiguous()
    }

    pub fn sample<'a>(&'a self, n: usize, rng: &mut Rng) -> Vec<&'a Transition> {
        (0..n).map(|_| &self.entries[rng.random_range(0..self.entries.len())]).collect()
    }
}

/// `(1 - eps) pi + eps * uniform`.
pub struct EpsilonMixture<'a> {
    pub inner: &'a dyn Actor,
    pub epsilon: f64,
}

impl Actor for EpsilonMixture<'_> {
    fn action_probs(&self, state: &Point) -> Result<Vec<f64>> {
        let p = self.inner.action_probs(state)?;
        let u = 1.0 / p.len() as f64;
        Ok(p.iter().map(|v| (1.0 - self.epsilon) * v + self.epsilon * u).collect())
    }
}

/// Inner planner used after each representation/bonus update.
#[derive(Clone, Debug, PartialEq)]
pub enum PlannerMode {
    /// Exact value iteration on the renormalized learned kernel.
    Tabular,
    /// Fitted Q-evaluation plus softmax policy updates on frozen features.
    Features(FeaturePlannerConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePlannerConfig {
    /// Width `m` of the nonlinear Q head.
    pub hidden: usize,
    pub sigma: Activation,
    pub q_learning_rate: f64,
    pub policy_learning_rate: f64,
    pub batch_size: usize,
    pub entropy: EntropyConfig,
    pub tau: f64,
    pub policy_temperature: f64,
}

impl Default for FeaturePlannerConfig {
    fn default() -> Self {
        FeaturePlannerConfig {
            hidden: 32,
            sigma: Activation::Tanh,
            q_learning_rate: 1e-3,
            policy_learning_rate: 1e-2,
            batch_size: 64,
            entropy: EntropyConfig { weight: 0.01, enabled: true },
            tau: TARGET_TAU,
            policy_temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineConfig {
    /// Number of epochs `N`.
    pub episodes: usize,
    /// Environment steps per epoch.
    pub collect_per_epoch: usize,
    pub repr_update_period: usize,
    /// NCE gradient steps per representation update; 0 freezes the model.
    pub repr_steps: usize,
    pub model_learning_rate: f64,
    pub planner_steps_per_epoch: usize,
    pub epsilon_mix: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub planner: PlannerMode,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            episodes: 1000,
            collect_per_epoch: 8,
            repr_update_period: 500,
            repr_steps: 200,
            model_learning_rate: 1e-3,
            planner_steps_per_epoch: 1,
            epsilon_mix: 0.05,
            alpha: 1.0,
            lambda: 1.0,
            gamma: 0.99,
            buffer_capacity: 1_000_000,
            planner: PlannerMode::Tabular,
            seed: 0,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.collect_per_epoch == 0 || self.repr_update_period == 0 || self.planner_steps_per_epoch == 0 {
            return Err(Error::invalid("collect_per_epoch, repr_update_period and planner_steps_per_epoch must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_mix) {
            return Err(Error::invalid("epsilon_mix must lie in [0, 1]"));
        }
        if !(self.model_learning_rate > 0.0) {
            return Err(Error::invalid("model_learning_rate must be positive"));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::invalid("buffer_capacity must be positive"));
        }
        BonusConfig::new(self.alpha, BonusMode::Bonus)?;
        if !(self.lambda > 0.0) {
            return Err(Error::invalid("lambda must be positive"));
        }
        check_gamma(self.gamma)?;
        if let PlannerMode::Features(p) = &self.planner {
            p.validate()?;
        }
        Ok(())
    }
}

impl FeaturePlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("planner batch_size must be positive"));
        }
        if !(self.q_learning_rate > 0.0 && self.policy_learning_rate > 0.0 && self.policy_temperature > 0.0) {
            return Err(Error::invalid("planner learning rates and temperature must be positive"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid("tau must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// One row of the online metrics trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub env_steps: usize,
    /// Mean undiscounted return of the last (up to) 20 finished episodes.
    pub episode_return: f64,
    /// Mean bonus at the pairs collected this epoch.
    pub bonus_mean: f64,
    /// Mean NCE loss over the last representation update.
    pub nce_loss: f64,
    /// Mean log-density of fresh transitions before they were trained on,
    /// measured at each representation update.
    pub heldout_loglik: f64,
    /// TD loss of the last fitted-Q step (feature planner only).
    pub td_loss: f64,
}

pub const METRICS_HEADER: &str = "epoch,env_steps,episode_return,bonus_mean,nce_loss,heldout_loglik,td_loss";

pub fn write_metrics_csv<W: Write>(rows: &[EpochMetrics], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.epoch, r.env_steps, r.episode_return, r.bonus_mean, r.nce_loss, r.heldout_loglik, r.td_loss
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct OnlineOutcome {
    pub policy: Policy,
    pub model: LowRankModel,
    pub covariance: CovarianceState,
    /// Final Q-function of the feature planner.
    pub q: Option<AugmentedQ>,
    /// Final planned values (tabular planner).
    pub values: Option<Vec<f64>>,
}

/// Empirical mean rewards and observed terminal states of a discrete buffer.
#[derive(Clone, Debug)]
struct TabularStats {
    n_actions: usize,
    reward_sum: Vec<f64>,
    count: Vec<u64>,
    terminal: Vec<bool>,
}

impl TabularStats {
    fn new(ns: usize, na: usize) -> Self {
        TabularStats { n_actions: na, reward_sum: vec![0.0; ns * na], count: vec![0; ns * na], terminal: vec![false; ns] }
    }

    fn add(&mut self, t: &Transition) -> Result<()> {
        let (Some(s), Some(a), Some(n)) = (t.state.index(), t.action.index(), t.next_state.index()) else {
            return Err(Error::invalid("tabular planner needs discrete transitions"));
        };
        let i = s * self.n_actions + a;
        self.reward_sum[i] += t.reward;
        self.count[i] += 1;
        if t.terminal {
            self.terminal[n] = true;
        }
        Ok(())
    }

    /// Unvisited pairs get reward 0.
    fn mean_rewards(&self) -> Vec<f64> {
        self.reward_sum
            .iter()
            .zip(&self.count)
            .map(|(r, c)| if *c == 0 { 0.0 } else { r / *c as f64 })
            .collect()
    }
}

/// Learned discrete MDP; rewards are supplied separately to the planner.
fn learned_mdp(model: &LowRankModel, terminal: &[bool]) -> Result<TabularMdp> {
    let (Some(ns), Some(na)) = (model.state_space.cardinality(), model.action_space.cardinality()) else {
        return Err(Error::invalid("tabular planner needs discrete spaces"));
    };
    let p = model.learned_kernel()?;
    let r = vec![0.0; ns * na];
    let rho = vec![1.0 / ns as f64; ns];
    TabularMdp::with_terminal(ns, na, p, r, rho, terminal.to_vec())
}

/// `phi(s, a)` from the per-pair table when one is cached (tabular mode,
/// valid until the next representation update).
fn pair_phi<'a>(model: &LowRankModel, table: Option<&'a [Vec<f64>]>, na: usize, t: &Transition) -> Result<std::borrow::Cow<'a, [f64]>> {
    match (table, t.state.index(), t.action.index()) {
        (Some(table), Some(s), Some(a)) => Ok(std::borrow::Cow::Borrowed(&table[s * na + a])),
        _ => Ok(std::borrow::Cow::Owned(model.phi(&t.state, &t.action)?)),
    }
}

fn all_pair_features(model: &LowRankModel, ns: usize, na: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ns * na);
    for s in 0..ns {
        out.extend(action_features(model, &Point::Discrete(s), na)?);
    }
    Ok(out)
}

/// Mean log-likelihood of `data` under the model.
pub fn mean_log_likelihood(model: &LowRankModel, data: &[Transition], rng: &mut Rng) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::NoData);
    }
    let normalizer = if model.state_space.is_discrete() { Normalizer::ExactDiscrete } else { Normalizer::MonteCarlo(HELDOUT_MC) };
    let mut total = 0.0;
    for t in data {
        let (density, _) = model.conditional_density(&t.state, &t.action, &t.next_state, normalizer, rng)?;
        total += density.max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / data.len() as f64)
}

fn divergence(what: &str, epoch: usize, e: Error) -> Error {
    match e {
        Error::Diverged { .. } | Error::NonFinite(_) => Error::Diverged { what: what.into(), step: epoch },
        e => e,
    }
}

/// Online loop with an optimistic elliptical bonus.
///
/// Each epoch collects `collect_per_epoch` environment steps from
/// geometric-restart rollouts of the current policy mixed with `epsilon_mix`
/// uniform actions, periodically retrains the representation on the buffer
/// with the configured NCE objective, maintains the feature covariance and
/// replans against `r + b`. Rows are appended to `metrics` as epochs
/// complete, so a failing run keeps the trace up to the failure.
pub fn run_ctrl_ucb<E: Environment + ?Sized>(
    env: &E,
    config: &OnlineConfig,
    mut model: LowRankModel,
    nce: &NceConfig,
    metrics: &mut Vec<EpochMetrics>,
) -> Result<OnlineOutcome> {
    config.validate()?;
    if config.repr_steps > 0 {
        nce.validate()?;
    }
    let na = env.n_actions();
    if na == 0 {
        return Err(Error::invalid("environment needs a finite action set"));
    }
    let mut env_rng = rng(derive_seed(config.seed, 1));
    let mut learn_rng = rng(derive_seed(config.seed, 2));
    let mut plan_rng = rng(derive_seed(config.seed, 3));
    let bonus_cfg = BonusConfig::new(config.alpha, BonusMode::Bonus)?;
    let noise = NoiseDistribution::Base(model.base_measure.clone());
    let mut model_opt = OptimizerState::adam(config.model_learning_rate);
    let d = model.feature_dim();
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;
    let mut cov = CovarianceState::new(d, config.lambda)?;

    let tabular = matches!(config.planner, PlannerMode::Tabular);
    let ns = env.state_space().cardinality();
    let mut stats = match (tabular, ns) {
        (true, Some(ns)) => Some(TabularStats::new(ns, na)),
        (true, None) => return Err(Error::invalid("tabular planner needs a discrete state space")),
        _ => None,
    };
    let mut pair_features: Option<Vec<Vec<f64>>> = None;
    let mut learned: Option<TabularMdp> = None;
    let mut values: Option<Vec<f64>> = None;

    let (mut q, mut q_opt, mut pol_opt, feat_cfg) = match &config.planner {
        PlannerMode::Features(fc) => (
            Some(AugmentedQ::new(d, fc.hidden, fc.sigma, fc.tau, &mut plan_rng)?),
            OptimizerState::adam(fc.q_learning_rate),
            OptimizerState::adam(fc.policy_learning_rate),
            Some(fc.clone()),
        ),
        PlannerMode::Tabular => (None, OptimizerState::sgd(1.0), OptimizerState::sgd(1.0), None),
    };
    let mut policy = match &feat_cfg {
        Some(fc) => Policy::FeatureSoftmax { n_actions: na, weights: vec![0.0; d], temperature: fc.policy_temperature },
        None => Policy::uniform(na),
    };

    let mut state: Option<Point> = None;
    let mut running_return = 0.0;
    let mut finished: VecDeque<f64> = VecDeque::new();
    let mut nce_loss = f64::NAN;
    let mut heldout = f64::NAN;
    let mut td_loss = f64::NAN;
    let mut env_steps = 0;

    for epoch in 0..config.episodes {
        // (1) collect
        let mut fresh = Vec::with_capacity(config.collect_per_epoch);
        {
            let base = FeaturePolicy { policy: &policy, features: &model };
            let actor = EpsilonMixture { inner: &base, epsilon: config.epsilon_mix };
            for _ in 0..config.collect_per_epoch {
                let s = match state.take() {
                    Some(s) => s,
                    None => env.reset(&mut env_rng),
                };
                let a = actor.sample_action(&s, &mut env_rng)?;
                let step = env.step(&s, &a, &mut env_rng)?;
                if !step.next.is_finite() || !step.reward.is_finite() {
                    return Err(Error::Environment(format!("non-finite step at epoch {epoch}")));
                }
                env_steps += 1;
                running_return += step.reward;
                let done = step.terminal;
                fresh.push(Transition::new(s, a, step.reward, step.next.clone(), done)?);
                if done || env_rng.random::<f64>() < 1.0 - config.gamma {
                    finished.push_back(running_return);
                    if finished.len() > 20 {
                        finished.pop_front();
                    }
                    running_return = 0.0;
                } else {
                    state = Some(step.next);
                }
            }
        }
        let retrain = epoch % config.repr_update_period == 0;
        if retrain && config.repr_steps > 0 && epoch > 0 {
            heldout = mean_log_likelihood(&model, &fresh, &mut learn_rng).map_err(|e| divergence("representation", epoch, e))?;
        }
        // (2) append
        let mut bonus_sum = 0.0;
        for t in &fresh {
            if let Some(st) = stats.as_mut() {
                st.add(t)?;
            }
            let phi = pair_phi(&model, pair_features.as_deref(), na, t)?;
            bonus_sum += bonus(&cov, &phi, &bonus_cfg)?;
            buffer.push(t.clone());
        }
        // (3) representation update, (4) covariance rebuild
        if retrain {
            if config.repr_steps > 0 {
                let out = train_representation(&mut model, buffer.as_slice(), &noise, nce, &mut model_opt, config.repr_steps, &mut learn_rng)
                    .map_err(|e| divergence("representation learning", epoch, e))?;
                let tail = &out.trace[out.trace.len().saturating_sub(10)..];
                nce_loss = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
            }
            if let (Some(ns), true) = (ns, tabular) {
                pair_features = Some(all_pair_features(&model, ns, na)?);
                learned = None;
            }
            let feats: Vec<std::borrow::Cow<'_, [f64]>> =
                buffer.iter().map(|t| pair_phi(&model, pair_features.as_deref(), na, t)).collect::<Result<_>>()?;
            cov = CovarianceState::from_features(d, config.lambda, feats.iter().map(|f| f.as_ref()))?;
        } else {
            for t in &fresh {
                cov.rank_one_update(&pair_phi(&model, pair_features.as_deref(), na, t)?)?;
            }
        }
        // (5) bonus and (6) planning
        match &feat_cfg {
            None => {
                let st = stats.as_ref().expect("tabular stats");
                let feats = pair_features.as_ref().expect("built at epoch 0");
                let mut mdp = match learned.take() {
                    Some(m) => m,
                    None => learned_mdp(&model, &st.terminal)?,
                };
                mdp.terminal.clone_from(&st.terminal);
                let r = st.mean_rewards();
                let reward: Vec<f64> = r
                    .iter()
                    .zip(feats)
                    .map(|(r, f)| Ok(r + bonus(&cov, f, &bonus_cfg)?))
                    .collect::<Result<_>>()?;
                let vi = value_iteration_from(&mdp, &reward, config.gamma, PLANNER_TOL, values.as_deref())
                    .map_err(|e| divergence("planner", epoch, e))?;
                policy = vi.greedy;
                values = Some(vi.v);
                learned = Some(mdp);
            }
            Some(fc) => {
                let q = q.as_mut().expect("feature planner");
                for _ in 0..config.planner_steps_per_epoch {
                    let batch: Vec<Transition> = buffer.sample(fc.batch_size, &mut plan_rng).into_iter().cloned().collect();
                    let bonus_fn = |phi: &[f64]| bonus(&cov, phi, &bonus_cfg);
                    let samples = q_samples(&batch, &model, &policy, &bonus_fn, &mut plan_rng)?;
                    td_loss = fitted_q_step_on(q, &samples, config.gamma, fc.entropy, &mut q_opt)
                        .map_err(|e| divergence("planner", epoch, e))?;
                    let states: Vec<Point> = batch.iter().map(|t| t.state.clone()).collect();
                    let ps = policy_states(&states, q, &model, na, true)?;
                    policy_gradient_step(&mut policy, &ps, fc.entropy, &mut pol_opt).map_err(|e| divergence("planner", epoch, e))?;
                }
            }
        }
        let episode_return = if finished.is_empty() { 0.0 } else { finished.iter().sum::<f64>() / finished.len() as f64 };
        metrics.push(EpochMetrics {
            epoch,
            env_steps,
            episode_return,
            bonus_mean: bonus_sum / fresh.len() as f64,
            nce_loss,
            heldout_loglik: heldout,
            td_loss,
        });
        if retrain {
            info!("epoch {epoch}: steps {env_steps}, return {episode_return:.4}, nce {nce_loss:.4}");
        }
    }
    Ok(OnlineOutcome { policy, model, covariance: cov, q, values })
}

#[derive(Clone, Debug, PartialEq)]
pub enum BehaviorEstimate {
    /// Laplace-smoothed (+1) action counts per observed state.
    Counts,
    /// A known behavior policy.
    Provided(Policy),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineConfig {
    pub dataset: Vec<Transition>,
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub behavior: BehaviorEstimate,
    pub reg_weight: f64,
    pub repr_steps: usize,
    pub model_learning_rate: f64,
    /// Policy-improvement steps (and fitted-Q steps in feature mode).
    pub policy_steps: usize,
    pub policy_learning_rate: f64,
    pub planner: PlannerMode,
    /// Ridge for the coverage diagnostic.
    pub coverage_ridge: f64,
    pub seed: u64,
}

impl OfflineConfig {
    pub fn new(dataset: Vec<Transition>) -> Self {
        OfflineConfig {
            dataset,
            alpha: 1.0,
            lambda: 1.0,
            gamma: 0.99,
            behavior: BehaviorEstimate::Counts,
            reg_weight: 0.1,
            repr_steps: 1000,
            model_learning_rate: 1e-3,
            policy_steps: 500,
            policy_learning_rate: 0.1,
            planner: PlannerMode::Tabular,
            coverage_ridge: 1e-8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_empty() {
            return Err(Error::NoData);
        }
        BonusConfig::new(self.alpha, BonusMode::Penalty)?;
        if !(self.lambda > 0.0) {
            return Err(Error::invalid("lambda must be positive"));
        }
        check_gamma(self.gamma)?;
        if !(self.reg_weight >= 0.0) {
            return Err(Error::invalid("reg_weight must be nonnegative"));
        }
        if !(self.model_learning_rate > 0.0 && self.policy_learning_rate > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.coverage_ridge >= 0.0) {
            return Err(Error::invalid("coverage ridge must be nonnegative"));
        }
        if let PlannerMode::Features(p) = &self.planner {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoverageReport {
    pub c_pi_star: f64,
    /// `max pi_b(a|s)` over the observed support.
    pub omega: f64,
    pub feature_dim: usize,
    /// Of `E_D[phi phi'] + ridge I`.
    pub condition_number: f64,
}

impl CoverageReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "c_pi_star = {:.16e}\nomega = {:.16e}\nfeature_dim = {}\ncondition_number = {:.16e}\n",
            self.c_pi_star, self.omega, self.feature_dim, self.condition_number
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineMetrics {
    pub nce_loss: f64,
    pub penalty_mean: f64,
    pub penalty_max: f64,
    /// Final policy objective (negated surrogate).
    pub policy_objective: f64,
    pub td_loss: f64,
}

impl OfflineMetrics {
    pub fn to_csv(&self) -> String {
        format!(
            "nce_loss,penalty_mean,penalty_max,policy_objective,td_loss\n{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            self.nce_loss, self.penalty_mean, self.penalty_max, self.policy_objective, self.td_loss
        )
    }
}

#[derive(Clone, Debug)]
pub struct OfflineOutcome {
    pub policy: Policy,
    pub coverage: CoverageReport,
    pub metrics: OfflineMetrics,
    pub model: LowRankModel,
    /// Value iteration against `r - b` (tabular planner).
    pub planned: Option<ValueIteration>,
}

/// Laplace-smoothed count estimate of the behavior policy. Continuous
/// states share one pooled action distribution. Returns per-state
/// probabilities keyed by discrete state (or `usize::MAX` when pooled).
pub fn behavior_counts(dataset: &[Transition], n_actions: usize) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut counts: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for t in dataset {
        let a = t.action.index().filter(|a| *a < n_actions).ok_or_else(|| Error::invalid("behavior counts need in-range discrete actions"))?;
        let key = t.state.index().unwrap_or(usize::MAX);
        counts.entry(key).or_insert_with(|| vec![0.0; n_actions])[a] += 1.0;
    }
    for row in counts.values_mut() {
        let n: f64 = row.iter().sum();
        row.iter_mut().for_each(|c| *c = (*c + 1.0) / (n + n_actions as f64));
    }
    Ok(counts)
}

fn behavior_probs(config: &OfflineConfig, counts: &BTreeMap<usize, Vec<f64>>, s: &Point, na: usize) -> Result<Vec<f64>> {
    match &config.behavior {
        BehaviorEstimate::Provided(p) => p.probs(s, None),
        BehaviorEstimate::Counts => {
            let key = s.index().unwrap_or(usize::MAX);
            Ok(counts.get(&key).cloned().unwrap_or_else(|| vec![1.0 / na as f64; na]))
        }
    }
}

/// `tr(A (B + ridge I)^-1)` with `A = E_target[phi phi']`, `B = E_D[phi phi']`.
pub fn coverage_coefficient(
    target: &OccupancyEstimate,
    dataset: &[Transition],
    phi: &dyn FeatureMap,
    ridge: f64,
) -> Result<CoverageReport> {
    if dataset.is_empty() {
        return Err(Error::NoData);
    }
    if !(ridge >= 0.0) {
        return Err(Error::invalid("ridge must be nonnegative"));
    }
    let d = phi.dim();
    let mut a = DMatrix::<f64>::zeros(d, d);
    let total: f64 = target.entries.iter().map(|e| e.weight).sum();
    if !(total > 0.0) {
        return Err(Error::invalid("target occupancy has no mass"));
    }
    for e in &target.entries {
        let f = nalgebra::DVector::from_vec(phi.features(&e.state, &e.action)?);
        a.ger(e.weight / total, &f, &f, 1.0);
    }
    let mut b = DMatrix::<f64>::zeros(d, d);
    let n = dataset.len() as f64;
    for t in dataset {
        let f = nalgebra::DVector::from_vec(phi.features(&t.state, &t.action)?);
        b.ger(1.0 / n, &f, &f, 1.0);
    }
    for i in 0..d {
        b[(i, i)] += ridge;
    }
    let eig = b.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let singular = || Error::Singular("dataset second moment is singular; use a positive ridge".into());
    if !(lo > hi * 1e-14) {
        return Err(singular());
    }
    let chol = b.cholesky().ok_or_else(singular)?;
    let c = (chol.solve(&a)).trace();
    let n_actions = dataset
        .iter()
        .filter_map(|t| t.action.index())
        .max()
        .map_or(0, |m| m + 1);
    let omega = if n_actions > 0 {
        behavior_counts(dataset, n_actions)?.values().flat_map(|r| r.iter().copied()).fold(0.0, f64::max)
    } else {
        1.0
    };
    Ok(CoverageReport { c_pi_star: c.max(0.0), omega, feature_dim: d, condition_number: hi / lo })
}

/// Offline loop with a pessimistic penalty and behavior regularization.
///
/// Learns the representation once on the dataset, builds the covariance
/// over dataset features, and maximizes the value of `r - b` while staying
/// close (in KL) to the estimated behavior policy. States never seen in the
/// data keep the uniform policy.
pub fn run_ctrl_lcb(config: &OfflineConfig, mut model: LowRankModel, nce: &NceConfig) -> Result<OfflineOutcome> {
    config.validate()?;
    let data = &config.dataset;
    let na = model
        .action_space
        .cardinality()
        .ok_or_else(|| Error::invalid("offline loop needs a finite action set"))?;
    let mut learn_rng = rng(derive_seed(config.seed, 2));
    let mut plan_rng = rng(derive_seed(config.seed, 3));
    let mut nce_loss = f64::NAN;
    if config.repr_steps > 0 {
        nce.validate()?;
        let noise = NoiseDistribution::Base(model.base_measure.clone());
        let mut opt = OptimizerState::adam(config.model_learning_rate);
        let out = train_representation(&mut model, data, &noise, nce, &mut opt, config.repr_steps, &mut learn_rng)?;
        let tail = &out.trace[out.trace.len().saturating_sub(10)..];
        nce_loss = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
    }
    let d = model.feature_dim();
    let feats: Vec<Vec<f64>> = data.iter().map(|t| model.phi(&t.state, &t.action)).collect::<Result<_>>()?;
    let cov = CovarianceState::from_features(d, config.lambda, feats.iter().map(|f| f.as_slice()))?;
    let pen_cfg = BonusConfig::new(config.alpha, BonusMode::Penalty)?;
    let counts = behavior_counts(data, na)?;

    // visited states, in first-seen order
    let mut seen = BTreeMap::new();
    for t in data {
        seen.entry(format!("{}", t.state)).or_insert_with(|| t.state.clone());
    }
    let visited: Vec<Point> = seen.into_values().collect();
    let behavior_logp: Vec<Vec<f64>> = visited
        .iter()
        .map(|s| Ok(behavior_probs(config, &counts, s, na)?.iter().map(|p| p.max(1e-300).ln()).collect()))
        .collect::<Result<_>>()?;

    let mut penalties = Vec::new();
    let mut planned = None;
    let mut td_loss = f64::NAN;
    let mut policy_objective = f64::NAN;
    let policy;
    let target;
    match &config.planner {
        PlannerMode::Tabular => {
            let ns = model
                .state_space
                .cardinality()
                .ok_or_else(|| Error::invalid("tabular planner needs a discrete state space"))?;
            let mut stats = TabularStats::new(ns, na);
            for t in data {
                stats.add(t)?;
            }
            let mdp = learned_mdp(&model, &stats.terminal)?;
            let pair_feats = all_pair_features(&model, ns, na)?;
            let r = stats.mean_rewards();
            let mut reward = Vec::with_capacity(ns * na);
            for (r, f) in r.iter().zip(&pair_feats) {
                let b = bonus(&cov, f, &pen_cfg)?;
                penalties.push(b);
                reward.push(r + pen_cfg.signed(b));
            }
            let vi = value_iteration_from(&mdp, &reward, config.gamma, PLANNER_TOL, None)?;
            let mut pol = Policy::TabularSoftmax { n_states: ns, n_actions: na, logits: vec![0.0; ns * na] };
            if !visited.is_empty() && config.policy_steps > 0 {
                let batch: Vec<PolicyState> = visited
                    .iter()
                    .map(|s| {
                        let i = s.index().expect("discrete");
                        PolicyState { state: s.clone(), q: vi.q[i * na..(i + 1) * na].to_vec(), features: None }
                    })
                    .collect();
                let mut opt = OptimizerState::adam(config.policy_learning_rate);
                for _ in 0..config.policy_steps {
                    policy_objective =
                        -offline_regularized_step(&mut pol, &batch, &behavior_logp, config.reg_weight, &mut opt)?;
                }
            }
            let unvisited = (0..ns).filter(|s| !visited.contains(&Point::Discrete(*s))).count();
            if unvisited > 0 {
                warn!("{unvisited} states have no data; their policy stays uniform");
            }
            // target occupancy of the returned policy under the learned model,
            // started from the dataset's state distribution
            let mut rho = vec![0.0; ns];
            for t in data {
                rho[t.state.index().expect("discrete")] += 1.0 / data.len() as f64;
            }
            let occ_mdp = TabularMdp::with_terminal(ns, na, mdp.p.clone(), vec![0.0; ns * na], rho, mdp.terminal.clone())?;
            target = OccupancyEstimate::exact(&occ_mdp, &pol, config.gamma)?;
            planned = Some(vi);
            policy = pol;
        }
        PlannerMode::Features(fc) => {
            let mut q = AugmentedQ::new(d, fc.hidden, fc.sigma, fc.tau, &mut plan_rng)?;
            let mut q_opt = OptimizerState::adam(fc.q_learning_rate);
            let mut pol_opt = OptimizerState::adam(config.policy_learning_rate);
            let mut pol = Policy::FeatureSoftmax { n_actions: na, weights: vec![0.0; d], temperature: fc.policy_temperature };
            for f in &feats {
                penalties.push(bonus(&cov, f, &pen_cfg)?);
            }
            for _ in 0..config.policy_steps {
                let idx: Vec<usize> = (0..fc.batch_size).map(|_| plan_rng.random_range(0..data.len())).collect();
                let batch: Vec<Transition> = idx.iter().map(|i| data[*i].clone()).collect();
                let pen_fn = |phi: &[f64]| Ok(pen_cfg.signed(bonus(&cov, phi, &pen_cfg)?));
                let samples = q_samples(&batch, &model, &pol, &pen_fn, &mut plan_rng)?;
                td_loss = fitted_q_step_on(&mut q, &samples, config.gamma, fc.entropy, &mut q_opt)?;
                let states: Vec<Point> = batch.iter().map(|t| t.state.clone()).collect();
                let ps = policy_states(&states, &q, &model, na, true)?;
                let blp: Vec<Vec<f64>> = states
                    .iter()
                    .map(|s| Ok(behavior_probs(config, &counts, s, na)?.iter().map(|p| p.max(1e-300).ln()).collect()))
                    .collect::<Result<_>>()?;
                policy_objective = -offline_regularized_step(&mut pol, &ps, &blp, config.reg_weight, &mut pol_opt)?;
            }
            // target: dataset states with actions drawn from the learned policy
            let actor = FeaturePolicy { policy: &pol, features: &model };
            let mut entries = Vec::with_capacity(data.len());
            for t in data {
                let probs = actor.action_probs(&t.state)?;
                let a = sample_categorical(&probs, &mut plan_rng);
                entries.push(OccupancyEntry { state: t.state.clone(), action: Point::Discrete(a), weight: 1.0 / data.len() as f64 });
            }
            target = OccupancyEstimate { entries, normalization: 1.0 };
            policy = pol;
        }
    }
    let coverage = coverage_coefficient(&target, data, &model, config.coverage_ridge)?;
    let penalty_mean = penalties.iter().sum::<f64>() / penalties.len().max(1) as f64;
    let penalty_max = penalties.iter().cloned().fold(0.0, f64::max);
    Ok(OfflineOutcome {
        policy,
        coverage,
        metrics: OfflineMetrics { nce_loss, penalty_mean, penalty_max, policy_objective, td_loss },
        model,
        planned,
    })
}

/// Deterministic argmax action per state of a tabular policy.
pub fn greedy_actions(policy: &Policy, n_states: usize) -> Result<Vec<usize>> {
    let na = policy.n_actions();
    let t = policy.table(n_states)?;
    Ok((0..n_states).map(|s| argmax(&t[s * na..(s + 1) * na])).collect())
}

pub const DATASET_MAGIC: &str = "ctrl-dataset 1";

/// Text dataset: a magic line, `states <descriptor>`, `actions <descriptor>`,
/// then one tab-separated `s a r s' terminal` record per line. Floats use
/// the shortest round-trip representation, so reading back is bit-exact.
pub fn write_dataset<W: Write>(states: &Space, actions: &Space, data: &[Transition], mut out: W) -> Result<()> {
    writeln!(out, "{DATASET_MAGIC}")?;
    writeln!(out, "states {}", states.descriptor())?;
    writeln!(out, "actions {}", actions.descriptor())?;
    for t in data {
        writeln!(out, "{}\t{}\t{}\t{}\t{}", t.state, t.action, t.reward, t.next_state, u8::from(t.terminal))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub states: Space,
    pub actions: Space,
    pub transitions: Vec<Transition>,
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines().enumerate();
    let mut header = |want: &str| -> Result<String> {
        let (i, line) = lines.next().ok_or_else(|| Error::parse(0, "truncated header"))?;
        let line = line?;
        match want {
            "" => Ok(line),
            _ => line
                .strip_prefix(want)
                .map(|s| s.trim().to_string())
                .ok_or_else(|| Error::parse(i + 1, format!("expected {want:?}"))),
        }
    };
    if header("")?.trim() != DATASET_MAGIC {
        return Err(Error::parse(1, format!("expected {DATASET_MAGIC:?}")));
    }
    let states = Space::parse_descriptor(&header("states ")?).map_err(|e| Error::parse(2, e.to_string()))?;
    let actions = Space::parse_descriptor(&header("actions ")?).map_err(|e| Error::parse(3, e.to_string()))?;
    let mut transitions = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        let [s, a, r, sn, term] = fields.as_slice() else {
            return Err(Error::parse(lineno, format!("expected 5 tab-separated fields, got {}", fields.len())));
        };
        let err = |e: Error| Error::parse(lineno, e.to_string());
        let s = states.parse_point(s).map_err(err)?;
        let a = actions.parse_point(a).map_err(err)?;
        let sn = states.parse_point(sn).map_err(err)?;
        let r: f64 = r.parse().map_err(|_| Error::parse(lineno, format!("bad reward {r:?}")))?;
        let terminal = match *term {
            "0" => false,
            "1" => true,
            t => return Err(Error::parse(lineno, format!("terminal flag must be 0 or 1, got {t:?}"))),
        };
        transitions.push(Transition::new(s, a, r, sn, terminal).map_err(err)?);
    }
    Ok(Dataset { states, actions, transitions })
}

/// Rolls out `actor` for `episodes` discounted rollouts.
pub fn generate_dataset<E: Environment + ?Sized>(
    env: &E,
    actor: &dyn Actor,
    episodes: usize,
    gamma: f64,
    rng: &mut Rng,
) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for _ in 0..episodes {
        out.extend(crate::mdp::sample_discounted_rollout(env, actor, gamma, rng)?);
    }
    Ok(out)
}
