//! Finite-difference checks of every differentiable loss on random
//! instances.

use rand::Rng as _;

use crate::diffnet::{check_gradient, Activation};
use crate::lowrank::{BaseMeasure, LowRankConfig, LowRankModel, MarginalSampling};
use crate::mdp::Policy;
use crate::nce::{binary_loss, build_batch, ranking_loss, ContrastiveModel, NoiseDistribution};
use crate::planner::{policy_surrogate, td_loss, AugmentedQ, EntropyConfig, PolicyRegularizer, PolicyState, QSample};
use crate::spaces::{Point, Space, Transition};
use crate::{derive_seed, rng, Result, Rng};

/// Tolerance on the maximum relative error.
pub const GRADIENT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub loss: &'static str,
    pub instances: usize,
    /// Worst relative error over all instances.
    pub max_rel_error: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADIENT_TOL
    }
}

pub const SUITE_LOSSES: [&str; 6] =
    ["binary_nce", "ranking_nce", "marginal_regularizer", "mu_norm_regularizer", "td_loss", "policy_surrogate"];

/// Small random model; odd instances use a 2-d box state space.
fn random_model(i: usize, g: &mut Rng) -> Result<LowRankModel> {
    let (space, actions) = if i % 2 == 0 {
        (Space::discrete(5)?, Space::discrete(2)?)
    } else {
        (Space::boxed(vec![0.0, 0.0], vec![1.0, 1.0])?, Space::discrete(3)?)
    };
    let cfg = LowRankConfig { feature_dim: 4, hidden: vec![6], ..LowRankConfig::default() };
    LowRankModel::new(space.clone(), actions, BaseMeasure::uniform(&space), &cfg, g)
}

fn random_transitions(m: &LowRankModel, n: usize, g: &mut Rng) -> Result<Vec<Transition>> {
    let na = m.action_space.cardinality().unwrap_or(1);
    (0..n)
        .map(|_| {
            let s = m.base_measure.sample(g);
            let a = Point::Discrete(g.random_range(0..na));
            Transition::new(s, a, g.random(), m.base_measure.sample(g), false)
        })
        .collect()
}

fn check_nce(i: usize, g: &mut Rng) -> Result<(f64, f64, f64, f64)> {
    let m = random_model(i, g)?;
    let data = random_transitions(&m, 4, g)?;
    let refs: Vec<&Transition> = data.iter().collect();
    let batch = build_batch(&refs, &NoiseDistribution::Base(m.base_measure.clone()), 3, g)?;
    let gamma = g.random_range(-1.0..1.0);
    let np = m.num_params();
    let mut p0 = m.params();
    p0.push(gamma);
    let binary = check_gradient(
        |p: &[f64]| {
            let mut mm = m.clone();
            mm.set_params(&p[..np])?;
            let e = binary_loss(&mm, &batch, p[np])?;
            let mut grad = e.grad;
            grad.push(e.grad_gamma);
            Ok((e.loss, grad))
        },
        &p0,
    )?;
    let ranking = check_gradient(
        |p: &[f64]| {
            let mut mm = m.clone();
            mm.set_params(p)?;
            let e = ranking_loss(&mm, &batch)?;
            Ok((e.loss, e.grad))
        },
        &m.params(),
    )?;
    let pairs: Vec<(Point, Point)> = data.iter().map(|t| (t.state.clone(), t.action.clone())).collect();
    let seed = g.random::<u64>();
    let marginal = check_gradient(
        |p: &[f64]| {
            let mut mm = m.clone();
            mm.set_params(p)?;
            mm.normalization_regularizer(&pairs, MarginalSampling::MonteCarlo(5), &mut rng(seed))
        },
        &m.params(),
    )?;
    let mu = check_gradient(
        |p: &[f64]| {
            let mut mm = m.clone();
            mm.set_params(p)?;
            mm.mu_norm_regularizer(MarginalSampling::MonteCarlo(5), &mut rng(seed))
        },
        &m.params(),
    )?;
    Ok((binary.max_rel_error, ranking.max_rel_error, marginal.max_rel_error, mu.max_rel_error))
}

fn check_td(i: usize, g: &mut Rng) -> Result<f64> {
    let (d, m) = (4, 3);
    let sigma = if i % 2 == 0 { Activation::Tanh } else { Activation::Relu };
    let mut q = AugmentedQ::new(d, m, sigma, 0.005, g)?;
    q.params.iter_mut().for_each(|p| *p = g.random_range(-1.0..1.0));
    q.target = q.params.iter().map(|p| p + g.random_range(-0.1..0.1)).collect();
    let vec = |g: &mut Rng| -> Vec<f64> { (0..d).map(|_| g.random_range(-1.0..1.0)).collect() };
    let samples: Vec<QSample> = (0..6)
        .map(|_| QSample {
            phi: vec(g),
            reward: g.random(),
            bonus: g.random_range(0.0..2.0),
            log_pi: -g.random_range(0.1..2.0),
            next_phi: vec(g),
            done: g.random::<f64>() < 0.2,
        })
        .collect();
    let ent = EntropyConfig { weight: g.random_range(0.0..1.0), enabled: true };
    let r = check_gradient(|p: &[f64]| td_loss(&q, p, &samples, 0.9, ent), &q.params.clone())?;
    Ok(r.max_rel_error)
}

fn check_policy(i: usize, g: &mut Rng) -> Result<f64> {
    let na = 3;
    let w = g.random_range(0.0..1.0);
    let states: Vec<PolicyState> = (0..4)
        .map(|k| PolicyState {
            state: Point::Discrete(k % 2),
            q: (0..na).map(|_| g.random_range(-1.0..1.0)).collect(),
            features: Some((0..na).map(|_| (0..4).map(|_| g.random_range(-1.0..1.0)).collect()).collect()),
        })
        .collect();
    let (policy, params) = if i % 2 == 0 {
        let logits: Vec<f64> = (0..2 * na).map(|_| g.random_range(-1.0..1.0)).collect();
        (Policy::TabularSoftmax { n_states: 2, n_actions: na, logits: logits.clone() }, logits)
    } else {
        let weights: Vec<f64> = (0..4).map(|_| g.random_range(-1.0..1.0)).collect();
        (Policy::FeatureSoftmax { n_actions: na, weights: weights.clone(), temperature: 0.7 }, weights)
    };
    let blp: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let raw: Vec<f64> = (0..na).map(|_| g.random_range(0.1..1.0)).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|v| (v / z).ln()).collect()
        })
        .collect();
    let a = check_gradient(|p: &[f64]| policy_surrogate(&policy, p, &states, PolicyRegularizer::Entropy(w)), &params)?;
    let b = check_gradient(
        |p: &[f64]| policy_surrogate(&policy, p, &states, PolicyRegularizer::Kl { reg: w, behavior_logp: &blp }),
        &params,
    )?;
    Ok(a.max_rel_error.max(b.max_rel_error))
}

/// Runs every check on `instances` random instances.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut worst = [0.0f64; 6];
    for i in 0..instances {
        let mut g = rng(derive_seed(seed, i as u64));
        let (b, r, m, mu) = check_nce(i, &mut g)?;
        let td = check_td(i, &mut g)?;
        let pg = check_policy(i, &mut g)?;
        for (w, v) in worst.iter_mut().zip([b, r, m, mu, td, pg]) {
            *w = w.max(v);
        }
    }
    Ok(SUITE_LOSSES
        .iter()
        .zip(worst)
        .map(|(loss, max_rel_error)| SuiteResult { loss, instances, max_rel_error })
        .collect())
}
