//! Noise-contrastive estimation: binary and ranking objectives, noise
//! distributions and the minibatch representation trainer.

use std::io::Write;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diffnet::{sigmoid, softplus, OptimizerState};
use crate::lowrank::{BaseMeasure, LowRankModel, MarginalSampling, Positivity};
use crate::mdp::{log_sum_exp, softmax};
use crate::spaces::{Point, Space, Transition};
use crate::{Error, Result, Rng};

/// A model that assigns `log f(x, u)` to outcomes given a condition, with a
/// reverse pass for a whole batch.
pub trait ContrastiveModel {
    type Condition;
    type Outcome;
    type Tape;

    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// `log f(outcomes[i][j], conditions[i])`.
    fn log_scores(
        &self,
        conditions: &[Self::Condition],
        outcomes: &[Vec<Self::Outcome>],
    ) -> Result<(Vec<Vec<f64>>, Self::Tape)>;

    /// Adds `sum_ij upstream[i][j] * d log f_ij / d params` into `grad`.
    fn log_scores_backward(&self, tape: &Self::Tape, upstream: &[Vec<f64>], grad: &mut [f64]) -> Result<()>;
}

/// One positive and `K` negatives per condition. `candidates[i][0]` is the
/// observed outcome; `log_noise[i][j]` is `log q` at `candidates[i][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NceBatch<C, X> {
    pub conditions: Vec<C>,
    pub candidates: Vec<Vec<X>>,
    pub log_noise: Vec<Vec<f64>>,
}

impl<C, X> NceBatch<C, X> {
    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    /// Negatives per positive.
    pub fn k(&self) -> usize {
        self.candidates.first().map_or(0, |c| c.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::NoData);
        }
        let k = self.k();
        if k == 0 {
            return Err(Error::invalid("NCE needs K >= 1 negatives"));
        }
        if self.candidates.len() != self.len() || self.log_noise.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: self.candidates.len().min(self.log_noise.len()) });
        }
        for (c, q) in self.candidates.iter().zip(&self.log_noise) {
            if c.len() != k + 1 || q.len() != k + 1 {
                return Err(Error::DimensionMismatch { expected: k + 1, got: c.len().min(q.len()) });
            }
            if q.iter().any(|v| !v.is_finite()) {
                return Err(Error::NoiseSupport);
            }
        }
        Ok(())
    }
}

/// `h = r / (r + K)` with `r = score_ratio * exp(-gamma)`.
pub fn h_value(score_ratio: f64, gamma: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if !(score_ratio >= 0.0) {
        return Err(Error::invalid("score ratio must be nonnegative"));
    }
    if score_ratio == 0.0 {
        return Ok(0.0);
    }
    Ok(sigmoid(score_ratio.ln() - gamma - (k as f64).ln()))
}

/// Loss value with gradients w.r.t. model parameters and, for the binary
/// objective, the log-partition parameter.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub grad_gamma: f64,
}

fn logits<M: ContrastiveModel>(
    model: &M,
    batch: &NceBatch<M::Condition, M::Outcome>,
) -> Result<(Vec<Vec<f64>>, M::Tape)> {
    batch.validate()?;
    let (scores, tape) = model.log_scores(&batch.conditions, &batch.candidates)?;
    let l = scores
        .iter()
        .zip(&batch.log_noise)
        .map(|(s, q)| s.iter().zip(q).map(|(a, b)| a - b).collect())
        .collect();
    Ok((l, tape))
}

/// `-(1/n) sum_i [log h(x_i) + sum_j log(1 - h(y_ij))]`.
pub fn binary_loss<M: ContrastiveModel>(
    model: &M,
    batch: &NceBatch<M::Condition, M::Outcome>,
    gamma: f64,
) -> Result<LossEval> {
    let (l, tape) = logits(model, batch)?;
    let n = batch.len() as f64;
    let shift = gamma + (batch.k() as f64).ln();
    let mut loss = 0.0;
    let mut grad_gamma = 0.0;
    let mut upstream = Vec::with_capacity(l.len());
    for row in &l {
        let mut up = Vec::with_capacity(row.len());
        for (j, v) in row.iter().enumerate() {
            let t = v - shift;
            let (term, d) = if j == 0 { (softplus(-t), -sigmoid(-t)) } else { (softplus(t), sigmoid(t)) };
            loss += term / n;
            up.push(d / n);
            grad_gamma -= d / n;
        }
        upstream.push(up);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("binary NCE loss".into()));
    }
    let mut grad = vec![0.0; model.num_params()];
    model.log_scores_backward(&tape, &upstream, &mut grad)?;
    Ok(LossEval { loss, grad, grad_gamma })
}

/// `-(1/n) sum_i log softmax(l_i)_0` with `l_ij = log f - log q`.
pub fn ranking_loss<M: ContrastiveModel>(model: &M, batch: &NceBatch<M::Condition, M::Outcome>) -> Result<LossEval> {
    let (l, tape) = logits(model, batch)?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(l.len());
    for row in &l {
        loss += (log_sum_exp(row) - row[0]) / n;
        let mut up = softmax(row);
        up[0] -= 1.0;
        up.iter_mut().for_each(|v| *v /= n);
        upstream.push(up);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("ranking NCE loss".into()));
    }
    let mut grad = vec![0.0; model.num_params()];
    model.log_scores_backward(&tape, &upstream, &mut grad)?;
    Ok(LossEval { loss, grad, grad_gamma: 0.0 })
}

/// Empirical density of one mixture component.
#[derive(Clone, Debug)]
pub enum Empirical {
    /// Normalized visit frequencies over a discrete space.
    Counts { probs: Vec<f64>, sampler: WeightedIndex<f64> },
    /// Gaussian kernel estimate with per-axis bandwidth.
    Kernel { points: Vec<Vec<f64>>, bandwidth: Vec<f64> },
}

/// Reference points kept by a kernel estimate.
pub const MAX_KERNEL_POINTS: usize = 512;

impl Empirical {
    /// `None` when `points` is empty.
    pub fn fit(space: &Space, points: &[Point]) -> Result<Option<Self>> {
        if points.is_empty() {
            return Ok(None);
        }
        match space {
            Space::Discrete { cardinality } => {
                let mut counts = vec![0.0; *cardinality];
                for p in points {
                    match p {
                        Point::Discrete(i) if i < cardinality => counts[*i] += 1.0,
                        _ => return Err(Error::invalid("point outside the discrete space")),
                    }
                }
                let n = points.len() as f64;
                let probs: Vec<f64> = counts.iter().map(|c| c / n).collect();
                let sampler = WeightedIndex::new(&probs).map_err(|e| Error::invalid(e.to_string()))?;
                Ok(Some(Empirical::Counts { probs, sampler }))
            }
            Space::Box { low, .. } => {
                let dim = low.len();
                let stride = points.len().div_ceil(MAX_KERNEL_POINTS);
                let mut refs = Vec::new();
                for p in points.iter().step_by(stride) {
                    match p.coords() {
                        Some(c) if c.len() == dim => refs.push(c.to_vec()),
                        _ => return Err(Error::invalid("point does not match the box space")),
                    }
                }
                let n = refs.len() as f64;
                // Silverman's rule: (4 / (d + 2))^(1/(d+4)) sigma n^(-1/(d+4))
                let factor = (4.0 / (dim as f64 + 2.0)).powf(1.0 / (dim as f64 + 4.0)) * n.powf(-1.0 / (dim as f64 + 4.0));
                let bandwidth = (0..dim)
                    .map(|k| {
                        let mean = refs.iter().map(|r| r[k]).sum::<f64>() / n;
                        let var = refs.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                        let span = space_span(space, k);
                        (factor * var.sqrt()).max(1e-3 * span)
                    })
                    .collect();
                Ok(Some(Empirical::Kernel { points: refs, bandwidth }))
            }
        }
    }

    pub fn log_density(&self, x: &Point) -> Result<f64> {
        match (self, x) {
            (Empirical::Counts { probs, .. }, Point::Discrete(i)) => {
                Ok(probs.get(*i).map_or(f64::NEG_INFINITY, |p| p.ln()))
            }
            (Empirical::Kernel { points, bandwidth }, Point::Continuous(v)) => {
                if v.len() != bandwidth.len() {
                    return Err(Error::DimensionMismatch { expected: bandwidth.len(), got: v.len() });
                }
                let norm: f64 = bandwidth.iter().map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln()).sum();
                let terms: Vec<f64> = points
                    .iter()
                    .map(|p| {
                        -0.5 * p.iter().zip(v).zip(bandwidth).map(|((a, b), h)| ((a - b) / h).powi(2)).sum::<f64>()
                    })
                    .collect();
                Ok(log_sum_exp(&terms) - (points.len() as f64).ln() - norm)
            }
            _ => Err(Error::invalid("point kind does not match the noise distribution")),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Point {
        match self {
            Empirical::Counts { sampler, .. } => Point::Discrete(sampler.sample(rng)),
            Empirical::Kernel { points, bandwidth } => {
                let c = &points[rng.random_range(0..points.len())];
                Point::Continuous(
                    c.iter()
                        .zip(bandwidth)
                        .map(|(m, h)| {
                            let z: f64 = StandardNormal.sample(rng);
                            m + h * z
                        })
                        .collect(),
                )
            }
        }
    }
}

fn space_span(space: &Space, k: usize) -> f64 {
    match space {
        Space::Box { low, high } => high[k] - low[k],
        Space::Discrete { .. } => 1.0,
    }
}

/// Noise `q(s')` for negatives.
#[derive(Clone, Debug)]
pub enum NoiseDistribution {
    Base(BaseMeasure),
    Uniform(Space),
    /// `mix * q_buffer + (1 - mix) * q_random`.
    ReplayMixture { mix: f64, buffer: Empirical, random: Empirical },
}

impl NoiseDistribution {
    /// Falls back to uniform noise (with a warning) when the buffer is
    /// empty; an empty random source is replaced by uniform states.
    pub fn replay_mixture(space: &Space, buffer: &[Point], random: &[Point], mix: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mix) {
            return Err(Error::invalid("mixture weight must lie in [0, 1]"));
        }
        let Some(buffer) = Empirical::fit(space, buffer)? else {
            warn!("replay buffer is empty; using uniform noise");
            return Ok(NoiseDistribution::Uniform(space.clone()));
        };
        let random = match Empirical::fit(space, random)? {
            Some(r) => r,
            None => {
                warn!("no random-trajectory states; drawing the random half uniformly");
                let mut g = crate::rng(0);
                let base = BaseMeasure::uniform(space);
                let pts: Vec<Point> = (0..MAX_KERNEL_POINTS).map(|_| base.sample(&mut g)).collect();
                match space {
                    Space::Discrete { cardinality } => {
                        let probs = vec![1.0 / *cardinality as f64; *cardinality];
                        let sampler = WeightedIndex::new(&probs).map_err(|e| Error::invalid(e.to_string()))?;
                        Empirical::Counts { probs, sampler }
                    }
                    Space::Box { .. } => Empirical::fit(space, &pts)?.expect("nonempty"),
                }
            }
        };
        Ok(NoiseDistribution::ReplayMixture { mix, buffer, random })
    }

    pub fn log_density(&self, x: &Point) -> Result<f64> {
        match self {
            NoiseDistribution::Base(b) => b.log_density(x),
            NoiseDistribution::Uniform(space) => BaseMeasure::uniform(space).log_density(x),
            NoiseDistribution::ReplayMixture { mix, buffer, random } => {
                let mut terms = Vec::with_capacity(2);
                if *mix > 0.0 {
                    terms.push(mix.ln() + buffer.log_density(x)?);
                }
                if *mix < 1.0 {
                    terms.push((1.0 - mix).ln() + random.log_density(x)?);
                }
                Ok(log_sum_exp(&terms))
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Point {
        match self {
            NoiseDistribution::Base(b) => b.sample(rng),
            NoiseDistribution::Uniform(space) => BaseMeasure::uniform(space).sample(rng),
            NoiseDistribution::ReplayMixture { mix, buffer, random } => {
                if rng.random::<f64>() < *mix {
                    buffer.sample(rng)
                } else {
                    random.sample(rng)
                }
            }
        }
    }
}

/// Positives `x_i = s'_i`, conditions `u_i = (s_i, a_i)` and `K` fresh
/// negatives per positive.
pub fn build_batch(
    data: &[&Transition],
    noise: &NoiseDistribution,
    k: usize,
    rng: &mut Rng,
) -> Result<NceBatch<(Point, Point), Point>> {
    if data.is_empty() {
        return Err(Error::NoData);
    }
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let mut batch = NceBatch {
        conditions: Vec::with_capacity(data.len()),
        candidates: Vec::with_capacity(data.len()),
        log_noise: Vec::with_capacity(data.len()),
    };
    for t in data {
        let mut cands = Vec::with_capacity(k + 1);
        cands.push(t.next_state.clone());
        for _ in 0..k {
            cands.push(noise.sample(rng));
        }
        let q = cands.iter().map(|c| noise.log_density(c)).collect::<Result<Vec<_>>>()?;
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NoiseSupport);
        }
        batch.conditions.push((t.state.clone(), t.action.clone()));
        batch.candidates.push(cands);
        batch.log_noise.push(q);
    }
    Ok(batch)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Binary,
    Ranking,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Objective::Binary),
            "ranking" => Ok(Objective::Ranking),
            _ => Err(Error::invalid(format!("unknown objective {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NceConfig {
    pub objective: Objective,
    pub k: usize,
    /// Initial log-partition parameter of the binary objective.
    pub gamma_param: f64,
    pub temperature: f64,
    pub marginal_weight: f64,
    pub mu_norm_weight: f64,
    pub batch_size: usize,
    /// Base-measure draws per regularizer term; discrete spaces with at
    /// most 256 states are enumerated instead.
    pub regularizer_k: usize,
}

impl Default for NceConfig {
    fn default() -> Self {
        NceConfig {
            objective: Objective::Ranking,
            k: 16,
            gamma_param: 0.0,
            temperature: 0.2,
            marginal_weight: 1.0,
            mu_norm_weight: 1e-3,
            batch_size: 256,
            regularizer_k: 16,
        }
    }
}

impl NceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("nce.k must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("nce.temperature must be positive"));
        }
        if self.batch_size == 0 || self.regularizer_k == 0 {
            return Err(Error::invalid("nce.batch_size and nce.regularizer_k must be positive"));
        }
        if !(self.marginal_weight >= 0.0 && self.mu_norm_weight >= 0.0) {
            return Err(Error::invalid("regularizer weights must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub marginal_reg: f64,
    pub mu_reg: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    /// Final binary log-partition parameter.
    pub gamma: f64,
}

fn regularizer_sampling(model: &LowRankModel, k: usize) -> MarginalSampling {
    match model.base_measure {
        BaseMeasure::UniformDiscrete { cardinality } if cardinality <= 256 => MarginalSampling::Enumerate,
        _ => MarginalSampling::MonteCarlo(k),
    }
}

/// NCE loss plus weighted regularizers on one minibatch.
pub fn representation_objective(
    model: &LowRankModel,
    batch: &NceBatch<(Point, Point), Point>,
    config: &NceConfig,
    gamma: f64,
    rng: &mut Rng,
) -> Result<(TraceRow, LossEval)> {
    let mut eval = match config.objective {
        Objective::Binary => binary_loss(model, batch, gamma)?,
        Objective::Ranking => ranking_loss(model, batch)?,
    };
    let sampling = regularizer_sampling(model, config.regularizer_k);
    let mut marginal_reg = 0.0;
    if config.marginal_weight > 0.0 {
        let (v, g) = model.normalization_regularizer(&batch.conditions, sampling, rng)?;
        marginal_reg = v;
        eval.grad.iter_mut().zip(&g).for_each(|(a, b)| *a += config.marginal_weight * b);
    }
    let mut mu_reg = 0.0;
    if config.mu_norm_weight > 0.0 {
        let (v, g) = model.mu_norm_regularizer(sampling, rng)?;
        mu_reg = v;
        eval.grad.iter_mut().zip(&g).for_each(|(a, b)| *a += config.mu_norm_weight * b);
    }
    let row = TraceRow { step: 0, loss: eval.loss, marginal_reg, mu_reg };
    Ok((row, eval))
}

/// Minibatch descent on the configured NCE objective plus regularizers.
/// Minibatches are drawn with replacement and negatives are fresh each step.
pub fn train_representation(
    model: &mut LowRankModel,
    data: &[Transition],
    noise: &NoiseDistribution,
    config: &NceConfig,
    optimizer: &mut OptimizerState,
    steps: usize,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::NoData);
    }
    if model.positivity == Positivity::SoftplusOnInner {
        model.temperature = config.temperature;
    }
    let mut gamma = config.gamma_param;
    let mut gamma_opt = optimizer.fresh();
    let mut params = model.params();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let picks: Vec<&Transition> = (0..config.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let batch = build_batch(&picks, noise, config.k, rng)?;
        let (mut row, eval) = representation_objective(model, &batch, config, gamma, rng).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { what: "representation learning".into(), step },
            e => e,
        })?;
        row.step = step;
        trace.push(row);
        optimizer
            .step(&mut params, &eval.grad)
            .map_err(|_| Error::Diverged { what: "representation learning".into(), step })?;
        model.set_params(&params)?;
        if config.objective == Objective::Binary {
            let mut g = [gamma];
            gamma_opt
                .step(&mut g, &[eval.grad_gamma])
                .map_err(|_| Error::Diverged { what: "representation learning".into(), step })?;
            gamma = g[0];
        }
    }
    Ok(TrainOutcome { trace, gamma })
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "step,loss,marginal_reg,mu_reg")?;
    for r in rows {
        writeln!(out, "{},{:.16e},{:.16e},{:.16e}", r.step, r.loss, r.marginal_reg, r.mu_reg)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::check_gradient;
    use crate::lowrank::LowRankConfig;
    use crate::mdp::TabularMdp;
    use crate::rng;

    fn tiny_model(g: &mut Rng) -> LowRankModel {
        let s = Space::discrete(4).unwrap();
        let cfg = LowRankConfig { feature_dim: 3, hidden: vec![4], ..LowRankConfig::default() };
        LowRankModel::new(s.clone(), Space::discrete(2).unwrap(), BaseMeasure::uniform(&s), &cfg, g).unwrap()
    }

    fn transitions(g: &mut Rng, n: usize) -> Vec<Transition> {
        (0..n)
            .map(|_| {
                Transition::new(
                    Point::Discrete(g.random_range(0..4)),
                    Point::Discrete(g.random_range(0..2)),
                    0.0,
                    Point::Discrete(g.random_range(0..4)),
                    false,
                )
                .unwrap()
            })
            .collect()
    }

    /// Model whose log-score is a constant `c` plus `log p`.
    fn constant_model(c: f64) -> LowRankModel {
        let mdp = TabularMdp::new(4, 1, vec![0.25; 16], vec![0.0; 4], vec![0.25; 4]).unwrap();
        let mut m = LowRankModel::tabular(&mdp).unwrap();
        m.mu_net.params_mut().iter_mut().for_each(|p| *p *= c);
        m
    }

    fn uniform_batch(k: usize, n: usize, g: &mut Rng) -> NceBatch<(Point, Point), Point> {
        let data = transitions(g, n);
        let refs: Vec<&Transition> = data.iter().map(|t| t).collect();
        let mut b = build_batch(&refs, &NoiseDistribution::Uniform(Space::discrete(4).unwrap()), k, g).unwrap();
        b.conditions.iter_mut().for_each(|c| c.1 = Point::Discrete(0));
        b
    }

    #[test]
    fn h_value_cases() {
        assert!((h_value(5.0 * 0.3f64.exp(), 0.3, 5).unwrap() - 0.5).abs() < 1e-15);
        assert!((h_value(2.0, 0.0, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(h_value(1e-300, 0.0, 1).unwrap() < 1e-299);
        assert!(h_value(1.0, 0.0, 0).is_err());
    }

    #[test]
    fn binary_loss_at_half() {
        // f = q and exp(-gamma) = K makes r = K, so every h = 1/2
        let mut g = rng(1);
        for k in [1usize, 3] {
            let m = constant_model(1.0);
            let b = uniform_batch(k, 5, &mut g);
            let e = binary_loss(&m, &b, -(k as f64).ln()).unwrap();
            let expect = -(0.5f64.ln() + k as f64 * 0.5f64.ln());
            assert!((e.loss - expect).abs() < 1e-12, "{} {}", e.loss, expect);
        }
    }

    #[test]
    fn ranking_loss_symmetric_scores() {
        let mut g = rng(2);
        let m = constant_model(1.0);
        let b = uniform_batch(3, 7, &mut g);
        let e = ranking_loss(&m, &b).unwrap();
        assert!((e.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shift_and_scale_invariance() {
        let mut g = rng(3);
        let m = tiny_model(&mut g);
        let data = transitions(&mut g, 6);
        let refs: Vec<&Transition> = data.iter().collect();
        let b = build_batch(&refs, &NoiseDistribution::Uniform(Space::discrete(4).unwrap()), 4, &mut g).unwrap();
        let base_r = ranking_loss(&m, &b).unwrap().loss;
        let base_b = binary_loss(&m, &b, 0.4).unwrap().loss;
        for c in [0.1f64, 3.7, 5.0, 100.0] {
            // scaling f by c is shifting every log-noise value by -log c
            let mut scaled = b.clone();
            scaled.log_noise.iter_mut().flatten().for_each(|q| *q -= c.ln());
            assert!((ranking_loss(&m, &scaled).unwrap().loss - base_r).abs() < 1e-10);
            assert!((binary_loss(&m, &scaled, 0.4 + c.ln()).unwrap().loss - base_b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_noise_density_is_rejected() {
        let mut g = rng(4);
        let m = tiny_model(&mut g);
        let mut b = uniform_batch(2, 3, &mut g);
        b.log_noise[1][2] = f64::NEG_INFINITY;
        assert!(matches!(ranking_loss(&m, &b), Err(Error::NoiseSupport)));
        assert!(matches!(binary_loss(&m, &b, 0.0), Err(Error::NoiseSupport)));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut g = rng(5);
        for trial in 0..10 {
            let m = tiny_model(&mut g);
            let data = transitions(&mut g, 4);
            let refs: Vec<&Transition> = data.iter().collect();
            let b = build_batch(&refs, &NoiseDistribution::Uniform(Space::discrete(4).unwrap()), 3, &mut g).unwrap();
            let gamma = g.random_range(-1.0..1.0);
            let f = |p: &[f64]| {
                let mut mm = m.clone();
                mm.set_params(p)?;
                let e = ranking_loss(&mm, &b)?;
                Ok((e.loss, e.grad))
            };
            assert!(check_gradient(f, &m.params()).unwrap().max_rel_error < 1e-4, "ranking {trial}");
            let mut p0 = m.params();
            p0.push(gamma);
            let f = |p: &[f64]| {
                let mut mm = m.clone();
                mm.set_params(&p[..p.len() - 1])?;
                let e = binary_loss(&mm, &b, p[p.len() - 1])?;
                let mut grad = e.grad;
                grad.push(e.grad_gamma);
                Ok((e.loss, grad))
            };
            assert!(check_gradient(f, &p0).unwrap().max_rel_error < 1e-4, "binary {trial}");
        }
    }

    #[test]
    fn batch_shape_and_uniform_negatives() {
        let mut g = rng(6);
        let data = transitions(&mut g, 3);
        let refs: Vec<&Transition> = data.iter().collect();
        let noise = NoiseDistribution::Uniform(Space::discrete(4).unwrap());
        let b = build_batch(&refs, &noise, 5, &mut g).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.candidates.iter().map(|c| c.len() - 1).sum::<usize>(), 15);
        let one = [&data[0]];
        let mut counts = [0.0; 4];
        for _ in 0..40_000 {
            let b = build_batch(&one, &noise, 1, &mut g).unwrap();
            counts[b.candidates[0][1].index().unwrap()] += 1.0;
        }
        let chi2: f64 = counts.iter().map(|c| (c - 10_000.0f64).powi(2) / 10_000.0).sum();
        // 3 degrees of freedom, p = 0.01 critical value
        assert!(chi2 < 11.345, "{chi2}");
    }

    #[test]
    fn replay_mixture_components() {
        let mut g = rng(7);
        let space = Space::discrete(5).unwrap();
        let buf = vec![Point::Discrete(1), Point::Discrete(1), Point::Discrete(3)];
        let rnd = vec![Point::Discrete(0), Point::Discrete(4)];
        let only_buffer = NoiseDistribution::replay_mixture(&space, &buf, &rnd, 1.0).unwrap();
        for _ in 0..1000 {
            let i = only_buffer.sample(&mut g).index().unwrap();
            assert!(i == 1 || i == 3);
        }
        let half = NoiseDistribution::replay_mixture(&space, &buf, &rnd, 0.5).unwrap();
        let d1 = half.log_density(&Point::Discrete(1)).unwrap().exp();
        assert!((d1 - 0.5 * 2.0 / 3.0).abs() < 1e-15);
        let d0 = half.log_density(&Point::Discrete(0)).unwrap().exp();
        assert!((d0 - 0.25).abs() < 1e-15);
        assert!(matches!(
            NoiseDistribution::replay_mixture(&space, &[], &rnd, 0.5).unwrap(),
            NoiseDistribution::Uniform(_)
        ));
    }

    #[test]
    fn kernel_density_is_normalized_and_matches_sampler() {
        let mut g = rng(8);
        let space = Space::boxed(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let pts: Vec<Point> =
            (0..2000).map(|_| Point::Continuous(vec![g.random_range(0.2..0.4), g.random_range(0.5..0.9)])).collect();
        let e = Empirical::fit(&space, &pts).unwrap().unwrap();
        let (lo, hi, n) = (-1.0, 2.0, 300);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        let mut mean = [0.0; 2];
        for i in 0..n {
            for j in 0..n {
                let x = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                let d = e.log_density(&Point::Continuous(x.to_vec())).unwrap().exp() * h * h;
                total += d;
                mean[0] += d * x[0];
                mean[1] += d * x[1];
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
        let mut sm = [0.0; 2];
        for _ in 0..20_000 {
            let p = e.sample(&mut g);
            let c = p.coords().unwrap();
            sm[0] += c[0] / 20_000.0;
            sm[1] += c[1] / 20_000.0;
        }
        assert!((sm[0] - mean[0]).abs() < 0.01 && (sm[1] - mean[1]).abs() < 0.01);
    }

    #[test]
    fn ranking_k_limit_approaches_conditional_likelihood() {
        // ranking_loss - log K -> -log p(x|u) + log q(x) as K grows
        let mut gaps = [0.0; 2];
        for seed in 0..20 {
            let mut g = rng(seed);
            let mut p = vec![0.0; 16];
            for row in p.chunks_mut(4) {
                let t: Vec<f64> = (0..4).map(|_| g.random_range(0.1..1.0)).collect();
                let z: f64 = t.iter().sum();
                row.iter_mut().zip(&t).for_each(|(a, b)| *a = b / z);
            }
            let mdp = TabularMdp::new(4, 1, p.clone(), vec![0.0; 4], vec![0.25; 4]).unwrap();
            let m = LowRankModel::tabular(&mdp).unwrap();
            let data: Vec<Transition> = (0..50)
                .map(|_| {
                    let s = g.random_range(0..4);
                    let sn = crate::mdp::sample_categorical(&p[s * 4..s * 4 + 4], &mut g);
                    Transition::new(Point::Discrete(s), Point::Discrete(0), 0.0, Point::Discrete(sn), false).unwrap()
                })
                .collect();
            let target: f64 =
                data.iter().map(|t| -p[t.state.index().unwrap() * 4 + t.next_state.index().unwrap()].ln() + 0.25f64.ln()).sum::<f64>() / 50.0;
            let refs: Vec<&Transition> = data.iter().collect();
            for (slot, k) in [8usize, 512].iter().enumerate() {
                let b = build_batch(&refs, &NoiseDistribution::Uniform(Space::discrete(4).unwrap()), *k, &mut g).unwrap();
                let l = ranking_loss(&m, &b).unwrap().loss - (*k as f64).ln();
                gaps[slot] += (l - target).abs() / 20.0;
            }
        }
        assert!(gaps[1] < gaps[0] / 3.0, "{gaps:?}");
    }

    #[test]
    fn training_zero_steps_is_noop_and_seeded_runs_agree() {
        let mut g = rng(9);
        let m0 = tiny_model(&mut g);
        let data = transitions(&mut g, 40);
        let noise = NoiseDistribution::Uniform(Space::discrete(4).unwrap());
        let cfg = NceConfig { batch_size: 16, k: 4, ..NceConfig::default() };
        let mut m = m0.clone();
        train_representation(&mut m, &data, &noise, &cfg, &mut OptimizerState::adam(1e-2), 0, &mut rng(1)).unwrap();
        assert_eq!(m, m0);
        let run = || {
            let mut m = m0.clone();
            let out =
                train_representation(&mut m, &data, &noise, &cfg, &mut OptimizerState::adam(1e-2), 30, &mut rng(2)).unwrap();
            (m.params(), out.trace)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(ta, tb);
    }

    #[test]
    fn trace_csv_header() {
        let mut out = Vec::new();
        write_trace_csv(&[TraceRow { step: 0, loss: 1.5, marginal_reg: 0.0, mu_reg: 0.25 }], &mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert!(s.starts_with("step,loss,marginal_reg,mu_reg\n0,1.5"));
    }
}
