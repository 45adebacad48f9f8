//! The low-rank transition model `P(s'|s,a) = <phi(s,a), p(s') mu(s')>`.
//!
//! `phi` and `mu` are small MLPs over encoded points, `p` is a fixed base
//! measure. Learned models pass the inner product through a softplus link
//! (after dividing by a temperature) to stay positive; the tabular
//! factorization uses the identity link and is exact.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::diffnet::{sigmoid, softplus, Activation, Cache, Mlp};
use crate::mdp::{dot, TabularMdp};
use crate::nce::ContrastiveModel;
use crate::spaces::{encode_pair, pair_encoding_dim, Point, Space};
use crate::wire::{put_f64, put_u32, put_u64, Reader};
use crate::{Error, Result, Rng};

/// Fixed full-support measure `p(s')`.
#[derive(Clone, Debug, PartialEq)]
pub enum BaseMeasure {
    UniformDiscrete { cardinality: usize },
    UniformBox { low: Vec<f64>, high: Vec<f64> },
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl BaseMeasure {
    /// Uniform measure over `space`.
    pub fn uniform(space: &Space) -> Self {
        match space {
            Space::Discrete { cardinality } => BaseMeasure::UniformDiscrete { cardinality: *cardinality },
            Space::Box { low, high } => BaseMeasure::UniformBox { low: low.clone(), high: high.clone() },
        }
    }

    pub fn gaussian(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::invalid("gaussian mean and std must have equal nonzero length"));
        }
        if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("gaussian std must be positive and finite"));
        }
        Ok(BaseMeasure::Gaussian { mean, std })
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, BaseMeasure::UniformDiscrete { .. })
    }

    fn check_compatible(&self, space: &Space) -> Result<()> {
        let ok = match (self, space) {
            (BaseMeasure::UniformDiscrete { cardinality }, Space::Discrete { cardinality: c }) => cardinality == c,
            (BaseMeasure::UniformBox { low, high }, Space::Box { low: l, high: h }) => low == l && high == h,
            (BaseMeasure::Gaussian { mean, .. }, Space::Box { low, .. }) => mean.len() == low.len(),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("base measure does not match the state space"))
        }
    }

    pub fn log_density(&self, x: &Point) -> Result<f64> {
        match (self, x) {
            (BaseMeasure::UniformDiscrete { cardinality }, Point::Discrete(i)) => {
                if i < cardinality {
                    Ok(-(*cardinality as f64).ln())
                } else {
                    Ok(f64::NEG_INFINITY)
                }
            }
            (BaseMeasure::UniformBox { low, high }, Point::Continuous(v)) => {
                if v.len() != low.len() {
                    return Err(Error::DimensionMismatch { expected: low.len(), got: v.len() });
                }
                let inside = v.iter().zip(low.iter().zip(high)).all(|(x, (l, h))| x >= l && x <= h);
                if inside {
                    Ok(-low.iter().zip(high).map(|(l, h)| (h - l).ln()).sum::<f64>())
                } else {
                    Ok(f64::NEG_INFINITY)
                }
            }
            (BaseMeasure::Gaussian { mean, std }, Point::Continuous(v)) => {
                if v.len() != mean.len() {
                    return Err(Error::DimensionMismatch { expected: mean.len(), got: v.len() });
                }
                Ok(v.iter()
                    .zip(mean.iter().zip(std))
                    .map(|(x, (m, s))| {
                        let z = (x - m) / s;
                        -0.5 * z * z - s.ln() - 0.5 * (2.0 * PI).ln()
                    })
                    .sum())
            }
            _ => Err(Error::invalid("point kind does not match base measure")),
        }
    }

    pub fn density(&self, x: &Point) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    pub fn sample(&self, rng: &mut Rng) -> Point {
        match self {
            BaseMeasure::UniformDiscrete { cardinality } => Point::Discrete(rng.random_range(0..*cardinality)),
            BaseMeasure::UniformBox { low, high } => {
                Point::Continuous(low.iter().zip(high).map(|(l, h)| rng.random_range(*l..=*h)).collect())
            }
            BaseMeasure::Gaussian { mean, std } => Point::Continuous(
                mean.iter()
                    .zip(std)
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + s * z
                    })
                    .collect(),
            ),
        }
    }

    fn write_wire(&self, out: &mut Vec<u8>) {
        let (tag, a, b): (u8, &[f64], &[f64]) = match self {
            BaseMeasure::UniformDiscrete { cardinality } => {
                out.push(0);
                put_u64(out, *cardinality as u64);
                return;
            }
            BaseMeasure::UniformBox { low, high } => (1, low, high),
            BaseMeasure::Gaussian { mean, std } => (2, mean, std),
        };
        out.push(tag);
        put_u32(out, a.len() as u32);
        for v in a.iter().chain(b) {
            put_f64(out, *v);
        }
    }

    fn read_wire(r: &mut Reader<'_>) -> Result<Self> {
        let tag = r.u8()?;
        if tag == 0 {
            let n = r.u64()?;
            if n == 0 || n > 1 << 32 {
                return Err(Error::Format(format!("base cardinality {n} out of range")));
            }
            return Ok(BaseMeasure::UniformDiscrete { cardinality: n as usize });
        }
        let dim = r.u32()? as usize;
        if dim == 0 || dim > 1024 {
            return Err(Error::Format(format!("base dimension {dim} out of range")));
        }
        let a = r.f64s(dim)?;
        let b = r.f64s(dim)?;
        match tag {
            1 => {
                Space::boxed(a.clone(), b.clone()).map_err(|e| Error::Format(e.to_string()))?;
                Ok(BaseMeasure::UniformBox { low: a, high: b })
            }
            2 => BaseMeasure::gaussian(a, b).map_err(|e| Error::Format(e.to_string())),
            t => Err(Error::Format(format!("unknown base measure tag {t}"))),
        }
    }
}

/// How the inner product is mapped to a positive score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positivity {
    /// `softplus(<phi, mu> / T)`
    SoftplusOnInner,
    /// The inner product itself, floored at the smallest positive normal.
    ElementwiseNonneg,
}

impl std::str::FromStr for Positivity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softplus_on_inner" => Ok(Positivity::SoftplusOnInner),
            "elementwise_nonneg" => Ok(Positivity::ElementwiseNonneg),
            _ => Err(Error::invalid(format!("unknown positivity mode {s:?}"))),
        }
    }
}

/// Normalizer used by [`LowRankModel::conditional_density`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalizer {
    ExactDiscrete,
    MonteCarlo(usize),
}

/// Draws used by the Monte-Carlo regularizers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarginalSampling {
    /// `K` i.i.d. draws from the base measure per term.
    MonteCarlo(usize),
    /// Exact expectation over a discrete base measure.
    Enumerate,
}

/// Architecture of a freshly initialized learned model.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankConfig {
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub mu_output: Activation,
    pub bounded_phi: bool,
    pub temperature: f64,
}

impl Default for LowRankConfig {
    fn default() -> Self {
        LowRankConfig {
            feature_dim: 32,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            mu_output: Activation::Tanh,
            bounded_phi: true,
            temperature: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankModel {
    pub state_space: Space,
    pub action_space: Space,
    pub phi_net: Mlp,
    pub mu_net: Mlp,
    pub base_measure: BaseMeasure,
    pub positivity: Positivity,
    /// Rescale `phi <- phi / max(1, |phi|)`.
    pub bounded_phi: bool,
    /// Divides the inner product before the softplus link.
    pub temperature: f64,
}

/// `phi` for one `(s, a)` with what is needed to differentiate it.
pub struct FeatureEval {
    pub phi: Vec<f64>,
    cache: Cache,
    /// Norm of the raw network output when rescaling was applied.
    scaled_by: Option<f64>,
}

pub struct MuEval {
    pub mu: Vec<f64>,
    cache: Cache,
}

/// Forward state of a batch of score evaluations.
pub struct ScoreTape {
    phis: Vec<FeatureEval>,
    mus: Vec<MuEval>,
    /// `mu_index[i][j]` points into `mus`.
    mu_index: Vec<Vec<usize>>,
    inner: Vec<Vec<f64>>,
}

impl LowRankModel {
    pub fn new(state_space: Space, action_space: Space, base_measure: BaseMeasure, config: &LowRankConfig, rng: &mut Rng) -> Result<Self> {
        if config.feature_dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        let mut phi_dims = vec![pair_encoding_dim(&state_space, &action_space)];
        phi_dims.extend(&config.hidden);
        phi_dims.push(config.feature_dim);
        let mut mu_dims = vec![state_space.encoding_dim()];
        mu_dims.extend(&config.hidden);
        mu_dims.push(config.feature_dim);
        let phi_net = Mlp::new(&phi_dims, config.activation, Activation::Identity, rng)?;
        let mu_net = Mlp::new(&mu_dims, config.activation, config.mu_output, rng)?;
        Self::from_parts(
            state_space,
            action_space,
            phi_net,
            mu_net,
            base_measure,
            Positivity::SoftplusOnInner,
            config.bounded_phi,
            config.temperature,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        state_space: Space,
        action_space: Space,
        phi_net: Mlp,
        mu_net: Mlp,
        base_measure: BaseMeasure,
        positivity: Positivity,
        bounded_phi: bool,
        temperature: f64,
    ) -> Result<Self> {
        if phi_net.input_dim() != pair_encoding_dim(&state_space, &action_space) {
            return Err(Error::DimensionMismatch {
                expected: pair_encoding_dim(&state_space, &action_space),
                got: phi_net.input_dim(),
            });
        }
        if mu_net.input_dim() != state_space.encoding_dim() {
            return Err(Error::DimensionMismatch { expected: state_space.encoding_dim(), got: mu_net.input_dim() });
        }
        if phi_net.output_dim() != mu_net.output_dim() {
            return Err(Error::DimensionMismatch { expected: phi_net.output_dim(), got: mu_net.output_dim() });
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        base_measure.check_compatible(&state_space)?;
        Ok(LowRankModel { state_space, action_space, phi_net, mu_net, base_measure, positivity, bounded_phi, temperature })
    }

    /// Exact factorization of a tabular MDP: one-hot `phi(s,a)`, uniform `p`
    /// and `mu(s')_(s,a) = |S| P(s'|s,a)`.
    pub fn tabular(mdp: &TabularMdp) -> Result<Self> {
        let (ns, na) = (mdp.n_states, mdp.n_actions);
        let d = ns * na;
        let mut phi = Mlp::zeros(&[d, d], Activation::Tanh, Activation::Identity)?;
        for i in 0..d {
            phi.params_mut()[i * d + i] = 1.0;
        }
        let mut mu = Mlp::zeros(&[ns, d], Activation::Tanh, Activation::Identity)?;
        for sa in 0..d {
            for sn in 0..ns {
                mu.params_mut()[sa * ns + sn] = ns as f64 * mdp.p[sa * ns + sn];
            }
        }
        let space = Space::discrete(ns)?;
        Self::from_parts(
            space.clone(),
            Space::discrete(na)?,
            phi,
            mu,
            BaseMeasure::uniform(&space),
            Positivity::ElementwiseNonneg,
            false,
            1.0,
        )
    }

    pub fn feature_dim(&self) -> usize {
        self.phi_net.output_dim()
    }

    pub fn phi_eval(&self, s: &Point, a: &Point) -> Result<FeatureEval> {
        let mut input = Vec::with_capacity(self.phi_net.input_dim());
        encode_pair(&self.state_space, &self.action_space, s, a, &mut input)?;
        let cache = self.phi_net.forward_cached(&input)?;
        let mut phi = cache.output().to_vec();
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("phi network output".into()));
        }
        let mut scaled_by = None;
        if self.bounded_phi {
            let norm = dot(&phi, &phi).sqrt();
            if norm > 1.0 {
                phi.iter_mut().for_each(|v| *v /= norm);
                scaled_by = Some(norm);
            }
        }
        Ok(FeatureEval { phi, cache, scaled_by })
    }

    pub fn phi(&self, s: &Point, a: &Point) -> Result<Vec<f64>> {
        Ok(self.phi_eval(s, a)?.phi)
    }

    pub fn mu_eval(&self, s_next: &Point) -> Result<MuEval> {
        let mut input = Vec::with_capacity(self.mu_net.input_dim());
        self.state_space.encode(s_next, &mut input)?;
        let cache = self.mu_net.forward_cached(&input)?;
        let mu = cache.output().to_vec();
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mu network output".into()));
        }
        Ok(MuEval { mu, cache })
    }

    pub fn mu(&self, s_next: &Point) -> Result<Vec<f64>> {
        Ok(self.mu_eval(s_next)?.mu)
    }

    /// `log g(inner)`, where `g` is the positivity link.
    pub fn log_link(&self, inner: f64) -> f64 {
        match self.positivity {
            Positivity::SoftplusOnInner => {
                let z = inner / self.temperature;
                // log softplus(z) without underflow for very negative z
                if z < -30.0 {
                    z
                } else {
                    softplus(z).ln()
                }
            }
            Positivity::ElementwiseNonneg => inner.max(f64::MIN_POSITIVE).ln(),
        }
    }

    pub fn link(&self, inner: f64) -> f64 {
        match self.positivity {
            Positivity::SoftplusOnInner => softplus(inner / self.temperature),
            Positivity::ElementwiseNonneg => inner.max(f64::MIN_POSITIVE),
        }
    }

    /// `d log g / d inner`
    fn dlog_link(&self, inner: f64) -> f64 {
        match self.positivity {
            Positivity::SoftplusOnInner => {
                let z = inner / self.temperature;
                let sp = softplus(z);
                if z < -30.0 {
                    1.0 / self.temperature
                } else {
                    sigmoid(z) / (sp * self.temperature)
                }
            }
            Positivity::ElementwiseNonneg => {
                if inner > f64::MIN_POSITIVE {
                    1.0 / inner
                } else {
                    0.0
                }
            }
        }
    }

    /// `d g / d inner`
    fn dlink(&self, inner: f64) -> f64 {
        match self.positivity {
            Positivity::SoftplusOnInner => sigmoid(inner / self.temperature) / self.temperature,
            Positivity::ElementwiseNonneg => {
                if inner > f64::MIN_POSITIVE {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `g(<phi(s,a), mu(s')>) p(s')`
    pub fn unnormalized_score(&self, s: &Point, a: &Point, s_next: &Point) -> Result<f64> {
        let phi = self.phi(s, a)?;
        let mu = self.mu(s_next)?;
        let score = self.link(dot(&phi, &mu)) * self.base_measure.density(s_next)?;
        if !score.is_finite() {
            return Err(Error::NonFinite("score".into()));
        }
        Ok(score)
    }

    /// Returns `(density, log Z)` for `P(s'|s,a)` after normalizing the score.
    pub fn conditional_density(
        &self,
        s: &Point,
        a: &Point,
        s_next: &Point,
        normalizer: Normalizer,
        rng: &mut Rng,
    ) -> Result<(f64, f64)> {
        let phi = self.phi(s, a)?;
        let log_z = self.log_partition(&phi, normalizer, rng)?;
        let mu = self.mu(s_next)?;
        let log_score = self.log_link(dot(&phi, &mu)) + self.base_measure.log_density(s_next)?;
        Ok(((log_score - log_z).exp(), log_z))
    }

    /// `log Z(s,a)` for a precomputed feature vector.
    pub fn log_partition(&self, phi: &[f64], normalizer: Normalizer, rng: &mut Rng) -> Result<f64> {
        let mut acc = Vec::new();
        match normalizer {
            Normalizer::ExactDiscrete => {
                let BaseMeasure::UniformDiscrete { cardinality } = self.base_measure else {
                    return Err(Error::invalid("exact normalization needs a discrete state space"));
                };
                let log_p = -(cardinality as f64).ln();
                for i in 0..cardinality {
                    acc.push(self.log_link(dot(phi, &self.mu(&Point::Discrete(i))?)) + log_p);
                }
            }
            Normalizer::MonteCarlo(k) => {
                if k == 0 {
                    return Err(Error::invalid("Monte-Carlo normalizer needs K >= 1"));
                }
                for _ in 0..k {
                    let y = self.base_measure.sample(rng);
                    acc.push(self.log_link(dot(phi, &self.mu(&y)?)));
                }
                let n = acc.len() as f64;
                return Ok(crate::mdp::log_sum_exp(&acc) - n.ln());
            }
        }
        Ok(crate::mdp::log_sum_exp(&acc))
    }

    /// Normalized `P(.|s,a)` over a discrete state space.
    pub fn transition_row(&self, s: &Point, a: &Point, mu_table: &[Vec<f64>]) -> Result<Vec<f64>> {
        let phi = self.phi(s, a)?;
        let logs: Vec<f64> = mu_table.iter().map(|mu| self.log_link(dot(&phi, mu))).collect();
        let lz = crate::mdp::log_sum_exp(&logs);
        Ok(logs.iter().map(|l| (l - lz).exp()).collect())
    }

    /// `mu(s')` for every state of a discrete space.
    pub fn mu_table(&self) -> Result<Vec<Vec<f64>>> {
        let n = self
            .state_space
            .cardinality()
            .ok_or_else(|| Error::invalid("mu table needs a discrete state space"))?;
        (0..n).map(|i| self.mu(&Point::Discrete(i))).collect()
    }

    /// Renormalized learned kernel `P(s'|s,a)` as a flat `(s*A+a)*S+s'`
    /// table. Discrete spaces only.
    pub fn learned_kernel(&self) -> Result<Vec<f64>> {
        let (Some(ns), Some(na)) = (self.state_space.cardinality(), self.action_space.cardinality()) else {
            return Err(Error::invalid("learned kernel needs discrete spaces"));
        };
        let mus = self.mu_table()?;
        let mut out = Vec::with_capacity(ns * na * ns);
        for s in 0..ns {
            for a in 0..na {
                out.extend(self.transition_row(&Point::Discrete(s), &Point::Discrete(a), &mus)?);
            }
        }
        Ok(out)
    }

    fn mu_backward(&self, eval: &MuEval, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        let n_phi = self.phi_net.num_params();
        self.mu_net.backward_params(&eval.cache, upstream, &mut grad[n_phi..])?;
        Ok(())
    }

    fn phi_backward(&self, eval: &FeatureEval, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        let n_phi = self.phi_net.num_params();
        let raw_grad: Vec<f64> = match eval.scaled_by {
            None => upstream.to_vec(),
            Some(norm) => {
                let proj = dot(&eval.phi, upstream);
                upstream.iter().zip(&eval.phi).map(|(g, p)| (g - p * proj) / norm).collect()
            }
        };
        self.phi_net.backward_params(&eval.cache, &raw_grad, &mut grad[..n_phi])?;
        Ok(())
    }

    fn mu_evals(&self, points: &[Point], memo: &mut HashMap<usize, usize>, out: &mut Vec<MuEval>) -> Result<Vec<usize>> {
        let mut idx = Vec::with_capacity(points.len());
        for p in points {
            match p {
                Point::Discrete(i) => {
                    if let Some(k) = memo.get(i) {
                        idx.push(*k);
                        continue;
                    }
                    memo.insert(*i, out.len());
                }
                Point::Continuous(_) => {}
            }
            idx.push(out.len());
            out.push(self.mu_eval(p)?);
        }
        Ok(idx)
    }

    /// Marginal-constraint penalty `(1/n) sum_i (log E_p[g(<phi_i, mu>)])^2`
    /// and its gradient.
    pub fn normalization_regularizer(
        &self,
        pairs: &[(Point, Point)],
        sampling: MarginalSampling,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.num_params()];
        if pairs.is_empty() {
            return Ok((0.0, grad));
        }
        let (samples, weights) = self.regularizer_draws(pairs.len(), sampling, rng)?;
        let n = pairs.len() as f64;
        let mut memo = HashMap::new();
        let mut mus = Vec::new();
        let mut loss = 0.0;
        let mut gmus: Vec<Vec<f64>> = Vec::new();
        for (i, (s, a)) in pairs.iter().enumerate() {
            let fe = self.phi_eval(s, a)?;
            let ys = &samples[i];
            let idx = self.mu_evals(ys, &mut memo, &mut mus)?;
            gmus.resize(mus.len(), vec![0.0; fe.phi.len()]);
            let inners: Vec<f64> = idx.iter().map(|k| dot(&fe.phi, &mus[*k].mu)).collect();
            let m: f64 = inners.iter().zip(&weights).map(|(z, w)| w * self.link(*z)).sum();
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::NonFinite("marginal estimate".into()));
            }
            let lm = m.ln();
            loss += lm * lm / n;
            // d/dinner_j = (2/n) lm / m * w_j g'(inner_j)
            let outer = 2.0 * lm / (n * m);
            let mut gphi = vec![0.0; fe.phi.len()];
            for ((k, z), w) in idx.iter().zip(&inners).zip(&weights) {
                let c = outer * w * self.dlink(*z);
                if c == 0.0 {
                    continue;
                }
                let mu = &mus[*k].mu;
                gphi.iter_mut().zip(mu).for_each(|(g, v)| *g += c * v);
                gmus[*k].iter_mut().zip(&fe.phi).for_each(|(g, p)| *g += c * p);
            }
            self.phi_backward(&fe, &gphi, &mut grad)?;
        }
        for (ev, g) in mus.iter().zip(&gmus) {
            if g.iter().any(|v| *v != 0.0) {
                self.mu_backward(ev, g, &mut grad)?;
            }
        }
        Ok((loss, grad))
    }

    /// `E_p |mu(s')|^2` and its gradient.
    pub fn mu_norm_regularizer(&self, sampling: MarginalSampling, rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.num_params()];
        let (samples, weights) = self.regularizer_draws(1, sampling, rng)?;
        let mut loss = 0.0;
        for (y, w) in samples[0].iter().zip(&weights) {
            let ev = self.mu_eval(y)?;
            loss += w * dot(&ev.mu, &ev.mu);
            let up: Vec<f64> = ev.mu.iter().map(|v| 2.0 * w * v).collect();
            self.mu_backward(&ev, &up, &mut grad)?;
        }
        Ok((loss, grad))
    }

    /// Per-term draws and their (shared) averaging weights.
    fn regularizer_draws(&self, terms: usize, sampling: MarginalSampling, rng: &mut Rng) -> Result<(Vec<Vec<Point>>, Vec<f64>)> {
        match sampling {
            MarginalSampling::MonteCarlo(k) => {
                if k == 0 {
                    return Err(Error::invalid("regularizer needs K >= 1"));
                }
                let draws = (0..terms)
                    .map(|_| (0..k).map(|_| self.base_measure.sample(rng)).collect())
                    .collect();
                Ok((draws, vec![1.0 / k as f64; k]))
            }
            MarginalSampling::Enumerate => {
                let BaseMeasure::UniformDiscrete { cardinality } = self.base_measure else {
                    return Err(Error::invalid("enumeration needs a discrete base measure"));
                };
                let all: Vec<Point> = (0..cardinality).map(Point::Discrete).collect();
                Ok((vec![all; terms], vec![1.0 / cardinality as f64; cardinality]))
            }
        }
    }

    /// Little-endian checkpoint, see `docs/formats.md`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        put_u32(&mut out, 1);
        put_u32(&mut out, self.feature_dim() as u32);
        self.state_space.write_wire(&mut out);
        self.action_space.write_wire(&mut out);
        out.push(match self.positivity {
            Positivity::SoftplusOnInner => 0,
            Positivity::ElementwiseNonneg => 1,
        });
        out.push(self.bounded_phi as u8);
        out.extend_from_slice(&[0, 0]);
        put_f64(&mut out, self.temperature);
        self.base_measure.write_wire(&mut out);
        out.extend(self.phi_net.to_bytes());
        out.extend(self.mu_net.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let d = r.u32()? as usize;
        let state_space = Space::read_wire(&mut r)?;
        let action_space = Space::read_wire(&mut r)?;
        let positivity = match r.u8()? {
            0 => Positivity::SoftplusOnInner,
            1 => Positivity::ElementwiseNonneg,
            t => return Err(Error::Format(format!("unknown positivity tag {t}"))),
        };
        let bounded_phi = match r.u8()? {
            0 => false,
            1 => true,
            t => return Err(Error::Format(format!("bad bounded flag {t}"))),
        };
        if r.take(2)? != [0, 0] {
            return Err(Error::Format("reserved bytes must be zero".into()));
        }
        let temperature = r.f64()?;
        let base_measure = BaseMeasure::read_wire(&mut r)?;
        let phi_net = Mlp::read_wire(&mut r)?;
        let mu_net = Mlp::read_wire(&mut r)?;
        r.finish()?;
        if phi_net.output_dim() != d {
            return Err(Error::Format(format!("feature dimension {d} does not match phi net")));
        }
        Self::from_parts(state_space, action_space, phi_net, mu_net, base_measure, positivity, bounded_phi, temperature)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

const MODEL_MAGIC: &[u8; 8] = b"CTRLMDL\0";

impl ContrastiveModel for LowRankModel {
    type Condition = (Point, Point);
    type Outcome = Point;
    type Tape = ScoreTape;

    fn num_params(&self) -> usize {
        self.phi_net.num_params() + self.mu_net.num_params()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.phi_net.params().to_vec();
        p.extend_from_slice(self.mu_net.params());
        p
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), got: params.len() });
        }
        let k = self.phi_net.num_params();
        self.phi_net.set_params(&params[..k])?;
        self.mu_net.set_params(&params[k..])
    }

    fn log_scores(&self, conditions: &[(Point, Point)], outcomes: &[Vec<Point>]) -> Result<(Vec<Vec<f64>>, ScoreTape)> {
        if conditions.len() != outcomes.len() {
            return Err(Error::DimensionMismatch { expected: conditions.len(), got: outcomes.len() });
        }
        let mut memo = HashMap::new();
        let mut mus = Vec::new();
        let mut phis = Vec::with_capacity(conditions.len());
        let mut mu_index = Vec::with_capacity(conditions.len());
        let mut inner = Vec::with_capacity(conditions.len());
        let mut scores = Vec::with_capacity(conditions.len());
        for ((s, a), xs) in conditions.iter().zip(outcomes) {
            let fe = self.phi_eval(s, a)?;
            let idx = self.mu_evals(xs, &mut memo, &mut mus)?;
            let z: Vec<f64> = idx.iter().map(|k| dot(&fe.phi, &mus[*k].mu)).collect();
            let mut row = Vec::with_capacity(xs.len());
            for (zi, x) in z.iter().zip(xs) {
                row.push(self.log_link(*zi) + self.base_measure.log_density(x)?);
            }
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::NonFinite("log score".into()));
            }
            scores.push(row);
            phis.push(fe);
            mu_index.push(idx);
            inner.push(z);
        }
        Ok((scores, ScoreTape { phis, mus, mu_index, inner }))
    }

    fn log_scores_backward(&self, tape: &ScoreTape, upstream: &[Vec<f64>], grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), got: grad.len() });
        }
        let d = self.feature_dim();
        let mut gmu = vec![vec![0.0; d]; tape.mus.len()];
        for (i, fe) in tape.phis.iter().enumerate() {
            let mut gphi = vec![0.0; d];
            for (j, k) in tape.mu_index[i].iter().enumerate() {
                let c = upstream[i][j] * self.dlog_link(tape.inner[i][j]);
                if c == 0.0 {
                    continue;
                }
                let mu = &tape.mus[*k].mu;
                gphi.iter_mut().zip(mu).for_each(|(g, v)| *g += c * v);
                gmu[*k].iter_mut().zip(&fe.phi).for_each(|(g, p)| *g += c * p);
            }
            self.phi_backward(fe, &gphi, grad)?;
        }
        for (ev, g) in tape.mus.iter().zip(&gmu) {
            if g.iter().any(|v| *v != 0.0) {
                self.mu_backward(ev, g, grad)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::check_gradient;
    use crate::rng;

    fn random_mdp(ns: usize, na: usize, g: &mut Rng) -> TabularMdp {
        let mut p = vec![0.0; ns * na * ns];
        for row in p.chunks_mut(ns) {
            let mut t = 0.0;
            for v in row.iter_mut() {
                *v = g.random_range(0.0..1.0);
                t += *v;
            }
            row.iter_mut().for_each(|v| *v /= t);
        }
        let r = (0..ns * na).map(|_| g.random_range(0.0..1.0)).collect();
        TabularMdp::new(ns, na, p, r, vec![1.0 / ns as f64; ns]).unwrap()
    }

    fn small_model(g: &mut Rng, ns: usize, na: usize) -> LowRankModel {
        let space = Space::discrete(ns).unwrap();
        let cfg = LowRankConfig { feature_dim: 4, hidden: vec![5], ..LowRankConfig::default() };
        LowRankModel::new(space.clone(), Space::discrete(na).unwrap(), BaseMeasure::uniform(&space), &cfg, g).unwrap()
    }

    fn box_model(g: &mut Rng) -> LowRankModel {
        let space = Space::boxed(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let cfg = LowRankConfig { feature_dim: 4, hidden: vec![6], ..LowRankConfig::default() };
        LowRankModel::new(space.clone(), Space::discrete(3).unwrap(), BaseMeasure::uniform(&space), &cfg, g).unwrap()
    }

    #[test]
    fn tabular_factorization_is_exact() {
        let mut g = rng(1);
        for _ in 0..20 {
            let mdp = random_mdp(4, 3, &mut g);
            let m = LowRankModel::tabular(&mdp).unwrap();
            for s in 0..4 {
                for a in 0..3 {
                    let mut total = 0.0;
                    for sn in 0..4 {
                        let v = m.unnormalized_score(&Point::Discrete(s), &Point::Discrete(a), &Point::Discrete(sn)).unwrap();
                        assert!((v - mdp.row(s, a)[sn]).abs() < 1e-15);
                        total += v;
                    }
                    assert!((total - 1.0).abs() < 1e-14);
                    let (dens, lz) = m
                        .conditional_density(&Point::Discrete(s), &Point::Discrete(a), &Point::Discrete(1), Normalizer::ExactDiscrete, &mut g)
                        .unwrap();
                    assert!((dens - mdp.row(s, a)[1]).abs() < 1e-14);
                    assert!(lz.abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn softplus_at_zero_inner() {
        let mut g = rng(2);
        let mut m = small_model(&mut g, 3, 2);
        m.phi_net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let v = m.unnormalized_score(&Point::Discrete(0), &Point::Discrete(1), &Point::Discrete(2)).unwrap();
        assert!((v - 2f64.ln() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn scores_positive_and_phi_bounded() {
        let mut g = rng(3);
        let m = box_model(&mut g);
        for _ in 0..100_000 {
            let s = Point::Continuous(vec![g.random_range(0.0..1.0), g.random_range(0.0..1.0)]);
            let a = Point::Discrete(g.random_range(0..3));
            let sn = Point::Continuous(vec![g.random_range(0.0..1.0), g.random_range(0.0..1.0)]);
            assert!(m.unnormalized_score(&s, &a, &sn).unwrap() > 0.0);
            let phi = m.phi(&s, &a).unwrap();
            assert!(dot(&phi, &phi).sqrt() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn constant_score_normalization() {
        // score = 2 p(s'): identity link, phi = e_0, mu = 2 e_0
        let space = Space::discrete(5).unwrap();
        let mut phi = Mlp::zeros(&[5, 1], Activation::Tanh, Activation::Identity).unwrap();
        phi.params_mut()[5] = 1.0;
        let mut mu = Mlp::zeros(&[5, 1], Activation::Tanh, Activation::Identity).unwrap();
        mu.params_mut()[5] = 2.0;
        let m = LowRankModel::from_parts(
            space.clone(),
            Space::discrete(1).unwrap(),
            phi,
            mu,
            BaseMeasure::uniform(&space),
            Positivity::ElementwiseNonneg,
            false,
            1.0,
        )
        .unwrap();
        let mut g = rng(4);
        let (d, lz) = m
            .conditional_density(&Point::Discrete(2), &Point::Discrete(0), &Point::Discrete(3), Normalizer::ExactDiscrete, &mut g)
            .unwrap();
        assert!((d - 0.2).abs() < 1e-15);
        assert!((lz - 2f64.ln()).abs() < 1e-15);
        let pairs = vec![(Point::Discrete(0), Point::Discrete(0)), (Point::Discrete(3), Point::Discrete(0))];
        for sampling in [MarginalSampling::Enumerate, MarginalSampling::MonteCarlo(3)] {
            let (loss, _) = m.normalization_regularizer(&pairs, sampling, &mut g).unwrap();
            assert!((loss - 2f64.ln().powi(2)).abs() < 1e-12);
        }
        let (mu_loss, _) = m.mu_norm_regularizer(MarginalSampling::MonteCarlo(7), &mut g).unwrap();
        assert!((mu_loss - 4.0).abs() < 1e-12);
    }

    #[test]
    fn tabular_regularizers_match_direct_sums() {
        let mut g = rng(5);
        let mdp = random_mdp(4, 2, &mut g);
        let m = LowRankModel::tabular(&mdp).unwrap();
        let pairs: Vec<_> = (0..4).flat_map(|s| (0..2).map(move |a| (Point::Discrete(s), Point::Discrete(a)))).collect();
        let (loss, _) = m.normalization_regularizer(&pairs, MarginalSampling::Enumerate, &mut g).unwrap();
        assert!(loss < 1e-12);
        // E_p |mu|^2 = (1/S) sum_s' sum_sa (S P)^2 = S sum P^2
        let direct: f64 = 4.0 * mdp.p.iter().map(|v| v * v).sum::<f64>();
        let (mu_loss, _) = m.mu_norm_regularizer(MarginalSampling::Enumerate, &mut g).unwrap();
        assert!((mu_loss - direct).abs() < 1e-12);
        let uniform = TabularMdp::new(4, 2, vec![0.25; 32], vec![0.0; 8], vec![0.25; 4]).unwrap();
        let (u_loss, _) = LowRankModel::tabular(&uniform)
            .unwrap()
            .mu_norm_regularizer(MarginalSampling::Enumerate, &mut g)
            .unwrap();
        assert!((u_loss - 8.0).abs() < 1e-12);
    }

    #[test]
    fn exact_density_sums_to_one() {
        let mut g = rng(6);
        for _ in 0..10 {
            let m = small_model(&mut g, 6, 2);
            let mus = m.mu_table().unwrap();
            let row = m.transition_row(&Point::Discrete(1), &Point::Discrete(1), &mus).unwrap();
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut t = 0.0;
            for sn in 0..6 {
                t += m
                    .conditional_density(&Point::Discrete(2), &Point::Discrete(0), &Point::Discrete(sn), Normalizer::ExactDiscrete, &mut g)
                    .unwrap()
                    .0;
            }
            assert!((t - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn monte_carlo_log_partition_matches_exact() {
        let mut g = rng(7);
        let m = small_model(&mut g, 8, 2);
        let phi = m.phi(&Point::Discrete(3), &Point::Discrete(1)).unwrap();
        let exact = m.log_partition(&phi, Normalizer::ExactDiscrete, &mut g).unwrap();
        let mc = m.log_partition(&phi, Normalizer::MonteCarlo(100_000), &mut g).unwrap();
        assert!((exact - mc).abs() < 0.01, "{exact} {mc}");
        assert!(m.log_partition(&phi, Normalizer::MonteCarlo(0), &mut g).is_err());
    }

    #[test]
    fn monte_carlo_variance_scales_inverse_k() {
        let mut g = rng(8);
        let m = box_model(&mut g);
        let phi = m.phi(&Point::Continuous(vec![0.3, 0.6]), &Point::Discrete(1)).unwrap();
        let var = |k: usize, g: &mut Rng| {
            let xs: Vec<f64> = (0..100).map(|_| m.log_partition(&phi, Normalizer::MonteCarlo(k), g).unwrap()).collect();
            let mean = xs.iter().sum::<f64>() / 100.0;
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 99.0
        };
        let v3 = var(1000, &mut g);
        let v4 = var(10_000, &mut g);
        let ratio = v4 / (v3 / 10.0);
        assert!(ratio > 1.0 / 3.0 && ratio < 3.0, "{ratio}");
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let mut g = rng(9);
        for trial in 0..10 {
            let m = if trial % 2 == 0 { small_model(&mut g, 4, 2) } else { box_model(&mut g) };
            let pairs: Vec<(Point, Point)> = (0..3)
                .map(|_| {
                    let s = m.base_measure.sample(&mut g);
                    (s, Point::Discrete(g.random_range(0..2)))
                })
                .collect();
            let seed = 100 + trial;
            let f = |p: &[f64]| {
                let mut mm = m.clone();
                mm.set_params(p)?;
                mm.normalization_regularizer(&pairs, MarginalSampling::MonteCarlo(5), &mut rng(seed))
            };
            let r = check_gradient(f, &m.params()).unwrap();
            assert!(r.max_rel_error < 1e-4, "marginal {trial}: {}", r.max_rel_error);
            let f = |p: &[f64]| {
                let mut mm = m.clone();
                mm.set_params(p)?;
                mm.mu_norm_regularizer(MarginalSampling::MonteCarlo(5), &mut rng(seed))
            };
            let r = check_gradient(f, &m.params()).unwrap();
            assert!(r.max_rel_error < 1e-4, "mu {trial}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn log_score_gradients_match_finite_differences() {
        let mut g = rng(10);
        for trial in 0..6 {
            let m = if trial % 2 == 0 { small_model(&mut g, 5, 2) } else { box_model(&mut g) };
            let conds: Vec<(Point, Point)> =
                (0..3).map(|_| (m.base_measure.sample(&mut g), Point::Discrete(g.random_range(0..2)))).collect();
            let outs: Vec<Vec<Point>> = (0..3).map(|_| (0..4).map(|_| m.base_measure.sample(&mut g)).collect()).collect();
            let up: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| g.random_range(-1.0..1.0)).collect()).collect();
            let f = |p: &[f64]| {
                let mut mm = m.clone();
                mm.set_params(p)?;
                let (s, tape) = mm.log_scores(&conds, &outs)?;
                let mut grad = vec![0.0; mm.num_params()];
                mm.log_scores_backward(&tape, &up, &mut grad)?;
                let v: f64 = s.iter().zip(&up).map(|(a, b)| dot(a, b)).sum();
                Ok((v, grad))
            };
            let r = check_gradient(f, &m.params()).unwrap();
            assert!(r.max_rel_error < 1e-4, "{trial}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut g = rng(11);
        let m = box_model(&mut g);
        let b = m.to_bytes();
        assert_eq!(LowRankModel::from_bytes(&b).unwrap(), m);
        let mdp = random_mdp(3, 2, &mut g);
        let t = LowRankModel::tabular(&mdp).unwrap();
        assert_eq!(LowRankModel::from_bytes(&t.to_bytes()).unwrap(), t);
        assert!(LowRankModel::from_bytes(&b[..b.len() - 3]).is_err());
        assert!(LowRankModel::from_bytes(b"CTRLMDL\0").is_err());
    }

    #[test]
    fn base_measures_integrate_to_one() {
        let b = BaseMeasure::UniformDiscrete { cardinality: 7 };
        let t: f64 = (0..7).map(|i| b.density(&Point::Discrete(i)).unwrap()).sum();
        assert!((t - 1.0).abs() < 1e-15);
        // midpoint quadrature on a 2-D grid
        let gauss = BaseMeasure::gaussian(vec![0.2, -0.1], vec![0.5, 0.3]).unwrap();
        let boxm = BaseMeasure::UniformBox { low: vec![0.0, 0.0], high: vec![2.0, 0.5] };
        let n = 400;
        for (m, lo, hi) in [(&gauss, [-3.0, -3.0], [3.0, 3.0]), (&boxm, [0.0, 0.0], [2.0, 0.5])] {
            let (hx, hy) = ((hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64);
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let p = Point::Continuous(vec![lo[0] + (i as f64 + 0.5) * hx, lo[1] + (j as f64 + 0.5) * hy]);
                    total += m.density(&p).unwrap() * hx * hy;
                }
            }
            assert!((total - 1.0).abs() < 1e-3, "{total}");
        }
    }
}
