//! MDP abstractions: policies, environments, tabular MDPs, rollouts,
//! occupancy estimation and exact policy evaluation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::spaces::{Point, Space, Transition};
use crate::{Error, Result, Rng};

/// Result of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub next: Point,
    pub reward: f64,
    pub terminal: bool,
}

pub trait Environment {
    fn state_space(&self) -> &Space;
    /// Every environment here exposes a finite action set.
    fn action_space(&self) -> &Space;
    fn reset(&self, rng: &mut Rng) -> Point;
    fn step(&self, state: &Point, action: &Point, rng: &mut Rng) -> Result<Step>;

    fn n_actions(&self) -> usize {
        self.action_space().cardinality().unwrap_or(0)
    }
}

/// Anything that yields a distribution over a finite action set.
pub trait Actor {
    fn action_probs(&self, state: &Point) -> Result<Vec<f64>>;

    fn sample_action(&self, state: &Point, rng: &mut Rng) -> Result<Point> {
        let probs = self.action_probs(state)?;
        Ok(Point::Discrete(sample_categorical(&probs, rng)))
    }
}

/// Inverse-CDF draw; falls back to the last positive entry on round-off.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Stochastic policy over a finite action set.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Uniform { n_actions: usize },
    /// Row-major `n_states x n_actions` logits.
    TabularSoftmax { n_states: usize, n_actions: usize, logits: Vec<f64> },
    /// Explicit row-major probabilities (greedy and behavior policies).
    Tabular { n_states: usize, n_actions: usize, probs: Vec<f64> },
    /// `pi(a|s) ∝ exp(w . phi(s,a) / temperature)`.
    FeatureSoftmax { n_actions: usize, weights: Vec<f64>, temperature: f64 },
}

impl Policy {
    pub fn uniform(n_actions: usize) -> Self {
        Policy::Uniform { n_actions }
    }

    pub fn greedy(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::invalid(format!("action {a} out of range")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Policy::Tabular { n_states: actions.len(), n_actions, probs })
    }

    pub fn tabular(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch { expected: n_states * n_actions, got: probs.len() });
        }
        for row in probs.chunks(n_actions) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("policy rows must be distributions"));
            }
        }
        Ok(Policy::Tabular { n_states, n_actions, probs })
    }

    pub fn n_actions(&self) -> usize {
        match self {
            Policy::Uniform { n_actions }
            | Policy::TabularSoftmax { n_actions, .. }
            | Policy::Tabular { n_actions, .. }
            | Policy::FeatureSoftmax { n_actions, .. } => *n_actions,
        }
    }

    /// Action distribution at `state`; `FeatureSoftmax` needs one feature row
    /// per action.
    pub fn probs(&self, state: &Point, action_features: Option<&[Vec<f64>]>) -> Result<Vec<f64>> {
        match self {
            Policy::Uniform { n_actions } => Ok(vec![1.0 / *n_actions as f64; *n_actions]),
            Policy::TabularSoftmax { n_states, n_actions, logits } => {
                let s = tabular_index(state, *n_states)?;
                Ok(softmax(&logits[s * n_actions..(s + 1) * n_actions]))
            }
            Policy::Tabular { n_states, n_actions, probs } => {
                let s = tabular_index(state, *n_states)?;
                Ok(probs[s * n_actions..(s + 1) * n_actions].to_vec())
            }
            Policy::FeatureSoftmax { n_actions, weights, temperature } => {
                let feats = action_features
                    .ok_or_else(|| Error::invalid("feature policy needs action features"))?;
                if feats.len() != *n_actions {
                    return Err(Error::DimensionMismatch { expected: *n_actions, got: feats.len() });
                }
                let logits: Vec<f64> = feats
                    .iter()
                    .map(|f| dot(weights, f) / temperature)
                    .collect();
                Ok(softmax(&logits))
            }
        }
    }

    /// Row-major `n_states x n_actions` table for tabular policies.
    pub fn table(&self, n_states: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n_states * self.n_actions());
        for s in 0..n_states {
            out.extend(self.probs(&Point::Discrete(s), None)?);
        }
        Ok(out)
    }
}

fn tabular_index(state: &Point, n_states: usize) -> Result<usize> {
    match state {
        Point::Discrete(s) if *s < n_states => Ok(*s),
        _ => Err(Error::invalid("tabular policy queried outside its state set")),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Actor for Policy {
    fn action_probs(&self, state: &Point) -> Result<Vec<f64>> {
        self.probs(state, None)
    }
}

/// Finite MDP with explicit kernel and reward tables.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `p[(s * A + a) * S + s']`.
    pub p: Vec<f64>,
    /// `r[s * A + a]`, in `[0, 1]`.
    pub r: Vec<f64>,
    pub rho: Vec<f64>,
    /// Entering a terminal state ends the episode; its value is zero.
    pub terminal: Vec<bool>,
    state_space: Space,
    action_space: Space,
}

impl TabularMdp {
    pub fn new(n_states: usize, n_actions: usize, p: Vec<f64>, r: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        let terminal = vec![false; n_states];
        Self::with_terminal(n_states, n_actions, p, r, rho, terminal)
    }

    pub fn with_terminal(
        n_states: usize,
        n_actions: usize,
        p: Vec<f64>,
        r: Vec<f64>,
        rho: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let state_space = Space::discrete(n_states)?;
        let action_space = Space::discrete(n_actions)?;
        check_len(&p, n_states * n_actions * n_states)?;
        check_len(&r, n_states * n_actions)?;
        check_len(&rho, n_states)?;
        if terminal.len() != n_states {
            return Err(Error::DimensionMismatch { expected: n_states, got: terminal.len() });
        }
        for (row, chunk) in p.chunks(n_states).enumerate() {
            check_distribution(chunk, &format!("transition row {row}"))?;
        }
        check_distribution(&rho, "initial distribution")?;
        if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("rewards must lie in [0, 1]"));
        }
        Ok(TabularMdp { n_states, n_actions, p, r, rho, terminal, state_space, action_space })
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.p[start..start + self.n_states]
    }

    /// Parses the text format documented in `docs/formats.md`.
    pub fn parse(text: &str) -> Result<Self> {
        parse_tabular(text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("states {}\nactions {}\ntransitions\n", self.n_states, self.n_actions);
        for row in self.p.chunks(self.n_states) {
            out.push_str(&join(row));
            out.push('\n');
        }
        out.push_str("rewards\n");
        for row in self.r.chunks(self.n_actions) {
            out.push_str(&join(row));
            out.push('\n');
        }
        out.push_str("initial\n");
        out.push_str(&join(&self.rho));
        out.push('\n');
        if self.terminal.iter().any(|t| *t) {
            out.push_str("terminal\n");
            let flags: Vec<&str> = self.terminal.iter().map(|t| if *t { "1" } else { "0" }).collect();
            out.push_str(&flags.join(" "));
            out.push('\n');
        }
        out
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn check_len(v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: v.len() });
    }
    Ok(())
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid(format!("{what} has negative or non-finite entries")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

fn parse_tabular(text: &str) -> Result<TabularMdp> {
    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        Header,
        Transitions,
        Rewards,
        Initial,
        Terminal,
    }
    let mut n_states: Option<usize> = None;
    let mut n_actions: Option<usize> = None;
    let mut section = Section::Header;
    let (mut p, mut r, mut rho, mut terminal) = (vec![], vec![], vec![], vec![]);
    let mut seen = [false; 4];

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        let head = words.next().unwrap_or("");
        let next_section = match head {
            "transitions" => Some(Section::Transitions),
            "rewards" => Some(Section::Rewards),
            "initial" => Some(Section::Initial),
            "terminal" => Some(Section::Terminal),
            _ => None,
        };
        if let Some(sec) = next_section {
            if words.next().is_some() {
                return Err(Error::parse(line_no, format!("unexpected tokens after {head:?}")));
            }
            let slot = sec as usize - 1;
            if seen[slot] {
                return Err(Error::parse(line_no, format!("duplicate section {head:?}")));
            }
            if n_states.is_none() || n_actions.is_none() {
                return Err(Error::parse(line_no, "states and actions must be declared first"));
            }
            seen[slot] = true;
            section = sec;
            continue;
        }
        match section {
            Section::Header => {
                let value = words
                    .next()
                    .ok_or_else(|| Error::parse(line_no, format!("missing value for {head:?}")))?;
                let n: usize = value
                    .parse()
                    .map_err(|_| Error::parse(line_no, format!("bad count {value:?}")))?;
                if n == 0 || n > 1 << 16 {
                    return Err(Error::parse(line_no, format!("count {n} out of range")));
                }
                match head {
                    "states" if n_states.is_none() => n_states = Some(n),
                    "actions" if n_actions.is_none() => n_actions = Some(n),
                    _ => return Err(Error::parse(line_no, format!("unexpected header {head:?}"))),
                }
                if words.next().is_some() {
                    return Err(Error::parse(line_no, "trailing tokens"));
                }
                let (Some(s), Some(a)) = (n_states, n_actions) else { continue };
                if s.saturating_mul(s).saturating_mul(a) > 1 << 24 {
                    return Err(Error::parse(line_no, "model too large"));
                }
            }
            sec => {
                let (ns, na) = (n_states.unwrap_or(0), n_actions.unwrap_or(0));
                let (width, target, cap) = match sec {
                    Section::Transitions => (ns, &mut p, ns * na * ns),
                    Section::Rewards => (na, &mut r, ns * na),
                    Section::Initial => (ns, &mut rho, ns),
                    Section::Terminal => (ns, &mut terminal, ns),
                    Section::Header => unreachable!(),
                };
                let values = line
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| Error::parse(line_no, format!("bad number {t:?}")))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                if values.len() != width {
                    return Err(Error::parse(
                        line_no,
                        format!("expected {width} entries, found {}", values.len()),
                    ));
                }
                if target.len() + width > cap {
                    return Err(Error::parse(line_no, "too many rows in section"));
                }
                if sec == Section::Transitions {
                    let sum: f64 = values.iter().sum();
                    if (sum - 1.0).abs() > 1e-9 || values.iter().any(|v| *v < 0.0) {
                        return Err(Error::parse(line_no, format!("transition row sums to {sum}, not 1")));
                    }
                }
                target.extend(values);
            }
        }
    }
    let (Some(ns), Some(na)) = (n_states, n_actions) else {
        return Err(Error::parse(0, "missing states/actions header"));
    };
    for (name, got, want) in [
        ("transitions", p.len(), ns * na * ns),
        ("rewards", r.len(), ns * na),
        ("initial", rho.len(), ns),
    ] {
        if got != want {
            return Err(Error::parse(0, format!("section {name} has {got} entries, expected {want}")));
        }
    }
    let terminal = if terminal.is_empty() {
        vec![false; ns]
    } else {
        if terminal.len() != ns || terminal.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::parse(0, "terminal section needs one 0/1 flag per state"));
        }
        terminal.iter().map(|v| *v == 1.0).collect()
    };
    TabularMdp::with_terminal(ns, na, p, r, rho, terminal).map_err(|e| Error::parse(0, e.to_string()))
}

impl Environment for TabularMdp {
    fn state_space(&self) -> &Space {
        &self.state_space
    }

    fn action_space(&self) -> &Space {
        &self.action_space
    }

    fn reset(&self, rng: &mut Rng) -> Point {
        Point::Discrete(sample_categorical(&self.rho, rng))
    }

    fn step(&self, state: &Point, action: &Point, rng: &mut Rng) -> Result<Step> {
        let (Some(s), Some(a)) = (state.index(), action.index()) else {
            return Err(Error::invalid("tabular MDP needs discrete state and action"));
        };
        if s >= self.n_states || a >= self.n_actions {
            return Err(Error::invalid(format!("({s},{a}) outside the MDP")));
        }
        let next = sample_categorical(self.row(s, a), rng);
        Ok(Step {
            next: Point::Discrete(next),
            reward: self.r[s * self.n_actions + a],
            terminal: self.terminal[next],
        })
    }
}

/// Rolls out `actor` and stops after each step with probability `1 - gamma`
/// (or at an environment terminal). Rollouts are capped at `10 / (1 - gamma)`
/// steps.
pub fn sample_discounted_rollout<E, A>(env: &E, actor: &A, gamma: f64, rng: &mut Rng) -> Result<Vec<Transition>>
where
    E: Environment + ?Sized,
    A: Actor + ?Sized,
{
    check_gamma(gamma)?;
    let cap = (10.0 / (1.0 - gamma)).ceil() as usize;
    let mut out = Vec::new();
    let mut state = env.reset(rng);
    for _ in 0..cap {
        let action = actor.sample_action(&state, rng)?;
        let step = env.step(&state, &action, rng)?;
        if !step.next.is_finite() || !step.reward.is_finite() {
            return Err(Error::Environment("non-finite state or reward".into()));
        }
        let done = step.terminal;
        out.push(Transition::new(state, action, step.reward, step.next.clone(), done)?);
        if done || rng.random::<f64>() < 1.0 - gamma {
            break;
        }
        state = step.next;
    }
    Ok(out)
}

/// Fixed-horizon rollout (stops early only at terminals).
pub fn sample_rollout<E, A>(env: &E, actor: &A, horizon: usize, rng: &mut Rng) -> Result<Vec<Transition>>
where
    E: Environment + ?Sized,
    A: Actor + ?Sized,
{
    let mut out = Vec::with_capacity(horizon);
    let mut state = env.reset(rng);
    for _ in 0..horizon {
        let action = actor.sample_action(&state, rng)?;
        let step = env.step(&state, &action, rng)?;
        if !step.next.is_finite() {
            return Err(Error::Environment("non-finite state".into()));
        }
        let done = step.terminal;
        out.push(Transition::new(state, action, step.reward, step.next.clone(), done)?);
        if done {
            break;
        }
        state = step.next;
    }
    Ok(out)
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("gamma must lie in (0, 1), got {gamma}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyEntry {
    pub state: Point,
    pub action: Point,
    pub weight: f64,
}

/// Normalized discounted state-action visitation.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyEstimate {
    /// Discrete pairs are aggregated and sorted; continuous pairs keep one
    /// weighted sample per visit.
    pub entries: Vec<OccupancyEntry>,
    /// Total discounted weight before normalization.
    pub normalization: f64,
}

impl OccupancyEstimate {
    pub fn weight_of(&self, s: usize, a: usize) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.state == Point::Discrete(s) && e.action == Point::Discrete(a))
            .map(|e| e.weight)
            .sum()
    }

    /// Exact occupancy of a tabular policy: `(1 - gamma) rho^T (I - gamma P_pi)^-1`.
    pub fn exact(mdp: &TabularMdp, policy: &Policy, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let (ns, na) = (mdp.n_states, mdp.n_actions);
        let pi = policy.table(ns)?;
        let p_pi = policy_kernel(mdp, &pi);
        let a = DMatrix::identity(ns, ns) - p_pi.transpose() * gamma;
        let rho = DVector::from_column_slice(&mdp.rho);
        let d = a
            .lu()
            .solve(&rho)
            .ok_or_else(|| Error::Singular("occupancy system".into()))?
            * (1.0 - gamma);
        let mut entries = vec![];
        for s in 0..ns {
            for a in 0..na {
                let w = d[s] * pi[s * na + a];
                if w > 0.0 {
                    entries.push(OccupancyEntry { state: Point::Discrete(s), action: Point::Discrete(a), weight: w });
                }
            }
        }
        let total: f64 = entries.iter().map(|e| e.weight).sum();
        entries.iter_mut().for_each(|e| e.weight /= total);
        Ok(OccupancyEstimate { entries, normalization: total })
    }
}

/// Weights each visit at step `t` by `gamma^t` and normalizes.
///
/// Expects rollouts whose length is not itself discount-distributed (fixed
/// horizon or absorbing); geometric-length rollouts already sample the
/// occupancy and would be discounted twice.
pub fn estimate_occupancy(rollouts: &[Vec<Transition>], gamma: f64) -> Result<OccupancyEstimate> {
    check_gamma(gamma)?;
    if rollouts.iter().all(|r| r.is_empty()) {
        return Err(Error::NoData);
    }
    let mut discrete: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut continuous = vec![];
    let mut total = 0.0;
    for rollout in rollouts {
        let mut w = 1.0;
        for t in rollout {
            total += w;
            match (&t.state, &t.action) {
                (Point::Discrete(s), Point::Discrete(a)) => *discrete.entry((*s, *a)).or_insert(0.0) += w,
                _ => continuous.push(OccupancyEntry { state: t.state.clone(), action: t.action.clone(), weight: w }),
            }
            w *= gamma;
        }
    }
    let mut entries: Vec<OccupancyEntry> = discrete
        .into_iter()
        .map(|((s, a), w)| OccupancyEntry { state: Point::Discrete(s), action: Point::Discrete(a), weight: w })
        .collect();
    entries.extend(continuous);
    entries.iter_mut().for_each(|e| e.weight /= total);
    Ok(OccupancyEstimate { entries, normalization: total })
}

pub(crate) fn policy_kernel(mdp: &TabularMdp, pi: &[f64]) -> DMatrix<f64> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut m = DMatrix::zeros(ns, ns);
    for s in 0..ns {
        if mdp.terminal[s] {
            continue;
        }
        for a in 0..na {
            let w = pi[s * na + a];
            if w == 0.0 {
                continue;
            }
            for (sn, p) in mdp.row(s, a).iter().enumerate() {
                m[(s, sn)] += w * p;
            }
        }
    }
    m
}

/// Exact `V^pi` per state by solving `(I - gamma P_pi) V = r_pi`.
pub fn policy_values(mdp: &TabularMdp, policy: &Policy, gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let pi = policy.table(ns)?;
    let p_pi = policy_kernel(mdp, &pi);
    let r_pi = DVector::from_fn(ns, |s, _| {
        if mdp.terminal[s] {
            0.0
        } else {
            (0..na).map(|a| pi[s * na + a] * mdp.r[s * na + a]).sum()
        }
    });
    let a = DMatrix::identity(ns, ns) - p_pi * gamma;
    let v = a
        .lu()
        .solve(&r_pi)
        .ok_or_else(|| Error::Singular("policy evaluation system".into()))?;
    Ok(v.iter().copied().collect())
}

/// `E_{s ~ rho}[V^pi(s)]`.
pub fn policy_value(mdp: &TabularMdp, policy: &Policy, gamma: f64) -> Result<f64> {
    let v = policy_values(mdp, policy, gamma)?;
    Ok(dot(&mdp.rho, &v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn one_state(r: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![r], vec![1.0]).unwrap()
    }

    /// 0 -> 1 -> 1 with reward (0, 1).
    fn chain() -> TabularMdp {
        TabularMdp::new(2, 1, vec![0.0, 1.0, 0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn geometric_rollout_length_half() {
        let env = one_state(1.0);
        let pi = Policy::uniform(1);
        let mut g = rng(1);
        let n = 100_000;
        let total: usize = (0..n)
            .map(|_| sample_discounted_rollout(&env, &pi, 0.5, &mut g).unwrap().len())
            .sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 2.0).abs() < 0.04, "{mean}");
    }

    #[test]
    fn geometric_rollout_length_099() {
        let env = one_state(1.0);
        let pi = Policy::uniform(1);
        let mut g = rng(2);
        let n = 10_000;
        let total: usize = (0..n)
            .map(|_| sample_discounted_rollout(&env, &pi, 0.99, &mut g).unwrap().len())
            .sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 100.0).abs() < 5.0, "{mean}");
    }

    #[test]
    fn terminal_dominates_rollout_length() {
        // 0 -> 1 -> 2 -> 3(terminal)
        let mut p = vec![0.0; 16];
        for s in 0..4 {
            p[s * 4 + (s + 1).min(3)] = 1.0;
        }
        let env = TabularMdp::with_terminal(
            4,
            1,
            p,
            vec![0.0; 4],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![false, false, false, true],
        )
        .unwrap();
        let mut g = rng(3);
        for _ in 0..1000 {
            let r = sample_discounted_rollout(&env, &Policy::uniform(1), 0.9, &mut g).unwrap();
            assert!(r.len() <= 3);
        }
    }

    #[test]
    fn occupancy_single_support() {
        let env = one_state(0.0);
        let mut g = rng(4);
        let r = sample_rollout(&env, &Policy::uniform(1), 50, &mut g).unwrap();
        let occ = estimate_occupancy(&[r], 0.5).unwrap();
        assert_eq!(occ.entries.len(), 1);
        assert!((occ.weight_of(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn occupancy_two_arms_symmetry() {
        let env = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0]).unwrap();
        let mut g = rng(5);
        let rollouts: Vec<_> = (0..100_000)
            .map(|_| sample_rollout(&env, &Policy::uniform(2), 1, &mut g).unwrap())
            .collect();
        let occ = estimate_occupancy(&rollouts, 1e-6).unwrap();
        assert!((occ.weight_of(0, 0) - 0.5).abs() < 0.01, "{:?}", occ);
        assert!((occ.weight_of(0, 1) - 0.5).abs() < 0.01);
    }

    #[test]
    fn occupancy_cyclic_chain_matches_geometric_series() {
        // 0 <-> 1 deterministic cycle from state 0. Independent closed form:
        // state 0 at even t, so weight(0) = sum gamma^{2k} / sum gamma^t
        // truncated at the horizon.
        let env = TabularMdp::new(2, 1, vec![0.0, 1.0, 1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]).unwrap();
        let gamma: f64 = 0.9;
        let horizon = 400;
        let mut g = rng(6);
        let r = sample_rollout(&env, &Policy::uniform(1), horizon, &mut g).unwrap();
        let occ = estimate_occupancy(&[r], gamma).unwrap();
        let expected0 = 1.0 / (1.0 + gamma); // (1/(1-g^2)) / (1/(1-g))
        assert!((occ.weight_of(0, 0) - expected0).abs() < 1e-3);
        assert!((occ.weight_of(1, 0) - (1.0 - expected0)).abs() < 1e-3);
    }

    #[test]
    fn occupancy_empty_errors() {
        assert!(matches!(estimate_occupancy(&[], 0.5), Err(Error::NoData)));
    }

    #[test]
    fn value_one_state() {
        let v = policy_value(&one_state(1.0), &Policy::uniform(1), 0.5).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn value_chain() {
        let v = policy_value(&chain(), &Policy::uniform(1), 0.9).unwrap();
        assert!((v - 9.0).abs() < 1e-10);
    }

    fn random_walk() -> TabularMdp {
        #[rustfmt::skip]
        let p = vec![
            0.5, 0.5, 0.0,
            0.25, 0.5, 0.25,
            0.0, 0.5, 0.5,
        ];
        TabularMdp::new(3, 1, p, vec![0.0, 0.5, 1.0], vec![1.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn value_matches_monte_carlo() {
        let mdp = random_walk();
        let gamma = 0.5;
        let exact = policy_value(&mdp, &Policy::uniform(1), gamma).unwrap();
        // 10^6 environment steps in 30-step episodes (gamma^30 ~ 1e-9).
        let mut g = rng(7);
        let episodes = 1_000_000 / 30;
        let mut acc = 0.0;
        for _ in 0..episodes {
            let r = sample_rollout(&mdp, &Policy::uniform(1), 30, &mut g).unwrap();
            let mut w = 1.0;
            for t in &r {
                acc += w * t.reward;
                w *= gamma;
            }
        }
        let mc = acc / episodes as f64;
        assert!((mc - exact).abs() < 1e-2, "mc {mc} exact {exact}");
    }

    #[test]
    fn value_is_bellman_fixed_point() {
        let mdp = random_walk();
        let gamma = 0.95;
        let v = policy_values(&mdp, &Policy::uniform(1), gamma).unwrap();
        for s in 0..3 {
            let backup: f64 = mdp.r[s] + gamma * dot(mdp.row(s, 0), &v);
            assert!((backup - v[s]).abs() < 1e-10);
        }
    }

    #[test]
    fn occupancy_reward_identity() {
        // E_d[r] = (1 - gamma) V^pi
        let mdp = random_walk();
        let gamma = 0.8;
        let pi = Policy::uniform(1);
        let v = policy_value(&mdp, &pi, gamma).unwrap();
        let mut g = rng(8);
        let rollouts: Vec<_> = (0..4000).map(|_| sample_rollout(&mdp, &pi, 120, &mut g).unwrap()).collect();
        let occ = estimate_occupancy(&rollouts, gamma).unwrap();
        let er: f64 = occ
            .entries
            .iter()
            .map(|e| e.weight * mdp.r[e.state.index().unwrap()])
            .sum();
        // per-episode discounted reward has sd <= 1/(1-gamma); 3 sigma bound on the mean
        let tol = 3.0 * (1.0 - gamma) * (1.0 / (1.0 - gamma)) / (4000f64).sqrt();
        assert!((er - (1.0 - gamma) * v).abs() < tol, "{er} vs {}", (1.0 - gamma) * v);
        let exact = OccupancyEstimate::exact(&mdp, &pi, gamma).unwrap();
        let er_exact: f64 = exact.entries.iter().map(|e| e.weight * mdp.r[e.state.index().unwrap()]).sum();
        assert!((er_exact - (1.0 - gamma) * v).abs() < 1e-12);
    }

    #[test]
    fn parse_round_trip_and_validation() {
        let mdp = random_walk();
        let parsed = TabularMdp::parse(&mdp.to_text()).unwrap();
        assert_eq!(parsed, mdp);
        let bad = "states 1\nactions 1\ntransitions\n0.5\nrewards\n0\ninitial\n1\n";
        match TabularMdp::parse(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(TabularMdp::parse("states 2\n").is_err());
    }

    #[test]
    fn random_policies_are_normalized() {
        use rand::Rng as _;
        let mut g = rng(9);
        for _ in 0..1000 {
            let (ns, na) = (g.random_range(1..6), g.random_range(1..6));
            let logits: Vec<f64> = (0..ns * na).map(|_| g.random_range(-30.0..30.0)).collect();
            let pi = Policy::TabularSoftmax { n_states: ns, n_actions: na, logits };
            for s in 0..ns {
                let p = pi.probs(&Point::Discrete(s), None).unwrap();
                assert!(p.iter().all(|x| *x >= 0.0));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
