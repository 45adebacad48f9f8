//! Exact maximum likelihood on small discrete conditional families, and the
//! NCE-versus-MLE consistency sweep.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::diffnet::{sigmoid, softplus};
use crate::env::{SyntheticConditional, SyntheticFamily};
use crate::mdp::{log_sum_exp, softmax};
use crate::nce::{binary_loss, ranking_loss, ContrastiveModel, NceBatch, Objective};
use crate::{derive_seed, rng, Error, Result, Rng};

/// Largest magnitude of any logit-like parameter.
pub const LOGIT_CAP: f64 = 20.0;

/// `table[u][x] = p(x|u)`.
pub type ConditionalTable = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub enum Parametrization {
    /// Row-stochastic tables; fitted in closed form.
    FreeTable,
    /// `log f(x,u) = theta[u][x]`.
    SoftmaxLogits,
    /// `log f(x,u) = c + l[u][x] - logsumexp_x l[u][.]`, so `Z_f(u) = e^c`.
    ConstantPartition,
    /// `log f(x,u) = theta[x] + log weights[u][x]`.
    VaryingPartition { weights: Vec<Vec<f64>> },
}

impl From<&SyntheticFamily> for Parametrization {
    fn from(f: &SyntheticFamily) -> Self {
        match f {
            SyntheticFamily::FreeTable => Parametrization::SoftmaxLogits,
            SyntheticFamily::ConstantPartition => Parametrization::ConstantPartition,
            SyntheticFamily::VaryingPartition { weights } => Parametrization::VaryingPartition { weights: weights.clone() },
        }
    }
}

/// Unnormalized log-linear conditional model over finite `x` and `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularLogLinear {
    pub x_cardinality: usize,
    pub u_cardinality: usize,
    pub parametrization: Parametrization,
    params: Vec<f64>,
}

impl TabularLogLinear {
    /// All-zero parameters.
    pub fn new(x_cardinality: usize, u_cardinality: usize, parametrization: Parametrization) -> Result<Self> {
        if x_cardinality == 0 || u_cardinality == 0 {
            return Err(Error::invalid("cardinalities must be positive"));
        }
        let n = match &parametrization {
            Parametrization::FreeTable | Parametrization::SoftmaxLogits => x_cardinality * u_cardinality,
            Parametrization::ConstantPartition => 1 + x_cardinality * u_cardinality,
            Parametrization::VaryingPartition { weights } => {
                if weights.len() != u_cardinality
                    || weights.iter().any(|w| w.len() != x_cardinality || w.iter().any(|v| !(*v > 0.0)))
                {
                    return Err(Error::invalid("partition weights must be positive and u x x shaped"));
                }
                x_cardinality
            }
        };
        Ok(TabularLogLinear { x_cardinality, u_cardinality, parametrization, params: vec![0.0; n] })
    }

    pub fn log_f(&self, x: usize, u: usize) -> f64 {
        let nx = self.x_cardinality;
        match &self.parametrization {
            Parametrization::FreeTable | Parametrization::SoftmaxLogits => self.params[u * nx + x],
            Parametrization::ConstantPartition => {
                let row = &self.params[1 + u * nx..1 + (u + 1) * nx];
                self.params[0] + row[x] - log_sum_exp(row)
            }
            Parametrization::VaryingPartition { weights } => self.params[x] + weights[u][x].ln(),
        }
    }

    /// Adds `w * d log f(x,u) / d params` into `grad`.
    fn add_grad(&self, x: usize, u: usize, w: f64, grad: &mut [f64]) {
        let nx = self.x_cardinality;
        match &self.parametrization {
            Parametrization::FreeTable | Parametrization::SoftmaxLogits => grad[u * nx + x] += w,
            Parametrization::ConstantPartition => {
                grad[0] += w;
                let off = 1 + u * nx;
                let p = softmax(&self.params[off..off + nx]);
                for (k, pk) in p.iter().enumerate() {
                    grad[off + k] -= w * pk;
                }
                grad[off + x] += w;
            }
            Parametrization::VaryingPartition { .. } => grad[x] += w,
        }
    }

    /// Normalized `p(x|u)`.
    pub fn conditional(&self) -> ConditionalTable {
        (0..self.u_cardinality)
            .map(|u| softmax(&(0..self.x_cardinality).map(|x| self.log_f(x, u)).collect::<Vec<_>>()))
            .collect()
    }

    /// `log Z_f(u)`.
    pub fn log_partition(&self, u: usize) -> f64 {
        log_sum_exp(&(0..self.x_cardinality).map(|x| self.log_f(x, u)).collect::<Vec<_>>())
    }

    /// Mean `-log p(x|u)` over `data` with its gradient.
    pub fn negative_log_likelihood(&self, data: &[(usize, usize)]) -> Result<(f64, Vec<f64>)> {
        if data.is_empty() {
            return Err(Error::NoData);
        }
        let n = data.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let logs: Vec<Vec<f64>> = (0..self.u_cardinality)
            .map(|u| (0..self.x_cardinality).map(|x| self.log_f(x, u)).collect())
            .collect();
        let probs: Vec<Vec<f64>> = logs.iter().map(|r| softmax(r)).collect();
        let lz: Vec<f64> = logs.iter().map(|r| log_sum_exp(r)).collect();
        let mut counts = vec![vec![0.0; self.x_cardinality]; self.u_cardinality];
        for &(x, u) in data {
            self.check(x, u)?;
            counts[u][x] += 1.0;
        }
        for u in 0..self.u_cardinality {
            let nu: f64 = counts[u].iter().sum();
            if nu == 0.0 {
                continue;
            }
            for x in 0..self.x_cardinality {
                let c = counts[u][x];
                if c > 0.0 {
                    loss -= c * (logs[u][x] - lz[u]) / n;
                }
                // d/dparams of -(c log f - c lz) with d lz = sum_x p_x d log f_x
                let w = (nu * probs[u][x] - c) / n;
                if w != 0.0 {
                    self.add_grad(x, u, w, &mut grad);
                }
            }
        }
        Ok((loss, grad))
    }

    fn check(&self, x: usize, u: usize) -> Result<()> {
        if x >= self.x_cardinality || u >= self.u_cardinality {
            return Err(Error::invalid(format!("datum ({x},{u}) outside {}x{}", self.x_cardinality, self.u_cardinality)));
        }
        Ok(())
    }
}

impl ContrastiveModel for TabularLogLinear {
    type Condition = usize;
    type Outcome = usize;
    type Tape = (Vec<usize>, Vec<Vec<usize>>);

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> Vec<f64> {
        self.params.clone()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn log_scores(&self, conditions: &[usize], outcomes: &[Vec<usize>]) -> Result<(Vec<Vec<f64>>, Self::Tape)> {
        let mut out = Vec::with_capacity(conditions.len());
        for (u, xs) in conditions.iter().zip(outcomes) {
            let mut row = Vec::with_capacity(xs.len());
            for x in xs {
                self.check(*x, *u)?;
                row.push(self.log_f(*x, *u));
            }
            out.push(row);
        }
        Ok((out, (conditions.to_vec(), outcomes.to_vec())))
    }

    fn log_scores_backward(&self, tape: &Self::Tape, upstream: &[Vec<f64>], grad: &mut [f64]) -> Result<()> {
        let (conds, outs) = tape;
        for ((u, xs), up) in conds.iter().zip(outs).zip(upstream) {
            for (x, w) in xs.iter().zip(up) {
                if *w != 0.0 {
                    self.add_grad(*x, *u, *w, grad);
                }
            }
        }
        Ok(())
    }
}

/// Result of [`minimize`].
#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    /// Norm of the projected gradient at `x`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Gradient-norm tolerance of [`minimize`].
pub const MINIMIZE_TOL: f64 = 1e-8;

/// Box-constrained damped Newton method. The Hessian is formed by central
/// differences of the analytic gradient; steps are projected onto
/// `[lower, upper]` and accepted by an Armijo backtracking search.
pub fn minimize<F>(f: F, x0: &[f64], lower: f64, upper: f64, max_iter: usize) -> Result<Minimum>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let clamp = |v: f64| v.clamp(lower, upper);
    let mut x: Vec<f64> = x0.iter().map(|v| clamp(*v)).collect();
    let (mut value, mut grad) = f(&x)?;
    let mut damping = 1e-10;
    let mut iterations = 0;
    let projected = |x: &[f64], g: &[f64]| -> Vec<bool> {
        (0..n).map(|i| !((x[i] <= lower && g[i] > 0.0) || (x[i] >= upper && g[i] < 0.0))).collect()
    };
    loop {
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("objective".into()));
        }
        let free = projected(&x, &grad);
        let idx: Vec<usize> = (0..n).filter(|i| free[*i]).collect();
        let grad_norm = idx.iter().map(|i| grad[*i] * grad[*i]).sum::<f64>().sqrt();
        if grad_norm < MINIMIZE_TOL || idx.is_empty() {
            return Ok(Minimum { x, value, grad_norm, iterations, converged: true });
        }
        if iterations >= max_iter {
            return Ok(Minimum { x, value, grad_norm, iterations, converged: false });
        }
        iterations += 1;
        let m = idx.len();
        let h = 1e-5;
        let mut hess = DMatrix::zeros(m, m);
        let mut probe = x.clone();
        for (col, &i) in idx.iter().enumerate() {
            let orig = probe[i];
            probe[i] = orig + h;
            let gp = f(&probe)?.1;
            probe[i] = orig - h;
            let gm = f(&probe)?.1;
            probe[i] = orig;
            for (row, &j) in idx.iter().enumerate() {
                hess[(row, col)] = (gp[j] - gm[j]) / (2.0 * h);
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let g_free = DVector::from_iterator(m, idx.iter().map(|i| grad[*i]));
        let mut accepted = false;
        while damping < 1e12 {
            let mut damped = hess.clone();
            for k in 0..m {
                damped[(k, k)] += damping;
            }
            let Some(chol) = damped.cholesky() else {
                damping = (damping * 10.0).max(1e-8);
                continue;
            };
            let step = chol.solve(&(-&g_free));
            let mut t = 1.0;
            for _ in 0..40 {
                let mut cand = x.clone();
                for (k, &i) in idx.iter().enumerate() {
                    cand[i] = clamp(x[i] + t * step[k]);
                }
                let decrease: f64 = idx.iter().map(|i| grad[*i] * (cand[*i] - x[*i])).sum();
                let (v, g) = f(&cand)?;
                if v.is_finite() && v <= value + 1e-4 * decrease && decrease <= 0.0 {
                    let stalled = cand == x;
                    x = cand;
                    value = v;
                    grad = g;
                    accepted = !stalled;
                    break;
                }
                t *= 0.5;
            }
            if accepted {
                damping = (damping * 0.1).max(1e-12);
                break;
            }
            damping = (damping * 10.0).max(1e-8);
        }
        if !accepted {
            let grad_norm = idx.iter().map(|i| grad[*i] * grad[*i]).sum::<f64>().sqrt();
            let converged = grad_norm < 1e-6;
            return Ok(Minimum { x, value, grad_norm, iterations, converged });
        }
    }
}

fn counts(data: &[(usize, usize)], nx: usize, nu: usize) -> Result<Vec<Vec<f64>>> {
    let mut c = vec![vec![0.0; nx]; nu];
    for &(x, u) in data {
        if x >= nx || u >= nu {
            return Err(Error::invalid(format!("datum ({x},{u}) outside {nx}x{nu}")));
        }
        c[u][x] += 1.0;
    }
    Ok(c)
}

/// Maximum-likelihood conditional table. Conditions never observed get
/// the uniform row.
pub fn exact_mle(
    data: &[(usize, usize)],
    x_cardinality: usize,
    u_cardinality: usize,
    family: &Parametrization,
) -> Result<ConditionalTable> {
    if data.is_empty() {
        return Err(Error::NoData);
    }
    let c = counts(data, x_cardinality, u_cardinality)?;
    let uniform = vec![1.0 / x_cardinality as f64; x_cardinality];
    match family {
        Parametrization::FreeTable => Ok(c
            .iter()
            .map(|row| {
                let n: f64 = row.iter().sum();
                if n == 0.0 {
                    uniform.clone()
                } else {
                    row.iter().map(|v| v / n).collect()
                }
            })
            .collect()),
        Parametrization::SoftmaxLogits => Ok(c
            .iter()
            .map(|row| {
                let top = row.iter().cloned().fold(0.0, f64::max);
                if top == 0.0 {
                    return uniform.clone();
                }
                // Capped optimum: observed logits as high as allowed,
                // unobserved ones at the floor.
                let logits: Vec<f64> = row
                    .iter()
                    .map(|v| if *v > 0.0 { (LOGIT_CAP + (v / top).ln()).max(-LOGIT_CAP) } else { -LOGIT_CAP })
                    .collect();
                softmax(&logits)
            })
            .collect()),
        Parametrization::ConstantPartition | Parametrization::VaryingPartition { .. } => {
            let mut model = TabularLogLinear::new(x_cardinality, u_cardinality, family.clone())?;
            let f = |p: &[f64]| {
                let mut m = model.clone();
                m.set_params(p)?;
                m.negative_log_likelihood(data)
            };
            let min = minimize(f, &model.params(), -LOGIT_CAP, LOGIT_CAP, 500)?;
            if !min.converged {
                warn!("MLE stopped with gradient norm {:.3e}", min.grad_norm);
            }
            model.set_params(&min.x)?;
            let mut table = model.conditional();
            for (u, row) in c.iter().enumerate() {
                if row.iter().sum::<f64>() == 0.0 {
                    table[u] = uniform.clone();
                }
            }
            Ok(table)
        }
    }
}

/// Mean `log p(x|u)` of `data` under `table`.
pub fn average_log_likelihood(table: &ConditionalTable, data: &[(usize, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::NoData);
    }
    let mut acc = 0.0;
    for &(x, u) in data {
        let p = table.get(u).and_then(|r| r.get(x)).ok_or_else(|| Error::invalid("datum outside table"))?;
        acc += p.ln();
    }
    Ok(acc / data.len() as f64)
}

/// `sum_u w(u) * 0.5 * sum_x |p(x|u) - q(x|u)|`.
pub fn tv_distance(p: &ConditionalTable, q: &ConditionalTable, u_weights: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.len() != u_weights.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), got: q.len().min(u_weights.len()) });
    }
    let mut tv = 0.0;
    for ((a, b), w) in p.iter().zip(q).zip(u_weights) {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
        }
        tv += w * 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(tv)
}

/// Empirical distribution of `u` in `data`.
pub fn u_weights(data: &[(usize, usize)], u_cardinality: usize) -> Vec<f64> {
    let mut w = vec![0.0; u_cardinality];
    for &(_, u) in data {
        w[u] += 1.0 / data.len() as f64;
    }
    w
}

/// One batch with `k` negatives per datum drawn uniformly over `x`.
pub fn fixed_negatives(data: &[(usize, usize)], x_cardinality: usize, k: usize, rng: &mut Rng) -> NceBatch<usize, usize> {
    use rand::Rng as _;
    let lq = -(x_cardinality as f64).ln();
    let mut batch = NceBatch { conditions: vec![], candidates: vec![], log_noise: vec![] };
    for &(x, u) in data {
        let mut c = Vec::with_capacity(k + 1);
        c.push(x);
        c.extend((0..k).map(|_| rng.random_range(0..x_cardinality)));
        batch.conditions.push(u);
        batch.candidates.push(c);
        batch.log_noise.push(vec![lq; k + 1]);
    }
    batch
}

/// A fixed batch summarized by candidate counts per outcome. Exact for table
/// models whenever the noise log-density depends on the outcome only, and
/// makes each evaluation cost `O(n |X|)` instead of `O(n K)`.
struct CountedBatch {
    n: f64,
    log_k: f64,
    /// `(u, x0, [(x, count incl. positive, negatives only, log q)])`
    rows: Vec<(usize, usize, Vec<(usize, f64, f64, f64)>)>,
}

impl CountedBatch {
    fn new(batch: &NceBatch<usize, usize>) -> Result<Option<Self>> {
        batch.validate()?;
        let mut rows = Vec::with_capacity(batch.len());
        for ((u, cands), lq) in batch.conditions.iter().zip(&batch.candidates).zip(&batch.log_noise) {
            let mut groups: Vec<(usize, f64, f64, f64)> = Vec::new();
            for (j, (x, q)) in cands.iter().zip(lq).enumerate() {
                let neg = if j == 0 { 0.0 } else { 1.0 };
                match groups.iter_mut().find(|g| g.0 == *x) {
                    Some(g) if g.3 == *q => {
                        g.1 += 1.0;
                        g.2 += neg;
                    }
                    Some(_) => return Ok(None),
                    None => groups.push((*x, 1.0, neg, *q)),
                }
            }
            rows.push((*u, cands[0], groups));
        }
        Ok(Some(CountedBatch { n: batch.len() as f64, log_k: (batch.k() as f64).ln(), rows }))
    }

    fn ranking(&self, model: &TabularLogLinear) -> Result<(f64, Vec<f64>)> {
        let mut loss = 0.0;
        let mut grad = vec![0.0; model.num_params()];
        for (u, x0, groups) in &self.rows {
            let l: Vec<f64> = groups.iter().map(|(x, c, _, q)| model.log_f(*x, *u) - q + c.ln()).collect();
            let lse = log_sum_exp(&l);
            let pos = groups.iter().find(|g| g.0 == *x0).expect("positive is a candidate");
            loss += (lse - (model.log_f(*x0, *u) - pos.3)) / self.n;
            for ((x, ..), li) in groups.iter().zip(&l) {
                model.add_grad(*x, *u, (li - lse).exp() / self.n, &mut grad);
            }
            model.add_grad(*x0, *u, -1.0 / self.n, &mut grad);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("ranking NCE loss".into()));
        }
        Ok((loss, grad))
    }

    fn binary(&self, model: &TabularLogLinear, gamma: f64) -> Result<(f64, Vec<f64>, f64)> {
        let shift = gamma + self.log_k;
        let mut loss = 0.0;
        let mut grad = vec![0.0; model.num_params()];
        let mut grad_gamma = 0.0;
        for (u, x0, groups) in &self.rows {
            for (x, _, neg, q) in groups {
                let t = model.log_f(*x, *u) - q - shift;
                let mut d = 0.0;
                if x == x0 {
                    loss += softplus(-t) / self.n;
                    d -= sigmoid(-t) / self.n;
                }
                if *neg > 0.0 {
                    loss += neg * softplus(t) / self.n;
                    d += neg * sigmoid(t) / self.n;
                }
                model.add_grad(*x, *u, d, &mut grad);
                grad_gamma -= d;
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("binary NCE loss".into()));
        }
        Ok((loss, grad, grad_gamma))
    }
}

fn ranking_eval(model: &TabularLogLinear, batch: &NceBatch<usize, usize>, counted: Option<&CountedBatch>) -> Result<(f64, Vec<f64>)> {
    match counted {
        Some(c) => c.ranking(model),
        None => ranking_loss(model, batch).map(|e| (e.loss, e.grad)),
    }
}

fn binary_eval(
    model: &TabularLogLinear,
    batch: &NceBatch<usize, usize>,
    gamma: f64,
    counted: Option<&CountedBatch>,
) -> Result<(f64, Vec<f64>, f64)> {
    match counted {
        Some(c) => c.binary(model, gamma),
        None => binary_loss(model, batch, gamma).map(|e| (e.loss, e.grad, e.grad_gamma)),
    }
}

/// Bound on the binary objective's log-partition parameter during fits.
const GAMMA_CAP: f64 = 60.0;

/// Minimizes the NCE objective over the model parameters (and `gamma` for
/// the binary objective) on a fixed batch. Returns the fitted `gamma`.
pub fn fit_nce(
    model: &mut TabularLogLinear,
    batch: &NceBatch<usize, usize>,
    objective: Objective,
) -> Result<(f64, Minimum)> {
    let np = model.num_params();
    let counted = CountedBatch::new(batch)?;
    let min = match objective {
        Objective::Ranking => {
            let f = |p: &[f64]| {
                let mut m = model.clone();
                m.set_params(p)?;
                ranking_eval(&m, batch, counted.as_ref())
            };
            minimize(f, &model.params(), -LOGIT_CAP, LOGIT_CAP, 500)?
        }
        Objective::Binary => {
            let f = |p: &[f64]| {
                let mut m = model.clone();
                m.set_params(&p[..np])?;
                let (loss, mut g, gg) = binary_eval(&m, batch, p[np], counted.as_ref())?;
                g.push(gg);
                Ok((loss, g))
            };
            let mut x0 = model.params();
            x0.push(0.0);
            // gamma shares the logit box
            minimize(f, &x0, -LOGIT_CAP, LOGIT_CAP, 500)?
        }
    };
    model.set_params(&min.x[..np])?;
    let gamma = if objective == Objective::Binary { min.x[np] } else { 0.0 };
    Ok((gamma, min))
}

/// Binary-objective optimum over `gamma` alone, with the model held fixed.
pub fn binary_gamma_optimum(model: &TabularLogLinear, batch: &NceBatch<usize, usize>) -> Result<f64> {
    let counted = CountedBatch::new(batch)?;
    let f = |p: &[f64]| {
        let (loss, _, gg) = binary_eval(model, batch, p[0], counted.as_ref())?;
        Ok((loss, vec![gg]))
    };
    let min = minimize(f, &[0.0], -GAMMA_CAP, GAMMA_CAP, 200)?;
    Ok(min.x[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyRow {
    pub seed: u64,
    pub k: usize,
    pub objective: Objective,
    /// `NaN` when the fit failed.
    pub tv: f64,
    pub nce_loglik: f64,
    pub mle_loglik: f64,
}

/// For every seed: draw one dataset, fit the exact MLE once, then fit NCE
/// for each `K` on that same dataset with fixed uniform negatives and
/// record `TV(NCE, MLE)` weighted by the empirical `u` distribution.
pub fn consistency_experiment(
    env: &SyntheticConditional,
    n: usize,
    k_list: &[usize],
    objective: Objective,
    seeds: &[u64],
) -> Result<Vec<ConsistencyRow>> {
    if k_list.windows(2).any(|w| w[0] >= w[1]) || k_list.contains(&0) {
        return Err(Error::invalid("K list must be positive and strictly increasing"));
    }
    let family = Parametrization::from(&env.family);
    let u_dist = vec![1.0 / env.u_cardinality as f64; env.u_cardinality];
    let mut rows = Vec::new();
    for &seed in seeds {
        let data = env.sample(n, &u_dist, &mut rng(derive_seed(seed, 0)))?;
        let mle_family = match family {
            Parametrization::SoftmaxLogits => Parametrization::FreeTable,
            ref f => f.clone(),
        };
        let mle = exact_mle(&data, env.x_cardinality, env.u_cardinality, &mle_family)?;
        let mle_loglik = average_log_likelihood(&mle, &data)?;
        let w = u_weights(&data, env.u_cardinality);
        for &k in k_list {
            let batch = fixed_negatives(&data, env.x_cardinality, k, &mut rng(derive_seed(seed, k as u64)));
            let mut model = TabularLogLinear::new(env.x_cardinality, env.u_cardinality, family.clone())?;
            let (tv, nce_loglik) = match fit_nce(&mut model, &batch, objective) {
                Ok(_) => {
                    let table = model.conditional();
                    (tv_distance(&table, &mle, &w)?, average_log_likelihood(&table, &data)?)
                }
                Err(e) => {
                    warn!("seed {seed} K {k}: NCE fit failed: {e}");
                    (f64::NAN, f64::NAN)
                }
            };
            rows.push(ConsistencyRow { seed, k, objective, tv, nce_loglik, mle_loglik });
        }
    }
    Ok(rows)
}

/// Seed-averaged TV per `K`, skipping failed cells.
pub fn mean_tv_by_k(rows: &[ConsistencyRow]) -> Vec<(usize, f64)> {
    let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    ks.into_iter()
        .map(|k| {
            let v: Vec<f64> = rows.iter().filter(|r| r.k == k && r.tv.is_finite()).map(|r| r.tv).collect();
            (k, if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 })
        })
        .collect()
}

pub fn write_consistency_csv<W: Write>(rows: &[ConsistencyRow], mut out: W) -> Result<()> {
    writeln!(out, "seed,K,objective,tv,nce_loglik,mle_loglik")?;
    for r in rows {
        let obj = match r.objective {
            Objective::Binary => "binary",
            Objective::Ranking => "ranking",
        };
        writeln!(out, "{},{},{},{:.16e},{:.16e},{:.16e}", r.seed, r.k, obj, r.tv, r.nce_loglik, r.mle_loglik)?;
    }
    Ok(())
}
