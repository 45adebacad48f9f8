//! Small feedforward networks with explicit parameter vectors, hand-written
//! reverse-mode gradients, finite-difference checks and first-order
//! optimizers.

use rand::Rng as _;

use crate::error::ensure_finite;
use crate::wire::{put_f64, put_u32, put_u64, Reader};
use crate::{Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
    /// `x -> exp(-x^2)`
    Gauss,
    Softplus,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
            Activation::Sigmoid => 3,
            Activation::Gauss => 4,
            Activation::Softplus => 5,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Activation::Identity,
            1 => Activation::Tanh,
            2 => Activation::Relu,
            3 => Activation::Sigmoid,
            4 => Activation::Gauss,
            5 => Activation::Softplus,
            t => return Err(Error::Format(format!("unknown activation tag {t}"))),
        })
    }

    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Gauss => (-z * z).exp(),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative at pre-activation `z` with output `y`.
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Gauss => -2.0 * z * y,
            Activation::Softplus => sigmoid(z),
        }
    }

    /// Closed range of the output, if bounded.
    pub fn range(self) -> Option<(f64, f64)> {
        match self {
            Activation::Tanh => Some((-1.0, 1.0)),
            Activation::Sigmoid | Activation::Gauss => Some((0.0, 1.0)),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => Activation::Identity,
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            "sigmoid" => Activation::Sigmoid,
            "gauss" => Activation::Gauss,
            "softplus" => Activation::Softplus,
            _ => return Err(Error::invalid(format!("unknown activation {s:?}"))),
        })
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Fully connected network; hidden layers share one activation.
///
/// Parameters are stored layer by layer as a row-major `out x in` weight
/// block followed by `out` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: Vec<f64>,
}

/// Per-layer pre- and post-activations from a forward pass.
#[derive(Clone, Debug)]
pub struct Cache {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("at least the input")
    }
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl Mlp {
    /// Zero-initialized network.
    pub fn zeros(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|d| *d == 0) {
            return Err(Error::invalid("an MLP needs at least two positive layer widths"));
        }
        Ok(Mlp { dims: dims.to_vec(), hidden, output, params: vec![0.0; param_count(dims)] })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden, output)?;
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-limit..limit);
            }
            offset += (fan_in + 1) * fan_out;
        }
        Ok(net)
    }

    pub fn from_params(dims: &[usize], hidden: Activation, output: Activation, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden, output)?;
        net.set_params(&params)?;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.post.pop().expect("output layer"))
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<Cache> {
        if input.len() != self.dims[0] {
            return Err(Error::DimensionMismatch { expected: self.dims[0], got: input.len() });
        }
        let n_layers = self.dims.len() - 1;
        let mut pre = Vec::with_capacity(n_layers);
        let mut post = Vec::with_capacity(n_layers + 1);
        post.push(input.to_vec());
        let mut offset = 0;
        for (l, w) in self.dims.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let bias = &self.params[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            let x = &post[l];
            let z: Vec<f64> = match sparse_support(x) {
                // one-hot style inputs: skipping exact zeros leaves every sum unchanged
                Some(nz) => (0..n_out)
                    .map(|o| bias[o] + nz.iter().map(|&i| weights[o * n_in + i] * x[i]).sum::<f64>())
                    .collect(),
                None => (0..n_out)
                    .map(|o| bias[o] + weights[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                    .collect(),
            };
            let act = if l + 1 == n_layers { self.output } else { self.hidden };
            post.push(z.iter().map(|v| act.apply(*v)).collect());
            pre.push(z);
            offset += (n_in + 1) * n_out;
        }
        Ok(Cache { pre, post })
    }

    /// Adds the gradient of `<upstream, output>` w.r.t. the parameters into
    /// `grad` and returns the gradient w.r.t. the input.
    pub fn backward_cached(&self, cache: &Cache, upstream: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        Ok(self.backward_impl(cache, upstream, grad, true)?.expect("input gradient requested"))
    }

    /// Like [`Mlp::backward_cached`] without the input gradient.
    pub fn backward_params(&self, cache: &Cache, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        self.backward_impl(cache, upstream, grad, false).map(|_| ())
    }

    fn backward_impl(&self, cache: &Cache, upstream: &[f64], grad: &mut [f64], want_input: bool) -> Result<Option<Vec<f64>>> {
        let n_layers = self.dims.len() - 1;
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch { expected: self.output_dim(), got: upstream.len() });
        }
        if grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: grad.len() });
        }
        let mut offsets = Vec::with_capacity(n_layers);
        let mut acc = 0;
        for w in self.dims.windows(2) {
            offsets.push(acc);
            acc += (w[0] + 1) * w[1];
        }
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(cache.pre[n_layers - 1].iter().zip(&cache.post[n_layers]))
            .map(|(u, (z, y))| u * self.output.derivative(*z, *y))
            .collect();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let x = &cache.post[l];
            let nz = sparse_support(x);
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    match &nz {
                        Some(nz) => nz.iter().for_each(|&i| row[i] += d * x[i]),
                        None => row.iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi),
                    }
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l == 0 && !want_input {
                return Ok(None);
            }
            let weights = &self.params[off..off + n_in * n_out];
            let mut back = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    back.iter_mut()
                        .zip(&weights[o * n_in..(o + 1) * n_in])
                        .for_each(|(b, w)| *b += w * d);
                }
            }
            if l == 0 {
                return Ok(Some(back));
            }
            delta = back
                .iter()
                .zip(cache.pre[l - 1].iter().zip(&cache.post[l]))
                .map(|(b, (z, y))| b * self.hidden.derivative(*z, *y))
                .collect();
        }
        unreachable!("loop returns at the input layer")
    }

    /// Gradient of `<upstream, forward(input)>` w.r.t. (params, input).
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let cache = self.forward_cached(input)?;
        let mut grad = vec![0.0; self.params.len()];
        let gin = self.backward_cached(&cache, upstream, &mut grad)?;
        Ok((grad, gin))
    }

    /// Little-endian binary encoding, see `docs/formats.md`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.params.len());
        out.extend_from_slice(MLP_MAGIC);
        put_u32(&mut out, 1);
        put_u32(&mut out, self.dims.len() as u32);
        for d in &self.dims {
            put_u32(&mut out, *d as u32);
        }
        out.extend_from_slice(&[self.hidden.tag(), self.output.tag(), 0, 0]);
        put_u64(&mut out, self.params.len() as u64);
        for p in &self.params {
            put_f64(&mut out, *p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let net = Self::read_wire(&mut r)?;
        r.finish()?;
        Ok(net)
    }

    pub(crate) fn read_wire(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_magic(MLP_MAGIC)?;
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported MLP version {version}")));
        }
        let n_dims = r.u32()? as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(Error::Format(format!("layer count {n_dims} out of range")));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            let d = r.u32()? as usize;
            if d == 0 || d > 1 << 20 {
                return Err(Error::Format(format!("layer width {d} out of range")));
            }
            dims.push(d);
        }
        let hidden = Activation::from_tag(r.u8()?)?;
        let output = Activation::from_tag(r.u8()?)?;
        if r.take(2)? != [0, 0] {
            return Err(Error::Format("reserved bytes must be zero".into()));
        }
        let n_params = r.u64()?;
        let expected = dims
            .windows(2)
            .try_fold(0u64, |acc, w| {
                (w[0] as u64 + 1).checked_mul(w[1] as u64).and_then(|c| acc.checked_add(c))
            })
            .ok_or_else(|| Error::Format("parameter count overflow".into()))?;
        if n_params != expected {
            return Err(Error::Format(format!("parameter count {n_params}, layout needs {expected}")));
        }
        if n_params > (r.remaining() / 8) as u64 {
            return Err(Error::Format("parameter block truncated".into()));
        }
        let params = r.f64s(n_params as usize)?;
        Ok(Mlp { dims, hidden, output, params })
    }
}

/// Indices of the nonzero entries when at most a quarter are nonzero.
fn sparse_support(x: &[f64]) -> Option<Vec<usize>> {
    if x.len() < 16 {
        return None;
    }
    let mut nz = Vec::new();
    for (i, v) in x.iter().enumerate() {
        if *v != 0.0 {
            if 4 * (nz.len() + 1) > x.len() {
                return None;
            }
            nz.push(i);
        }
    }
    Some(nz)
}

const MLP_MAGIC: &[u8; 8] = b"CTRLMLP\0";

/// Finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradientReport {
    /// Checked coordinates.
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_i |a_i - n_i| / (|a_i| + |n_i| + 1e-8)`.
    pub max_rel_error: f64,
}

pub const FD_STEP: f64 = 1e-5;
const MAX_CHECKED: usize = 200;

/// Central differences with step 1e-5 on at most 200 evenly spaced
/// coordinates. `loss` returns the value and its analytic gradient.
pub fn check_gradient<F>(loss: F, params: &[f64]) -> Result<GradientReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (value, grad) = loss(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if grad.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), got: grad.len() });
    }
    let n = params.len();
    let indices: Vec<usize> = if n <= MAX_CHECKED {
        (0..n).collect()
    } else {
        (0..MAX_CHECKED).map(|k| k * n / MAX_CHECKED).collect()
    };
    let mut probe = params.to_vec();
    let mut analytic = Vec::with_capacity(indices.len());
    let mut numeric = Vec::with_capacity(indices.len());
    let mut max_rel_error: f64 = 0.0;
    for &i in &indices {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let plus = loss(&probe)?.0;
        probe[i] = orig - FD_STEP;
        let minus = loss(&probe)?.0;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let num = (plus - minus) / (2.0 * FD_STEP);
        let a = grad[i];
        max_rel_error = max_rel_error.max((a - num).abs() / (a.abs() + num.abs() + 1e-8));
        analytic.push(a);
        numeric.push(num);
    }
    Ok(GradientReport { indices, analytic, numeric, max_rel_error })
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerState { kind: OptimizerKind::Sgd, learning_rate, m: vec![], v: vec![], t: 0 }
    }

    /// Adam(0.9, 0.999, 1e-8).
    pub fn adam(learning_rate: f64) -> Self {
        Self::adam_with(learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn adam_with(learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        OptimizerState { kind: OptimizerKind::Adam { beta1, beta2, eps }, learning_rate, m: vec![], v: vec![], t: 0 }
    }

    /// Same kind and learning rate with cleared moments.
    pub fn fresh(&self) -> Self {
        OptimizerState { kind: self.kind.clone(), learning_rate: self.learning_rate, m: vec![], v: vec![], t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::DimensionMismatch { expected: params.len(), got: grad.len() });
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { what: "optimizer gradient".into(), step: self.t as usize });
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                params.iter_mut().zip(grad).for_each(|(p, g)| *p -= self.learning_rate * g);
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                }
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        ensure_finite(params, "parameters after optimizer step")
    }
}
