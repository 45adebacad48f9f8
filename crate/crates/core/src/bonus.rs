//! Feature covariance with an incrementally maintained inverse, and the
//! clipped elliptical bonus `min(alpha * sqrt(phi' Sigma^-1 phi), 2)`.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::ensure_finite;
use crate::{Error, Result};

/// Upper clip of the bonus.
pub const BONUS_CLIP: f64 = 2.0;

/// Rank-one updates between full re-factorizations of the inverse.
pub const REFACTOR_EVERY: usize = 1000;

/// `Sigma = sum phi phi' + lambda I` and its inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceState {
    sigma: DMatrix<f64>,
    inverse: DMatrix<f64>,
    lambda: f64,
    count: usize,
    since_refactor: usize,
}

impl CovarianceState {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("lambda must be positive"));
        }
        Ok(CovarianceState {
            sigma: DMatrix::identity(dim, dim) * lambda,
            inverse: DMatrix::identity(dim, dim) / lambda,
            lambda,
            count: 0,
            since_refactor: 0,
        })
    }

    pub fn from_features<'a, I>(dim: usize, lambda: f64, features: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut s = Self::new(dim, lambda)?;
        for f in features {
            s.rank_one_update(f)?;
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    /// Adds `phi phi'` and updates the inverse by Sherman-Morrison.
    pub fn rank_one_update(&mut self, phi: &[f64]) -> Result<()> {
        if phi.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: phi.len() });
        }
        ensure_finite(phi, "feature")?;
        self.count += 1;
        if phi.iter().all(|v| *v == 0.0) {
            return Ok(());
        }
        let v = DVector::from_column_slice(phi);
        self.sigma.ger(1.0, &v, &v, 1.0);
        let u = &self.inverse * &v;
        let denom = 1.0 + v.dot(&u);
        self.inverse.ger(-1.0 / denom, &u, &u, 1.0);
        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_EVERY {
            self.refactor()?;
        }
        Ok(())
    }

    /// Recomputes the inverse from `sigma` by Cholesky.
    pub fn refactor(&mut self) -> Result<()> {
        self.sigma = (&self.sigma + self.sigma.transpose()) * 0.5;
        let chol = self
            .sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("covariance lost positive definiteness".into()))?;
        self.inverse = chol.inverse();
        self.since_refactor = 0;
        Ok(())
    }

    /// `phi' Sigma^-1 phi`
    pub fn quadratic_form(&self, phi: &[f64]) -> Result<f64> {
        if phi.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: phi.len() });
        }
        let v = DVector::from_column_slice(phi);
        Ok(v.dot(&(&self.inverse * &v)))
    }

    /// Frobenius distance between the maintained inverse and a fresh one.
    pub fn inverse_drift(&self) -> Result<f64> {
        let fresh = self
            .sigma
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("covariance".into()))?;
        Ok((&fresh - &self.inverse).norm())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BonusMode {
    /// Added to the reward (online).
    Bonus,
    /// Subtracted from the reward by the caller (offline).
    Penalty,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BonusConfig {
    pub alpha: f64,
    pub mode: BonusMode,
}

impl BonusConfig {
    pub fn new(alpha: f64, mode: BonusMode) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::invalid("alpha must be finite and nonnegative"));
        }
        Ok(BonusConfig { alpha, mode })
    }

    /// Reward adjustment with its sign: `+b` for bonus, `-b` for penalty.
    pub fn signed(&self, magnitude: f64) -> f64 {
        match self.mode {
            BonusMode::Bonus => magnitude,
            BonusMode::Penalty => -magnitude,
        }
    }
}

/// `min(alpha sqrt(phi' Sigma^-1 phi), 2)`; the magnitude in both modes.
pub fn bonus(state: &CovarianceState, phi: &[f64], config: &BonusConfig) -> Result<f64> {
    let mut q = state.quadratic_form(phi)?;
    if q < 0.0 {
        warn!("negative quadratic form {q:e}; clamping to 0");
        q = 0.0;
    }
    if config.alpha == 0.0 {
        return Ok(0.0);
    }
    Ok((config.alpha * q.sqrt()).min(BONUS_CLIP))
}

/// Entry-wise bonus for a list of features, e.g. every `(s, a)` of a
/// discrete MDP in `s * |A| + a` order.
pub fn bonus_table(state: &CovarianceState, features: &[Vec<f64>], config: &BonusConfig) -> Result<Vec<f64>> {
    features.iter().map(|f| bonus(state, f, config)).collect()
}
