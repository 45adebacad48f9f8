//! TOML experiment configs. Every section rejects unknown keys; omitted
//! keys take the defaults below, and the fully resolved config is written
//! next to each run's artifacts.

use std::path::PathBuf;

use ctrl_core::diffnet::Activation;
use ctrl_core::driver::{FeaturePlannerConfig, OnlineConfig, PlannerMode};
use ctrl_core::env::RewardMode;
use ctrl_core::lowrank::LowRankConfig;
use ctrl_core::nce::{NceConfig, Objective};
use ctrl_core::planner::{EntropyConfig, TARGET_TAU};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    /// Built-in four-room grid, or the ASCII `layout` file.
    Grid,
    /// Continuous four-room maze.
    Maze,
    /// Tabular MDP from the text file `mdp`.
    Tabular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reward {
    Sparse,
    Dense,
}

impl From<Reward> for RewardMode {
    fn from(r: Reward) -> Self {
        match r {
            Reward::Sparse => RewardMode::Sparse,
            Reward::Dense => RewardMode::Dense,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    #[serde(default = "reward_default")]
    pub reward: Reward,
    /// Grid slip probability.
    #[serde(default)]
    pub slip: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mdp: Option<PathBuf>,
    /// Maze episodes start uniformly at random instead of at the fixed start.
    #[serde(default)]
    pub random_start: bool,
}

fn reward_default() -> Reward {
    Reward::Sparse
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationName {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
    Gauss,
    Softplus,
}

impl From<ActivationName> for Activation {
    fn from(a: ActivationName) -> Self {
        match a {
            ActivationName::Identity => Activation::Identity,
            ActivationName::Tanh => Activation::Tanh,
            ActivationName::Relu => Activation::Relu,
            ActivationName::Sigmoid => Activation::Sigmoid,
            ActivationName::Gauss => Activation::Gauss,
            ActivationName::Softplus => Activation::Softplus,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: ActivationName,
    pub mu_output: ActivationName,
    pub bounded_phi: bool,
    pub temperature: f64,
    /// Replace the learned model by the exact factorization of a discrete
    /// environment (set `driver.repr_steps = 0` to keep it frozen).
    pub true_model: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            feature_dim: 32,
            hidden: vec![64, 64],
            activation: ActivationName::Tanh,
            mu_output: ActivationName::Tanh,
            bounded_phi: true,
            temperature: 0.2,
            true_model: false,
        }
    }
}

impl ModelSection {
    pub fn to_core(&self) -> LowRankConfig {
        LowRankConfig {
            feature_dim: self.feature_dim,
            hidden: self.hidden.clone(),
            activation: self.activation.into(),
            mu_output: self.mu_output.into(),
            bounded_phi: self.bounded_phi,
            temperature: self.temperature,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveName {
    Binary,
    Ranking,
}

impl From<ObjectiveName> for Objective {
    fn from(o: ObjectiveName) -> Self {
        match o {
            ObjectiveName::Binary => Objective::Binary,
            ObjectiveName::Ranking => Objective::Ranking,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NceSection {
    pub objective: ObjectiveName,
    pub k: usize,
    pub gamma_param: f64,
    pub temperature: f64,
    pub marginal_weight: f64,
    pub mu_norm_weight: f64,
    pub batch_size: usize,
    pub regularizer_k: usize,
}

impl Default for NceSection {
    fn default() -> Self {
        let d = NceConfig::default();
        NceSection {
            objective: ObjectiveName::Ranking,
            k: d.k,
            gamma_param: d.gamma_param,
            temperature: d.temperature,
            marginal_weight: d.marginal_weight,
            mu_norm_weight: d.mu_norm_weight,
            batch_size: d.batch_size,
            regularizer_k: d.regularizer_k,
        }
    }
}

impl NceSection {
    pub fn to_core(&self) -> NceConfig {
        NceConfig {
            objective: self.objective.into(),
            k: self.k,
            gamma_param: self.gamma_param,
            temperature: self.temperature,
            marginal_weight: self.marginal_weight,
            mu_norm_weight: self.mu_norm_weight,
            batch_size: self.batch_size,
            regularizer_k: self.regularizer_k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    Tabular,
    Features,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSection {
    pub kind: PlannerKind,
    pub hidden: usize,
    pub sigma: ActivationName,
    pub q_learning_rate: f64,
    pub policy_learning_rate: f64,
    pub batch_size: usize,
    pub entropy_weight: f64,
    pub entropy_enabled: bool,
    pub tau: f64,
    pub policy_temperature: f64,
}

impl Default for PlannerSection {
    fn default() -> Self {
        let f = FeaturePlannerConfig::default();
        PlannerSection {
            kind: PlannerKind::Tabular,
            hidden: f.hidden,
            sigma: ActivationName::Tanh,
            q_learning_rate: f.q_learning_rate,
            policy_learning_rate: f.policy_learning_rate,
            batch_size: f.batch_size,
            entropy_weight: f.entropy.weight,
            entropy_enabled: f.entropy.enabled,
            tau: TARGET_TAU,
            policy_temperature: f.policy_temperature,
        }
    }
}

impl PlannerSection {
    pub fn to_core(&self) -> PlannerMode {
        match self.kind {
            PlannerKind::Tabular => PlannerMode::Tabular,
            PlannerKind::Features => PlannerMode::Features(FeaturePlannerConfig {
                hidden: self.hidden,
                sigma: self.sigma.into(),
                q_learning_rate: self.q_learning_rate,
                policy_learning_rate: self.policy_learning_rate,
                batch_size: self.batch_size,
                entropy: EntropyConfig { weight: self.entropy_weight, enabled: self.entropy_enabled },
                tau: self.tau,
                policy_temperature: self.policy_temperature,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BonusSection {
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub lambda: f64,
}

impl Default for BonusSection {
    fn default() -> Self {
        BonusSection { alpha: 1.0, lambda: 1.0 }
    }
}

fn one() -> f64 {
    1.0
}

/// Online loop settings; `gamma` has no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSection {
    pub gamma: f64,
    #[serde(default = "episodes_default")]
    pub episodes: usize,
    #[serde(default = "collect_default")]
    pub collect_per_epoch: usize,
    #[serde(default = "period_default")]
    pub repr_update_period: usize,
    #[serde(default = "repr_steps_default")]
    pub repr_steps: usize,
    #[serde(default = "model_lr_default")]
    pub model_learning_rate: f64,
    #[serde(default = "planner_steps_default")]
    pub planner_steps_per_epoch: usize,
    #[serde(default = "epsilon_default")]
    pub epsilon_mix: f64,
    #[serde(default = "capacity_default")]
    pub buffer_capacity: usize,
}

fn episodes_default() -> usize {
    OnlineConfig::default().episodes
}
fn collect_default() -> usize {
    OnlineConfig::default().collect_per_epoch
}
fn period_default() -> usize {
    OnlineConfig::default().repr_update_period
}
fn repr_steps_default() -> usize {
    OnlineConfig::default().repr_steps
}
fn model_lr_default() -> f64 {
    OnlineConfig::default().model_learning_rate
}
fn planner_steps_default() -> usize {
    OnlineConfig::default().planner_steps_per_epoch
}
fn epsilon_default() -> f64 {
    OnlineConfig::default().epsilon_mix
}
fn capacity_default() -> usize {
    OnlineConfig::default().buffer_capacity
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineFile {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub nce: NceSection,
    #[serde(default)]
    pub bonus: BonusSection,
    #[serde(default)]
    pub planner: PlannerSection,
    pub driver: DriverSection,
}

impl OnlineFile {
    pub fn to_core(&self) -> OnlineConfig {
        let d = &self.driver;
        OnlineConfig {
            episodes: d.episodes,
            collect_per_epoch: d.collect_per_epoch,
            repr_update_period: d.repr_update_period,
            repr_steps: d.repr_steps,
            model_learning_rate: d.model_learning_rate,
            planner_steps_per_epoch: d.planner_steps_per_epoch,
            epsilon_mix: d.epsilon_mix,
            alpha: self.bonus.alpha,
            lambda: self.bonus.lambda,
            gamma: d.gamma,
            buffer_capacity: d.buffer_capacity,
            planner: self.planner.to_core(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorName {
    /// Laplace-smoothed action counts.
    Counts,
    Uniform,
}

/// Offline loop settings; `gamma` has no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineSection {
    pub gamma: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "behavior_default")]
    pub behavior: BehaviorName,
    #[serde(default = "reg_default")]
    pub reg_weight: f64,
    #[serde(default = "offline_repr_default")]
    pub repr_steps: usize,
    #[serde(default = "model_lr_default")]
    pub model_learning_rate: f64,
    #[serde(default = "policy_steps_default")]
    pub policy_steps: usize,
    #[serde(default = "policy_lr_default")]
    pub policy_learning_rate: f64,
    #[serde(default = "ridge_default")]
    pub coverage_ridge: f64,
}

fn behavior_default() -> BehaviorName {
    BehaviorName::Counts
}
fn reg_default() -> f64 {
    0.1
}
fn offline_repr_default() -> usize {
    1000
}
fn policy_steps_default() -> usize {
    500
}
fn policy_lr_default() -> f64 {
    0.1
}
fn ridge_default() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineFile {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Dataset file written by `gen-dataset`.
    pub dataset: PathBuf,
    /// Needed only for `model.true_model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<EnvSection>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub nce: NceSection,
    #[serde(default)]
    pub planner: PlannerSection,
    pub offline: OfflineSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyName {
    /// Random unconstrained table.
    Free,
    /// Random table under the constant-partition family.
    Constant,
    /// Fixed member of the varying-partition family.
    Varying,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencySection {
    pub family: FamilyName,
    pub objective: ObjectiveName,
    #[serde(default = "x_default")]
    pub x_cardinality: usize,
    #[serde(default = "u_default")]
    pub u_cardinality: usize,
    /// Seed of the random table (`free`, `constant`).
    #[serde(default)]
    pub family_seed: u64,
    #[serde(default = "n_default")]
    pub n: usize,
    #[serde(default = "k_list_default")]
    pub k_list: Vec<usize>,
    /// Number of seeds, `0..seeds`.
    #[serde(default = "seeds_default")]
    pub seeds: u64,
    #[serde(default = "tv_default")]
    pub tv_threshold: f64,
}

fn x_default() -> usize {
    4
}
fn u_default() -> usize {
    3
}
fn n_default() -> usize {
    200
}
fn k_list_default() -> Vec<usize> {
    vec![4, 16, 64, 256]
}
fn seeds_default() -> u64 {
    20
}
fn tv_default() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyFile {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub consistency: ConsistencySection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorPolicy {
    Uniform,
    /// Optimal policy of a discrete environment, by value iteration.
    Optimal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub gamma: f64,
    pub episodes: usize,
    #[serde(default = "policy_default")]
    pub policy: BehaviorPolicy,
    /// Probability of replacing the behavior action by a uniform one.
    #[serde(default)]
    pub epsilon: f64,
}

fn policy_default() -> BehaviorPolicy {
    BehaviorPolicy::Uniform
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateFile {
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
    pub env: EnvSection,
    pub generate: GenerateSection,
}

/// Parses a config, reporting the offending line on failure.
pub fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

/// Canonical text of a resolved config.
pub fn render<T: Serialize>(config: &T) -> Result<String, CliError> {
    toml::to_string(config).map_err(|e| CliError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "output_dir = \"out\"\n[env]\nkind = \"grid\"\n[driver]\ngamma = 0.9\n";

    #[test]
    fn defaults_fill_omitted_keys() {
        let c: OnlineFile = parse(MINIMAL).unwrap();
        assert_eq!(c.model, ModelSection::default());
        assert_eq!(c.driver.episodes, 1000);
        assert_eq!(c.to_core().gamma, 0.9);
        let again: OnlineFile = parse(&render(&c).unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn missing_gamma_is_named() {
        let e = parse::<OnlineFile>("output_dir = \"o\"\n[env]\nkind = \"grid\"\n[driver]\nepisodes = 3\n").unwrap_err();
        assert!(e.to_string().contains("gamma"), "{e}");
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let e = parse::<OnlineFile>(&format!("{MINIMAL}epsilon = 0.1\n")).unwrap_err().to_string();
        assert!(e.contains("unknown field") && e.contains("line 6"), "{e}");
        assert!(parse::<OnlineFile>(&MINIMAL.replace("[env]", "[env]\ncolour = 1")).is_err());
    }
}
