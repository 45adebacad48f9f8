//! Contrastive representation learning for low-rank MDPs.
//!
//! The transition kernel is modelled as `P(s'|s,a) = <phi(s,a), p(s') mu(s')>`
//! with a fixed base measure `p`, fitted by noise-contrastive estimation and
//! consumed by an optimistic online loop ([`driver::run_ctrl_ucb`]) and a
//! pessimistic offline loop ([`driver::run_ctrl_lcb`]). The [`mle`] module
//! provides exact maximum-likelihood fits on small discrete families, used to
//! check that NCE fits approach MLE as the number of negatives grows.

pub mod bonus;
pub mod diffnet;
pub mod driver;
pub mod env;
mod error;
pub mod gradcheck;
pub mod heatmap;
pub mod lowrank;
pub mod mdp;
pub mod mle;
pub mod nce;
pub mod planner;
pub mod spaces;
mod wire;

pub use error::{Error, Result};

/// Seeded generator used by every stochastic operation.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the generator for `seed`.
pub fn rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Derives an independent child seed, e.g. one stream per (seed, K) cell.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
