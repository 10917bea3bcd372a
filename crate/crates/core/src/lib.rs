//! Simulation framework comparing two ways of learning a classifier over
//! data split across several nodes:
//!
//! * **federated learning**, where nodes exchange model parameters once per
//!   epoch ([`fedsim`]), and
//! * **distributed coreset sharing**, where nodes send a small weighted
//!   summary of their data built from k-means centers and sensitivity
//!   samples ([`coreset`]).
//!
//! Both are attacked with membership-inference models ([`attacks`]) and
//! compared on target accuracy, attack accuracy (leakage) and the number of
//! scalars transmitted ([`bench`]).

pub mod attacks;
pub mod bench;
pub mod clustering;
pub mod coreset;
pub mod datakit;
mod error;
pub mod fedsim;
pub mod nn;

pub use error::{Error, Result};

pub(crate) use error::StageExt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator used throughout; every stochastic step draws from one of these.
pub type Rng = ChaCha8Rng;

pub(crate) fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a stream tag.
/// Pipeline stages use fixed tags, so a run can be replayed stage by stage.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
