//! Seeded per-path random streams.
//!
//! Every path owns one ChaCha8 key derived from the run seed; the Brownian
//! drivers and any policy randomness live on disjoint stream ids of that key,
//! so paths can be generated in any order on any number of workers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const STREAMS_PER_PATH: u64 = 4;

/// Sub-stream of a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Price noise `W`.
    Price = 0,
    /// Drift noise `W^(2)`.
    Drift = 1,
    /// Randomised policies.
    Policy = 2,
    /// Auxiliary draws (synthetic samples in tests and reports).
    Aux = 3,
}

pub fn stream_rng(seed: u64, path: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path * STREAMS_PER_PATH + stream as u64);
    rng
}

/// Law of the standardised increments `z` in `dW = sqrt(dt) L z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncrementLaw {
    /// i.i.d. standard normal components.
    #[default]
    Gaussian,
    /// i.i.d. symmetric +-1 components: mean 0, unit variance, and each
    /// component's squared increment equals its expectation exactly. This
    /// realises the "quadratic variation replaced by its expectation"
    /// simplification pathwise (for uncorrelated components).
    QuadraticVariationExact,
}

impl IncrementLaw {
    #[inline]
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            IncrementLaw::Gaussian => rng.sample(StandardNormal),
            IncrementLaw::QuadraticVariationExact => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}
