//! Flow emulators, energy-based likelihood models and importance
//! reweighting for Boltzmann-distributed targets.

pub mod coupling;
pub mod densities;
pub mod diffnet;
pub mod ebm;
pub mod emulator;
pub mod error;
pub mod interpolant;
pub mod io;
pub mod metrics;
pub mod ode;
pub mod pipeline;
pub mod reweight;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
