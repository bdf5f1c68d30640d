//! Tensors, reverse-mode differentiation, and the Adam optimizer.

pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;
pub mod tensor;

pub use adam::AdamState;
pub use graph::{Graph, Var};
pub use params::{tensor_digest, Bound, Gradients, ParameterSet};
pub use tensor::{Real, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator used for every random draw in the crate.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
