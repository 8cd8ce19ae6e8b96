//! Numerical substrate: dense f64 tensors, reverse-mode differentiation,
//! orthonormalization, spectral norms, and AdamW.

pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use tape::{finite_difference_grad, Gradients, Tape, VarId};
pub use tensor::{
    dot, gram_identity_deviation, matmul, matvec, orthonormalize, spectral_norm, Tensor,
};

/// The single RNG used everywhere. All randomness in the crate flows from
/// explicit u64 seeds through this stream type.
pub type SeededRng = rand_chacha::ChaCha12Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
