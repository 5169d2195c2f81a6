//! Dense `f64` tensors, reverse-mode differentiation, diagonal Gaussians,
//! and the Adam optimizer.

mod gaussian;
mod graph;
mod nn;
mod optim;
mod params;
mod tensor;

pub use gaussian::{
    kl, kl_rows, log_prob, log_prob_rows, reparam_sample, w2, w2_rows, GaussianDiag, STD_FLOOR,
};
pub use graph::{Graph, Var};
pub use nn::{gru_cell, Activation, Dense, GruCell, Mlp};
pub use optim::{clip_grad_norm, Adam};
pub use params::{Gradients, ParamKey, ParamStore};
pub use tensor::Tensor;

/// Run-level seeded random source.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
