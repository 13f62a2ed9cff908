//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

/// Weight matrix `[fan_in×fan_out]`, uniform in `±1/√fan_in`.
pub fn linear_weight<R: rand::Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}
