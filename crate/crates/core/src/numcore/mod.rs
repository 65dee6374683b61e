//! Minimal dense-tensor numerics: shapes, a reverse-mode autodiff tape,
//! AdamW with decoupled weight decay, gradient clipping, and seeded
//! splittable pseudo-random streams.

pub mod gradcheck;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;
pub mod vecmath;

pub use optim::{adamw_step, clip_global_norm, AdamWConfig, OptState};
pub use params::{GradMap, ParamSet};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
