// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic dense-tensor substrate: kernels, optimizer, seeded RNG.

pub mod ops;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use ops::{matmul, rmsnorm, softmax_rows, topk_mask};
pub use optim::{adamw_step, OptimizerConfig, OptimizerState};
pub use rng::SeededRng;
pub use tensor::Tensor;
