//! Two-stage routed LoRA experts for streaming continual instruction tuning.
//!
//! The crate contains a small reverse-mode autograd engine ([`autograd`]),
//! LoRA expert banks ([`lora`]), the task-aware selection plus token-wise
//! weighting router ([`routing`]), EMA-referenced routing regularization
//! ([`stability`]), a frozen toy transformer backbone ([`backbone`]), a
//! synthetic mixed-task stream generator ([`stream`]), forgetting and
//! routing-homogeneity metrics ([`metrics`]), and the single-pass streaming
//! trainer ([`trainer`]).

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod lora;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod routing;
pub mod stability;
pub mod stream;
pub mod tensor;
pub mod trace;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
