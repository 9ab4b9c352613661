//! In-context diffusion at desk scale.
//!
//! A small, dependency-light stack for training and sampling pixel-space
//! diffusion models that are conditioned on an in-context example pair:
//!
//! * [`tensor`]: dense tensors with a reverse-mode autodiff graph.
//! * [`schedule`]: linear noise schedules and K-step plans.
//! * [`diffusion`]: forward noising, the noise-prediction objective, DDIM
//!   and ancestral steps, direct x0 prediction.
//! * [`sandbox`]: exact-score Gaussian targets for validating samplers.
//! * [`model`]: the micro U-Net denoiser, its control branch and the
//!   separate-and-gather adapters.
//! * [`data`]: procedural scenes, analytic annotators and context batches.
//! * [`feedback`]: image-space feedback losses.
//! * [`metrics`]: RMSE and a random-projection Fréchet distance.
//! * [`train`] and [`eval`]: the training step and evaluation loop.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod feedback;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sandbox;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Float, Graph, Tensor, Var};
