//! Desk-scale dual-process image control: a feed-forward rectified-flow
//! generator is steered by a deliberative, differentiable VQA rater whose
//! gradient trains low-rank adapters, so new control tasks can be taught
//! without reference images.
//!
//! The crate is organized around the pipeline:
//!
//! * [`flow`] — rectified-flow math (interpolation, sampling, clean estimate)
//!   and the toy patch-mixing velocity model.
//! * [`lora`] — low-rank adaptation of named weight matrices.
//! * [`vqa`] — the differentiable yes/no rater, its loss, and chat-template
//!   formatting for real VLMs.
//! * [`overlay`] — visual-prompt compositing (palette strips, lines, labeled
//!   points) with gradient gating on overlaid pixels.
//! * [`distill`] — the core loop: generate, partially noise, denoise once
//!   with gradients, overlay, rate, update adapters.
//! * [`latent`] — the seed-noise optimization baseline and the cost
//!   comparison between latent and weight optimization.
//! * [`synthworld`] — procedural scenes with programmatic oracles.
//! * [`eval`] — agreement metrics, horizon estimation, an MMD quality proxy,
//!   and the benchmark harness.
//!
//! All numeric code is generic over [`Real`] (`f32` by default, `f64` for
//! gradient-check work).

pub mod ckpt;
pub mod distill;
pub mod error;
pub mod eval;
pub mod flow;
pub mod graph;
pub mod latent;
pub mod lora;
pub mod optim;
pub mod overlay;
pub mod real;
pub mod rng;
pub mod synthworld;
pub mod tensor;
pub mod vqa;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
