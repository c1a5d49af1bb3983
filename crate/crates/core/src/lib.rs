//! Training-time counterfactual feature learning for gait silhouette
//! embeddings, built on a small hand-rolled tensor/autograd-free core.
//!
//! The crate provides:
//! - dense f64 tensors with analytic backward passes ([`tensor`], [`fft`]);
//! - the cross pixel-wise attention generator ([`cpag`]) and the Fourier
//!   projection head ([`fph`]);
//! - factual/counterfactual stage losses ([`loss`]);
//! - a synthetic confounded-silhouette benchmark ([`synth`]);
//! - a toy staged backbone plus training loop and retrieval evaluation
//!   ([`backbone`], [`train`], [`retrieval`]);
//! - finite-difference gradient verification ([`gradcheck`]) and a MAC /
//!   wall-clock complexity bench ([`complexity`]).
//!
//! With the default `parallel` feature, batch work fans out over rayon in
//! fixed-size chunks that keep float summation order (and therefore results)
//! independent of thread count; without it, everything runs sequentially.

pub mod backbone;
pub mod checkpoint;
pub mod complexity;
pub mod cpag;
pub mod error;
pub mod fft;
pub mod fph;
pub mod gradcheck;
pub mod instrument;
pub mod loss;
pub mod param;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
