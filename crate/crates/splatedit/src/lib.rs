//! Multi-view diffusion editing of Gaussian-splat scenes.
//!
//! The pipeline edits a 3D object represented as an isotropic Gaussian cloud:
//! it renders an orbit, scores the frames to pick the most edit-salient
//! primary view, fine-tunes per-view expert low-rank adapters on a toy
//! multi-view denoiser, regenerates the six key views under the edited
//! primary condition with masked two-stage attention fusion, and finally
//! re-optimizes the cloud from those views with a leave-one-out repair
//! network to keep the result from fragmenting.

pub mod autodiff;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
