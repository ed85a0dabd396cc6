//! Image-guided point cloud completion.
//!
//! A partial 3-D scan plus a single auxiliary image are fused in a localized
//! latent space via cross-attention and decoded back into a complete point
//! cloud. Training is either supervised with an L1 Chamfer loss against
//! complete ground truth, or weakly supervised through self-reconstruction
//! augmentations plus a differentiable silhouette renderer that scores the
//! completion in image space.
//!
//! Hot loops are data-parallel on rayon under the default `parallel` feature
//! and fall back to sequential execution without it; both modes produce
//! bit-identical results (see [`parallel`]).

pub mod autodiff;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod render;
pub mod train;
pub mod weaksup;
pub mod parallel;

pub use error::{Error, Result};
