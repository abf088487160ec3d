//! Numerical laboratory for catastrophic forgetting in deep linear networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense decompositions, Haar sampling, effective rank.
//! - [`data`]: task generation (whitening, rotation, rank control), IDX and
//!   task-file I/O.
//! - [`dln`]: the deep linear network, its gradient and full-batch training.
//! - [`curvature`]: Hessian-vector products, closed-form traces and expected
//!   alignment, Hutchinson and Lanczos estimators.
//! - [`forgetting`]: Taylor decomposition of old-task forgetting.
//! - [`bounds`]: effective-rank lower bounds on the alignment.
//! - [`projections`]: forward / backward gradient projection and CL metrics.
//!
//! Every random draw goes through an explicitly passed [`rng::LabRng`].

pub mod bounds;
pub mod curvature;
pub mod data;
pub mod dln;
mod error;
pub mod forgetting;
pub mod linalg;
pub mod projections;
pub mod rng;
pub mod stats;

pub use error::{LabError, Result};
pub use linalg::Mat;
