//! Analytic posterior-mean predictor for a mixture of low-rank Gaussians, the
//! spectral structure of its Jacobian, and a nullspace-projected editing
//! pipeline built on top of it.

pub mod edit;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod molrg;
pub mod pmp;
pub mod sampler;
pub mod schedule;
pub mod spectral;

pub use error::{LocoError, Result};
pub use molrg::{Sample, SubspaceModel};
pub use schedule::{NoiseSchedule, ScheduleKind};
