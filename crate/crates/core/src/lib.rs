//! Pruning-at-initialization engine.
//!
//! Implements global-masking pruning on a self-contained feedforward core:
//! SynFlow (iterative synaptic-flow scoring), SNIP, GraSP, magnitude and
//! random baselines, together with numerical verifiers for the conservation
//! laws that explain layer-collapse and for the maximal-critical-compression
//! guarantee of iterative positive conservative scoring.
//!
//! Modules:
//! - [`netgraph`]: architectures, parameters, masks, initialization
//! - [`autodiff`]: forward/backward passes, losses, Hessian-vector products
//! - [`scoring`]: the five pruning scores plus generic synaptic saliency
//! - [`pruner`]: compression schedules, global masking, the iterative loop
//! - [`conservation`]: neuron/layer conservation and related verifiers
//! - [`harness`]: synthetic data, training, sweeps, reports, config files

pub mod autodiff;
pub mod conservation;
pub mod error;
pub mod harness;
pub mod netgraph;
pub mod pruner;
pub mod scoring;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testsupport;

pub use error::{Error, Result};
