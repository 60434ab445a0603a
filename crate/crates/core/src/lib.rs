//! Provenance-based intrusion detection pipelines as cached, configurable stages.
//!
//! The crate models a detection system as seven pipeline stages (graph
//! construction, transformation, featurization, batching, training,
//! evaluation, triage). Each stage is content-addressed by its resolved
//! configuration and the digest of its parent stage, so reruns reuse every
//! artifact whose inputs did not change. Systems are described by YAML
//! configs with single-file inheritance and dotted command-line overrides.
//!
//! Numeric kernels are generic over [`Scalar`]; the pipeline itself runs at
//! the fixed [`Real`] precision.

pub mod batching;
pub mod cache;
pub mod config;
pub mod evaluate;
pub mod experiments;
pub mod featurize;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod transform;
pub mod triage;

pub use scalar::Scalar;

/// Scalar type used by the concrete pipeline. 64-bit: the finite-difference
/// gradient checks run at 1e-4 relative tolerance and need the headroom.
pub type Real = f64;
