//! Federated learning of performance–fairness Pareto fronts with hypernets.

pub mod adam;
pub mod alignment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod fed;
pub mod nets;
pub mod objectives;
pub mod preference;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use objectives::LossVector;
pub use preference::{DirichletParams, PrefBatch, PreferenceVector, ReferencePoint};
pub use tensor::Tensor;
