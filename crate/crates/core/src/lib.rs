//! Bayesian graphon-regularized regression for multi-subject weighted
//! networks, with a hybrid HMC/Gibbs sampler, a per-edge GLM baseline,
//! synthetic-data generation, and accuracy/prediction metrics.

pub mod data;
pub mod glm;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod samplers;
pub mod simulate;
pub mod splines;
pub mod stats;
