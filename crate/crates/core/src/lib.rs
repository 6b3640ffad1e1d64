//! Hierarchical variational autoencoder whose latent structure is a growing binary tree.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod generative;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod oracle;
pub mod runner;
pub mod topology;
pub mod trainer;
