//! Counterfactual explanations for ReLU classifiers, posed as mixed-integer
//! programs with an optional sum-product network likelihood term.

pub mod data;
pub mod engine;
pub mod error;
pub mod formulation;
pub mod mio;
pub mod nn;
pub mod oracle;
pub mod spn;
pub mod spn_learn;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
