//! Multi-task textual CNN for news article annotation.

pub mod baselines;
pub mod captioner;
pub mod cca;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod ndkit;
pub mod netcore;
pub mod seed;
pub mod textrepr;

pub use error::{Error, ErrorClass, Result};
