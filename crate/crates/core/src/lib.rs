//! Two-stage radiology report generation with disease progression reasoning.

pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod stage1;
pub mod stage2;
pub mod trainer;

pub use error::{RecapError, Result};
