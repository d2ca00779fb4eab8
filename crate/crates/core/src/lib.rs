pub mod cmc;
pub mod corpus;
pub mod dot;
pub mod error;
pub mod gradcheck;
pub mod generator;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod mvco;
pub mod nn;
pub mod rng;
pub mod vision;

pub use error::{Error, Result};
