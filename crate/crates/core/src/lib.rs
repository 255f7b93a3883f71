pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dependency;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod likelihood;
pub mod marginal;
pub mod model;
pub mod partial;
pub mod rng;
pub mod saia;
pub mod synthetic;

pub use error::{Error, Result};
