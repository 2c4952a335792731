//! Generalized stochastic flows of Ito SDEs with weakly differentiable
//! coefficients, studied against weighted reference measures.

pub mod acceptance;
pub mod analysis;
pub mod coefficients;
pub mod config;
pub mod density;
pub mod derivative;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod linalg;
pub mod measure;
pub mod quadrature;
pub mod seed;
pub mod stability;
pub mod stats;

pub use error::{Error, Result};
pub use measure::ReferenceMeasure;
