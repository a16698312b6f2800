//! Entity-debiased relation extraction with a variational information
//! bottleneck on entity-token embeddings.

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod vib;

pub use error::{Error, Result};
