//! FlowRec: sequential recommendation with flow matching.
//!
//! A user's history is encoded into a prior state `x0`; a learned vector
//! field transports `x0` toward the embedding of the next item, and the
//! whole catalog is ranked by inner product with the transported state.

pub mod autograd;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Matrix;
