//! Block-wise mixed-precision weight quantization laboratory.
//!
//! The crate quantizes a small decoder transformer with a round-to-nearest
//! group quantizer, estimates weight sensitivity around the quantized model,
//! reorders channels in both directions to cluster sensitive weights, and
//! searches per-block bitwidths under a global bit budget with a scalable
//! approximation to greedy search. Everything is deterministic given seeds,
//! and every estimator is paired with a brute-force or finite-difference
//! oracle in the test suite.

pub mod error;
pub mod export;
pub mod layout;
pub mod model;
pub mod par;
pub mod quant;
pub mod rng;
pub mod search;
pub mod sensitivity;
pub mod tensor;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;
