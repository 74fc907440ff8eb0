//! Neural Data Router laboratory.
//!
//! Copy-gated Transformer encoders with geometric attention, the three
//! algorithmic tasks they are evaluated on, and the tooling to train,
//! evaluate and inspect them.

pub mod attention;
pub mod error;
pub mod harness;
pub mod introspection;
pub mod layer;
pub mod model;
pub mod par;
pub mod rng;
pub mod substrate;
pub mod tasks;

pub use error::{Error, Result};
