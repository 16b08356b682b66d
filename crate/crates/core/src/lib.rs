//! Event-triggered state estimation over a lossless link, with a
//! statistical trigger that decides when the shared model has gone stale
//! and must be re-identified.

pub mod cli;
pub mod error;
pub mod linalg;
pub mod lti;
pub mod protocol;
pub mod quad;
pub mod rng;
pub mod scenario;
pub mod stopping;
pub mod sysid;
pub mod trigger;

pub use error::{Error, Result};
