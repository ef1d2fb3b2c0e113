//! Fine-grained split inference of CNNs across a fleet of microcontrollers.
//!
//! The pipeline reinterprets a CNN into neuron-level structure ([`model`]),
//! rates each worker and sizes its share of every layer ([`allocator`]),
//! derives which worker needs which activations ([`routing`]), and executes
//! the plan on a virtual-time simulator with per-worker RAM accounting
//! ([`runtime`]). [`oracle`] provides dense reference inference and
//! brute-force checkers used to verify all of the above.

pub mod allocator;
pub mod error;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod routing;
pub mod runtime;

pub use error::{Error, Result};
