//! Energy-saving recommendations from smart-home event logs.
//!
//! The pipeline: [`ingest`] raw logs into a per-home [`ingest::EventStore`],
//! [`miner`] frequent behavior patterns, turn the relevant ones into
//! [`rules`], match the live stream against them with [`matcher`], and
//! adapt rule ranking from inhabitant [`feedback`]. [`simulator`] produces
//! synthetic households with known ground truth.

pub mod domain;
pub mod durfmt;
pub mod ingest;
pub mod kvconf;
pub mod miner;
pub mod timefmt;
pub mod feedback;
pub mod matcher;
pub mod pipeline;
pub mod rules;
pub mod simulator;
