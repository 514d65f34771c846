//! Behavior evaluation: scalar driving metrics and the statistics used to
//! compare populations of episodes.

pub mod metrics;
pub mod stats;
