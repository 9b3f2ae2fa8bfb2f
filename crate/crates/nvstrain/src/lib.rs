//! Strain-sensitive NV ensemble magnetometry simulator.

pub mod analysis;
pub mod noise;
mod par;
pub mod sample;
pub mod scan;
pub mod sequence;
pub mod spin;
