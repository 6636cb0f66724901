//! Deterministic virtual ODMR laboratory.

pub mod optics;
pub mod rng;
pub mod spin;
pub mod instruments;
pub mod sequence;
pub mod config;
pub mod dsp;
pub mod engine;
pub mod protocols;
pub mod record;
