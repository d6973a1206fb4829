//! Simulation of gradient-guided bit-flip attacks on fixed-point network
//! weights, and two training-free defenses: selective re-encoding of
//! vulnerable weights into truncated complementary unary (TCU) storage, and
//! checksum-triggered weight locking to precomputed cluster centroids.

pub mod attacker;
pub mod bitcodec;
pub mod error;
pub mod lockdown;
mod nan;
pub mod nn;
pub mod planner;
pub mod rng;
pub mod sensitivity;
pub mod stats;
pub mod unary_guard;

pub use error::{Error, Result};
