//! Core model of an elastic match-table pipeline. Everything in here is
//! deterministic: same inputs, same seed, same outputs, cycle for cycle.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod elu;
pub mod engine;
pub mod hash;
pub mod interconnect;
pub mod optimizer;
pub mod pmu;
pub mod queue;
pub mod rng;
pub mod traffic;
pub mod types;
pub mod vmt;
