//! Deterministic simulator for prototype-based federated learning under
//! backdoor attack.

pub mod attack;
pub mod cli;
pub mod data;
pub mod diffnet;
pub mod error;
pub mod proto;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
