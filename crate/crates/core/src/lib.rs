//! AYS integrated-assessment model wrapped as an episodic decision process, with
//! the network, agents, experiment harness and analyses used to study it.

pub mod agents;
pub mod analysis;
pub mod codec;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod harness;
pub mod kv;
pub mod neural;

pub use error::{Error, Result};
