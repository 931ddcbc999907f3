//! Hybrid quantum-classical PPO agents for a two-player Pong game.
//!
//! An 8-qubit data-reuploading circuit (separable, CZ-entangled or
//! IsingZZ-entangled) or a small MLP extracts an 8-dim feature vector from the
//! game observation; linear actor and critic heads sit on top. Everything is
//! trained jointly with PPO and compared afterwards with linear CKA.

pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod env;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod ppo;
pub mod quantum;
pub mod verify;

pub use error::{Error, Result};
