//! Desk-scale RLHF laboratory comparing sparse sequence rewards against
//! gaze-informed reward models and gaze-weighted token-level reward
//! distribution, under PPO and GRPO.

pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod gaze;
pub mod models;
pub mod rewardlab;
pub mod rltrain;
pub mod synthenv;

pub use error::{Error, Result};
