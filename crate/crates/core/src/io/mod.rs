//! Configuration, checkpoints, frame export, evaluation and the guidance
//! wire protocol.

pub mod checkpoint;
pub mod clip;
pub mod config;
pub mod export;
pub mod session;
pub mod wire;
