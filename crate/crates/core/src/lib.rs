pub mod cli;
pub mod config;
pub mod credit;
pub mod envsim;
pub mod error;
pub mod morphology;
pub mod mosat;
pub mod numcore;
pub mod policy;
pub mod ppo;
pub mod render;
pub mod trainer;

pub use error::{Error, Result};
