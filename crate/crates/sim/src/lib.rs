//! Std front end for the simulator: config files, binary formats on disk,
//! metrics output, a thread-pool client executor and the command line.

pub mod cli;
pub mod error;
pub mod executor;
pub mod files;
pub mod gradcheck;
pub mod metrics;
pub mod runner;
pub mod sweep;

pub use error::Error;
