//! File formats, experiment drivers and the command line around `tc-core`.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod compress;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fixture;
pub mod io;
pub mod lwsi;
pub mod pretrain;
pub mod report;

pub use error::{Result, TcError};
