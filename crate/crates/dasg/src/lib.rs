//! Training harness, experiment drivers, file formats and the command line
//! front end for the `dasg-core` block.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod harness;
pub mod report;
