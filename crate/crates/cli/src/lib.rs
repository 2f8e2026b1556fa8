//! IO companion to `promptlab-core`: experiment configs, dataset files,
//! JSON reports, and the `promptlab` command-line front end.

pub mod config;
pub mod dataset_store;
pub mod error;
pub mod report;
pub mod runner;
