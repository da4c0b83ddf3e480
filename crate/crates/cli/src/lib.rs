//! Command line front end and HTTP routing service.

pub mod cli;
pub mod latency;
pub mod service;

pub use cli::{run, Cli};
