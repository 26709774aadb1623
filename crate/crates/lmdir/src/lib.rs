//! Command line and HTTP front ends for `lmdir-core`.

pub mod cli;
pub mod server;
pub mod session;
