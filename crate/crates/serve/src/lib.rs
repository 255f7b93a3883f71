//! Acquisition service and command-line driver for the `vaem` toolkit.

pub mod cli;
pub mod service;
pub mod session;
