//! Coordinator, native worker and command-line front end.

pub mod cli;
pub mod master;
pub mod worker;
