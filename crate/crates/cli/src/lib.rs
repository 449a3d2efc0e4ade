//! Command implementations behind the `thorgrasp` binary.

pub mod bench;
pub mod plot;
pub mod serve;
