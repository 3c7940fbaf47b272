//! Planning service and command line around `armtalk-core`.

pub mod api;
pub mod cli;
