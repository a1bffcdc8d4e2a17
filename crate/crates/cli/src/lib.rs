//! Command-line front end: builds the toy stack, runs attack grids and
//! aggregates their results under a run root.

pub mod cli;
pub mod commands;
pub mod layout;
pub mod settings;
