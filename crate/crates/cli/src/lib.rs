//! Command-line front end: CSV and JSON input, JSON and text reports, and a
//! parallel Monte Carlo driver over the core library.

pub mod commands;
pub mod error;
pub mod io;
pub mod parallel;
pub mod report;

pub use parallel::monte_carlo_parallel;
