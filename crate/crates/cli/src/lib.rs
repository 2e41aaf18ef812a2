//! Command-line front end: single runs, grid sweeps and result reports.

pub mod grid;
pub mod results;
pub mod sweep;
