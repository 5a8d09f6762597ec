//! Scenario files, trajectory export, run reports and the `satsync` command
//! line on top of `satsync-core`.

pub mod cli;
pub mod report;
pub mod reproduce;
pub mod scenario;
pub mod trajectory_csv;

