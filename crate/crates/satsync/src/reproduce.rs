//! Bundled triple-integrator example cases.
//!
//! The topologies are reconstructions: directed graphs on 5, 6 and 3 agents
//! with unit weights, root set `{0}` and at least one directed cycle each.
//! Initial conditions are fixed integer points.

use std::path::Path;

use satsync_core::protocols::ProtocolKind;

use crate::report::{simulate, write_run, Run, RunError, RunOptions};
use crate::scenario::{Scenario, ScenarioError};

pub const CASE1: &str = include_str!("../scenarios/case1.json");
pub const CASE2: &str = include_str!("../scenarios/case2.json");
pub const CASE3: &str = include_str!("../scenarios/case3.json");

/// One protocol configuration shared by every case.
pub const PROTOCOL: ProtocolKind = ProtocolKind::GlobalPartial;
pub const HORIZON: f64 = 50.0;
pub const TOLERANCE: f64 = 1e-2;

pub fn bundled_scenario(case: u8) -> Option<Result<Scenario, ScenarioError>> {
    let text = match case {
        1 => CASE1,
        2 => CASE2,
        3 => CASE3,
        _ => return None,
    };
    Some(Scenario::from_json_str(text))
}

pub fn run_options() -> RunOptions {
    RunOptions {
        t_final: HORIZON,
        tolerance: TOLERANCE,
        ..RunOptions::default()
    }
}

/// Simulates a bundled case and writes the scenario copy, trajectory and
/// report into `out_dir`. Convergence is reported, not enforced.
pub fn reproduce(case: u8, out_dir: &Path) -> Result<Run, RunError> {
    let scenario = bundled_scenario(case)
        .ok_or_else(|| RunError::Io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "case must be 1, 2 or 3")))?
        .expect("bundled scenarios are valid");
    let run = simulate(&scenario, PROTOCOL, None, &run_options())?;
    write_run(&run, out_dir)?;
    std::fs::write(out_dir.join("scenario.json"), scenario_text(case))?;
    Ok(run)
}

fn scenario_text(case: u8) -> &'static str {
    match case {
        1 => CASE1,
        2 => CASE2,
        _ => CASE3,
    }
}
