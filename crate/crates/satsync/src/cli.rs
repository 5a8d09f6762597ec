//! Command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 validation failure,
//! 3 assertion failure (a reproduction that did not converge, or an epsilon
//! search that found no admissible value).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use satsync_core::graph::{target_dynamics_stable, RootedFamily};
use satsync_core::model::check_assumption;
use satsync_core::protocols::ProtocolKind;
use satsync_core::riccati::{solve_lowgain_are, solve_scheduled_are};
use satsync_core::scheduling::{select_semiglobal_epsilon, CompactSetSpec, SelectionOptions};
use satsync_core::sim::Method;
use serde::Serialize;

use crate::report::{simulate, write_run, RiccatiReport, RunError, RunOptions, SelectionJson};
use crate::reproduce::reproduce;
use crate::scenario::{Scenario, ScenarioError};

#[derive(Debug, Parser)]
#[command(name = "satsync", version, about = "Regulated state synchronization of saturated linear agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    GlobalFull,
    GlobalPartial,
    SemiglobalFull,
    SemiglobalPartial,
}

impl From<ProtocolArg> for ProtocolKind {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::GlobalFull => ProtocolKind::GlobalFull,
            ProtocolArg::GlobalPartial => ProtocolKind::GlobalPartial,
            ProtocolArg::SemiglobalFull => ProtocolKind::SemiglobalFull,
            ProtocolArg::SemiglobalPartial => ProtocolKind::SemiglobalPartial,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Rk4,
    Rk45,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RiccatiArg {
    Scheduled,
    Lowgain,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one protocol on a scenario and write trajectory.csv and report.json.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        /// Low-gain parameter for the semi-global protocols.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, default_value_t = 50.0)]
        t_final: f64,
        /// Step of rk4 (default 0.01); maximum step of rk45.
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, value_enum, default_value_t = MethodArg::Rk45)]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a scenario and print its structural properties.
    Check {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Solve one of the two Riccati equations for the scenario's model.
    Riccati {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        kind: RiccatiArg,
        #[arg(long)]
        param: f64,
    },
    /// Search for a semi-global low-gain parameter on boxes of the given half-width.
    SelectEps {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        half_width: f64,
    },
    /// Run a bundled triple-integrator example case.
    Reproduce {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        case: u8,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Runtime(String),
    Validation(String),
    Assertion(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Assertion(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Runtime(m) | Failure::Validation(m) | Failure::Assertion(m) => m,
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<satsync_core::Error> for Failure {
    fn from(e: satsync_core::Error) -> Self {
        use satsync_core::Error as E;
        match e {
            E::Dimension { .. }
            | E::Empty { .. }
            | E::NonFinite { .. }
            | E::SelfLoop { .. }
            | E::NegativeWeight { .. }
            | E::RootOutOfRange { .. }
            | E::AssumptionViolated { .. }
            | E::Parameter { .. }
            | E::NotDetectable
            | E::MissingParameter { .. }
            | E::StateLength { .. }
            | E::NotRooted { .. } => Failure::Validation(e.to_string()),
            E::SelectionFailed(_) => Failure::Assertion(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Design(e) => e.into(),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(path: &PathBuf) -> Result<Scenario, Failure> {
    let scenario = Scenario::load(path)?;
    for w in &scenario.warnings {
        eprintln!("warning: {w}");
    }
    Ok(scenario)
}

fn print_json<T: Serialize>(value: &T) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    // A closed pipe (`satsync check ... | head`) is not an error.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

#[derive(Serialize)]
struct CheckReport {
    scenario: String,
    scenario_fingerprint: String,
    agents: usize,
    n: usize,
    m: usize,
    q: usize,
    coupling: crate::scenario::Coupling,
    max_real_part_of_a: f64,
    stabilizable: bool,
    detectable: bool,
    rooted: bool,
    unreachable_agents: Vec<usize>,
    expanded_laplacian_min_real_part: f64,
    target_dynamics_stable: bool,
    warnings: Vec<String>,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            scenario,
            protocol,
            epsilon,
            t_final,
            dt,
            method,
            out,
        } => {
            let scenario = load(&scenario)?;
            if !(t_final > 0.0) {
                return Err(Failure::Validation(format!("--t-final must be positive, got {t_final}")));
            }
            if let Some(dt) = dt {
                if !(dt > 0.0) {
                    return Err(Failure::Validation(format!("--dt must be positive, got {dt}")));
                }
            }
            let (method, max_step) = match method {
                MethodArg::Rk4 => (Method::FixedRk4 { dt: dt.unwrap_or(0.01) }, None),
                MethodArg::Rk45 => (Method::default(), dt),
            };
            let options = RunOptions {
                t_final,
                method,
                max_step,
                ..RunOptions::default()
            };
            let run = simulate(&scenario, protocol.into(), epsilon, &options)?;
            let (csv, report) = write_run(&run, &out)?;
            println!(
                "{}: final sync error {:.3e}, {} saturation events; wrote {} and {}",
                run.report.protocol.kind,
                run.report.metrics.final_sync_error,
                run.report.saturation_events.len(),
                csv.display(),
                report.display()
            );
            Ok(())
        }
        Command::Check { scenario } => {
            let s = load(&scenario)?;
            let assumption = check_assumption(&s.model)?;
            let expanded = s.net.expanded_laplacian()?;
            let unreachable = match s.net.rooted_family() {
                RootedFamily::Member => Vec::new(),
                RootedFamily::EmptyRootSet => (0..s.agents()).collect(),
                RootedFamily::Unreachable(v) => v,
            };
            let report = CheckReport {
                scenario: s.name.clone(),
                scenario_fingerprint: s.fingerprint_hex(),
                agents: s.agents(),
                n: s.model.n(),
                m: s.model.m(),
                q: s.model.q(),
                coupling: s.coupling,
                max_real_part_of_a: assumption.max_real_part,
                stabilizable: assumption.stabilizable,
                detectable: assumption.detectable,
                rooted: unreachable.is_empty(),
                unreachable_agents: unreachable,
                expanded_laplacian_min_real_part: expanded.min_real_part(),
                target_dynamics_stable: target_dynamics_stable(&s.net, &s.model)?,
                warnings: s.warnings.iter().map(|w| w.to_string()).collect(),
            };
            print_json(&report);
            Ok(())
        }
        Command::Riccati { scenario, kind, param } => {
            let s = load(&scenario)?;
            let (solution, name) = match kind {
                RiccatiArg::Scheduled => (solve_scheduled_are(&s.model, param)?, "scheduled"),
                RiccatiArg::Lowgain => (solve_lowgain_are(&s.model, param)?, "lowgain"),
            };
            print_json(&RiccatiReport::of(&solution, &s.model, name));
            Ok(())
        }
        Command::SelectEps { scenario, half_width } => {
            let s = load(&scenario)?;
            if !(half_width >= 0.0) || !half_width.is_finite() {
                return Err(Failure::Validation(format!("--half-width must be finite and >= 0, got {half_width}")));
            }
            let kind = s.coupling.semiglobal_kind();
            let sets = CompactSetSpec::uniform(&s.model, kind, half_width);
            let options = SelectionOptions::default();
            match select_semiglobal_epsilon(&s.model, &s.net, &sets, kind, &options) {
                Ok(report) => {
                    print_json(&SelectionJson::of(&report));
                    Ok(())
                }
                Err(satsync_core::Error::SelectionFailed(failure)) => {
                    print_json(&SelectionJson::of_failure(&failure, kind, &options));
                    Err(Failure::Assertion(format!(
                        "no epsilon down to {:e} passed validation",
                        options.floor
                    )))
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Reproduce { case, out } => {
            let run = reproduce(case, &out)?;
            let r = &run.report;
            println!(
                "case {case}: N = {}, final sync error {:.3e} at t = {}, converged = {}, {} saturation events",
                r.agents,
                r.metrics.final_sync_error,
                r.integrator.t_final,
                r.converged,
                r.saturation_events.len()
            );
            if r.converged {
                Ok(())
            } else {
                Err(Failure::Assertion(format!(
                    "case {case} did not synchronize: error {:e} >= {:e} (report in {})",
                    r.metrics.final_sync_error,
                    r.metrics.tolerance,
                    out.join(crate::report::REPORT_FILE).display()
                )))
            }
        }
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
