//! Simulation runs and their JSON reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use satsync_core::protocols::{ClosedLoop, Gain, Protocol, ProtocolKind};
use satsync_core::riccati::RiccatiSolution;
use satsync_core::scheduling::{
    CandidateRecord, LowerCheck, SamplingScheme, SelectionFailure, SelectionReport, ViolationKind,
};
use satsync_core::sim::{integrate, saturation_events, sync_metrics, IntegrationError, IntegrationOptions, Method, Trajectory};
use serde::Serialize;

use crate::scenario::Scenario;
use crate::trajectory_csv::write_trajectory_csv_file;

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const REPORT_FILE: &str = "report.json";

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ProtocolSummary {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observer_gain: Option<Vec<Vec<f64>>>,
}

impl ProtocolSummary {
    pub fn of(protocol: &Protocol) -> Self {
        Self {
            kind: protocol.kind().to_string(),
            epsilon: protocol.epsilon(),
            cache_grid: match protocol.gain() {
                Gain::Scheduled(c) => Some(c.grid().to_vec()),
                Gain::Fixed { .. } => None,
            },
            observer_gain: protocol.observer().map(|k| rows(&k.k)),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsSummary {
    pub tolerance: f64,
    pub final_sync_error: f64,
    pub convergence_time: Option<f64>,
    pub max_control_inf_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_realized_epsilon: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SaturationRecord {
    pub t: f64,
    pub agent: usize,
    pub component: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegratorSummary {
    pub method: String,
    pub t_final: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rtol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atol: Option<f64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub field_evaluations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub scenario_fingerprint: String,
    pub agents: usize,
    pub protocol: ProtocolSummary,
    pub metrics: MetricsSummary,
    /// Final sync error below the tolerance.
    pub converged: bool,
    pub saturation_events: Vec<SaturationRecord>,
    pub wall_clock_seconds: f64,
    pub integrator: IntegratorSummary,
    pub trajectory_file: String,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub t_final: f64,
    pub method: Method,
    pub max_step: Option<f64>,
    pub tolerance: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            t_final: 50.0,
            method: Method::default(),
            max_step: None,
            tolerance: 1e-2,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Design(#[from] satsync_core::Error),
    #[error("integration failed: {0}")]
    Integration(String),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
}

/// Result of one closed-loop simulation.
pub struct Run {
    pub trajectory: Trajectory,
    pub report: RunReport,
}

pub fn simulate(
    scenario: &Scenario,
    kind: ProtocolKind,
    epsilon: Option<f64>,
    options: &RunOptions,
) -> Result<Run, RunError> {
    let started = Instant::now();
    let protocol = Protocol::design(&scenario.model, kind, epsilon)?;
    let closed_loop = ClosedLoop::new(&scenario.model, &scenario.net, &protocol);
    let z0 = scenario.initial_state(&closed_loop.layout());
    let integration = IntegrationOptions {
        t0: 0.0,
        t_final: options.t_final,
        method: options.method,
        max_step: options.max_step,
    };
    let trajectory = integrate(&closed_loop, z0, &integration).map_err(|e| match e {
        IntegrationError::Field { error, .. } => RunError::Design(error),
        other => RunError::Integration(other.to_string()),
    })?;
    let metrics = sync_metrics(&trajectory, options.tolerance);
    let final_sync_error = *metrics.error_series.last().expect("non-empty trajectory");
    let min_realized_epsilon = kind
        .is_global()
        .then(|| trajectory.epsilons.iter().flatten().copied().fold(f64::INFINITY, f64::min));
    let saturation = saturation_events(&trajectory)
        .into_iter()
        .map(|e| SaturationRecord {
            t: e.t,
            agent: e.agent,
            component: e.component,
            magnitude: e.magnitude,
        })
        .collect();
    let (method, dt, rtol, atol) = match options.method {
        Method::FixedRk4 { dt } => ("rk4", Some(dt), None, None),
        Method::AdaptiveRk45 { rtol, atol, .. } => ("rk45", options.max_step, Some(rtol), Some(atol)),
    };
    let mut warnings: Vec<String> = scenario.warnings.iter().map(|w| w.to_string()).collect();
    let scenario_partial = scenario.coupling == crate::scenario::Coupling::Partial;
    if kind.is_partial() != scenario_partial {
        warnings.push(format!(
            "protocol {kind} differs from the scenario's {:?} coupling",
            scenario.coupling
        ));
    }
    let report = RunReport {
        scenario: scenario.name.clone(),
        scenario_fingerprint: scenario.fingerprint_hex(),
        agents: scenario.agents(),
        protocol: ProtocolSummary::of(&protocol),
        metrics: MetricsSummary {
            tolerance: options.tolerance,
            final_sync_error,
            convergence_time: metrics.convergence_time,
            max_control_inf_norm: metrics.max_control_inf_norm,
            min_realized_epsilon,
        },
        converged: final_sync_error < options.tolerance,
        saturation_events: saturation,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        integrator: IntegratorSummary {
            method: method.into(),
            t_final: options.t_final,
            dt,
            rtol,
            atol,
            accepted_steps: trajectory.stats.accepted,
            rejected_steps: trajectory.stats.rejected,
            field_evaluations: trajectory.stats.evaluations,
        },
        trajectory_file: TRAJECTORY_FILE.into(),
        warnings,
    };
    Ok(Run { trajectory, report })
}

/// Writes `trajectory.csv` and `report.json` into `out_dir`.
pub fn write_run(run: &Run, out_dir: &Path) -> Result<(PathBuf, PathBuf), RunError> {
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(TRAJECTORY_FILE);
    let report_path = out_dir.join(REPORT_FILE);
    write_trajectory_csv_file(&run.trajectory, &csv_path)?;
    let json = serde_json::to_string_pretty(&run.report).expect("reports serialize");
    std::fs::write(&report_path, json + "\n")?;
    Ok((csv_path, report_path))
}

#[derive(Debug, Clone, Serialize)]
pub struct RiccatiReport {
    pub kind: String,
    pub parameter: f64,
    pub p: Vec<Vec<f64>>,
    pub feedback: Vec<Vec<f64>>,
    pub residual_norm: f64,
    pub residual_tolerance: f64,
    pub min_eigenvalue: f64,
    pub closed_loop_abscissa: f64,
    pub closed_loop_stable: bool,
}

impl RiccatiReport {
    pub fn of(solution: &RiccatiSolution, model: &satsync_core::model::AgentModel, kind: &str) -> Self {
        Self {
            kind: kind.into(),
            parameter: solution.kind.parameter(),
            p: rows(&solution.p),
            feedback: rows(&solution.feedback(model)),
            residual_norm: solution.residual_norm,
            residual_tolerance: solution.residual_tolerance,
            min_eigenvalue: solution.min_eigenvalue,
            closed_loop_abscissa: solution.closed_loop_abscissa,
            closed_loop_stable: solution.closed_loop_stable,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ViolationJson {
    pub sample: usize,
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateJson {
    pub epsilon: f64,
    pub passed: bool,
    pub max_control: Option<f64>,
    pub max_final_error: Option<f64>,
    pub violation_count: usize,
    pub violations: Vec<ViolationJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub design_error: Option<String>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl CandidateJson {
    /// Keeps at most `limit` violation records.
    pub fn of(c: &CandidateRecord, limit: usize) -> Self {
        Self {
            epsilon: c.epsilon,
            passed: c.passed,
            max_control: finite(c.max_control),
            max_final_error: finite(c.max_final_error),
            violation_count: c.violations.len(),
            violations: c
                .violations
                .iter()
                .take(limit)
                .map(|v| match &v.kind {
                    ViolationKind::Saturation { t, magnitude } => ViolationJson {
                        sample: v.sample,
                        kind: "saturation",
                        t: Some(*t),
                        value: Some(*magnitude),
                        message: None,
                    },
                    ViolationKind::NotSynchronized { error } => ViolationJson {
                        sample: v.sample,
                        kind: "not-synchronized",
                        t: None,
                        value: Some(*error),
                        message: None,
                    },
                    ViolationKind::Integration(m) => ViolationJson {
                        sample: v.sample,
                        kind: "integration",
                        t: None,
                        value: None,
                        message: Some(m.clone()),
                    },
                })
                .collect(),
            design_error: c.design_error.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LowerCheckJson {
    pub epsilon: f64,
    pub samples: usize,
    pub saturation_free: bool,
    pub max_control: Option<f64>,
}

impl From<&LowerCheck> for LowerCheckJson {
    fn from(c: &LowerCheck) -> Self {
        Self {
            epsilon: c.epsilon,
            samples: c.samples,
            saturation_free: c.passed,
            max_control: finite(c.max_control),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionJson {
    pub method: &'static str,
    pub protocol: String,
    pub epsilon: Option<f64>,
    pub sampling: &'static str,
    pub samples: usize,
    pub horizon: f64,
    pub margin: f64,
    pub tolerance: f64,
    pub candidates: Vec<CandidateJson>,
    /// Saturation-only re-checks below the selection; heuristic, not enforced.
    pub lower_checks: Vec<LowerCheckJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_failed_candidate: Option<CandidateJson>,
}

fn scheme_name(s: SamplingScheme) -> &'static str {
    match s {
        SamplingScheme::Vertices => "all-vertices",
        SamplingScheme::Hadamard => "hadamard-vertices-plus-origin",
    }
}

const VIOLATIONS_SHOWN: usize = 16;

impl SelectionJson {
    pub fn of(report: &SelectionReport) -> Self {
        Self {
            method: SelectionReport::METHOD,
            protocol: report.kind.to_string(),
            epsilon: Some(report.epsilon),
            sampling: scheme_name(report.scheme),
            samples: report.samples,
            horizon: report.options.horizon,
            margin: report.options.margin,
            tolerance: report.options.tolerance,
            candidates: report.candidates.iter().map(|c| CandidateJson::of(c, VIOLATIONS_SHOWN)).collect(),
            lower_checks: report.lower_checks.iter().map(LowerCheckJson::from).collect(),
            best_failed_candidate: None,
        }
    }

    pub fn of_failure(
        failure: &SelectionFailure,
        kind: ProtocolKind,
        options: &satsync_core::scheduling::SelectionOptions,
    ) -> Self {
        Self {
            method: SelectionReport::METHOD,
            protocol: kind.to_string(),
            epsilon: None,
            sampling: scheme_name(failure.scheme),
            samples: failure.samples,
            horizon: options.horizon,
            margin: options.margin,
            tolerance: options.tolerance,
            candidates: failure.candidates.iter().map(|c| CandidateJson::of(c, VIOLATIONS_SHOWN)).collect(),
            lower_checks: Vec::new(),
            best_failed_candidate: failure.best.as_ref().map(|c| CandidateJson::of(c, VIOLATIONS_SHOWN)),
        }
    }
}
