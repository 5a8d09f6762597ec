use alloc::boxed::Box;
use alloc::string::String;

use thiserror::Error;

use crate::protocols::ProtocolKind;
use crate::scheduling::SelectionFailure;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{field} has shape {found:?}, expected {expected:?}")]
    Dimension {
        field: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("{field} must have at least one row and column")]
    Empty { field: &'static str },

    #[error("{field} contains a non-finite entry")]
    NonFinite { field: &'static str },

    #[error("self-loop at node {node}: a_ii must be 0")]
    SelfLoop { node: usize },

    #[error("negative edge weight a[{row}][{col}] = {weight}")]
    NegativeWeight { row: usize, col: usize, weight: f64 },

    #[error("root node {node} out of range for {agents} agents")]
    RootOutOfRange { node: usize, agents: usize },

    #[error("eigenvalue computation failed for {what}")]
    Eigen { what: &'static str },

    #[error(
        "agent model violates the standing assumption (max Re eig(A) = {max_real_part:e}, \
         stabilizable = {stabilizable}, detectable = {detectable})"
    )]
    AssumptionViolated {
        max_real_part: f64,
        stabilizable: bool,
        detectable: bool,
    },

    #[error("parameter {name} = {value} outside {range}")]
    Parameter {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("Riccati solve failed: {reason} (condition estimate {condition:e})")]
    Riccati { reason: String, condition: f64 },

    #[error("Riccati solution is not stabilizing (closed-loop spectral abscissa {abscissa:e})")]
    NotStabilizing { abscissa: f64 },

    #[error("observer design failed: (A, C) is not detectable")]
    NotDetectable,

    #[error(
        "gain schedule floor reached: state norm {state_norm:e} gives g(rho_min) = {g_at_floor:e} > 1"
    )]
    ScheduleFloor { state_norm: f64, g_at_floor: f64 },

    #[error("{kind} protocol requires {what}")]
    MissingParameter {
        kind: ProtocolKind,
        what: &'static str,
    },

    #[error("state vector has length {found}, expected {expected}")]
    StateLength { expected: usize, found: usize },

    #[error("no low-gain parameter on the grid passed validation")]
    SelectionFailed(Box<SelectionFailure>),

    #[error("network is not in the rooted family (unreachable agents {unreachable:?})")]
    NotRooted { unreachable: alloc::vec::Vec<usize> },

    #[error("integration failed: {0}")]
    Integration(String),
}
