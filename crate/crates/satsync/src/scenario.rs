//! JSON scenario files.
//!
//! Matrices are row-major arrays of rows; agent and root indices are 0-based.
//!
//! ```json
//! {
//!   "name": "double-integrator pair",
//!   "model": { "A": [[0, 1], [0, 0]], "B": [[0], [1]], "C": [[1, 0]] },
//!   "network": { "adjacency": [[0, 0], [1, 0]], "roots": [0] },
//!   "x0": [[1, 0], [-1, 0]],
//!   "xr0": [0, 0],
//!   "protocol_x0": { "chi": [[0, 0], [0, 0]] },
//!   "coupling": "partial"
//! }
//! ```
//!
//! `C` may be omitted under full-state coupling, where it defaults to `I`.
//! `protocol_x0` and its members default to zero.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use satsync_core::graph::{Network, RootedFamily};
use satsync_core::model::{check_assumption, AgentModel};
use satsync_core::protocols::{ProtocolKind, StateLayout};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    Full,
    Partial,
}

impl Coupling {
    pub fn semiglobal_kind(self) -> ProtocolKind {
        match self {
            Coupling::Full => ProtocolKind::SemiglobalFull,
            Coupling::Partial => ProtocolKind::SemiglobalPartial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub adjacency: Vec<Vec<f64>>,
    pub roots: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolStateFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xhat: Option<Vec<Vec<f64>>>,
}

/// On-disk form of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub model: ModelFile,
    pub network: NetworkFile,
    pub x0: Vec<Vec<f64>>,
    pub xr0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol_x0: Option<ProtocolStateFile>,
    pub coupling: Coupling,
}

/// One validation finding, located by JSON pointer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub pointer: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pointer = if self.pointer.is_empty() { "/" } else { &self.pointer };
        write!(f, "{pointer}: {}", self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario:\n{}", format_issues(.0))]
    Invalid(Vec<Issue>),
}

fn format_issues(issues: &[Issue]) -> String {
    issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub model: AgentModel,
    pub net: Network,
    pub x0: Vec<DVector<f64>>,
    pub xr0: DVector<f64>,
    pub chi0: Option<Vec<DVector<f64>>>,
    pub xhat0: Option<Vec<DVector<f64>>>,
    pub coupling: Coupling,
    /// Non-fatal findings, e.g. a network outside the rooted family.
    pub warnings: Vec<Issue>,
    pub fingerprint: u64,
    pub source: ScenarioFile,
}

struct Collector {
    issues: Vec<Issue>,
}

impl Collector {
    fn push(&mut self, pointer: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue {
            pointer: pointer.into(),
            message: message.into(),
        });
    }

    /// Rectangular matrix with the expected shape (`None` = any).
    fn matrix(
        &mut self,
        pointer: &str,
        rows: &[Vec<f64>],
        expect_rows: Option<usize>,
        expect_cols: Option<usize>,
    ) -> Option<DMatrix<f64>> {
        let before = self.issues.len();
        if rows.is_empty() {
            self.push(pointer, "matrix must have at least one row");
            return None;
        }
        if let Some(r) = expect_rows {
            if rows.len() != r {
                self.push(pointer, format!("expected {r} rows, found {}", rows.len()));
            }
        }
        let cols = expect_cols.unwrap_or(rows[0].len());
        if cols == 0 {
            self.push(format!("{pointer}/0"), "matrix must have at least one column");
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                self.push(format!("{pointer}/{i}"), format!("expected {cols} entries, found {}", row.len()));
            }
        }
        if self.issues.len() != before {
            return None;
        }
        Some(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    }

    fn vectors(&mut self, pointer: &str, rows: &[Vec<f64>], count: usize, len: usize) -> Option<Vec<DVector<f64>>> {
        let before = self.issues.len();
        if rows.len() != count {
            self.push(pointer, format!("expected {count} agent vectors, found {}", rows.len()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != len {
                self.push(format!("{pointer}/{i}"), format!("expected {len} entries, found {}", row.len()));
            }
        }
        (self.issues.len() == before).then(|| rows.iter().map(|r| DVector::from_column_slice(r)).collect())
    }
}

/// FNV-1a over bytes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    pub fn from_file(file: ScenarioFile) -> Result<Self, ScenarioError> {
        let mut col = Collector { issues: Vec::new() };
        let mut warnings = Vec::new();

        let a = col.matrix("/model/A", &file.model.a, None, None);
        let n = a.as_ref().map(|a| a.nrows());
        if let Some(a) = &a {
            if a.nrows() != a.ncols() {
                col.push("/model/A", format!("must be square, found {}x{}", a.nrows(), a.ncols()));
            }
        }
        let b = col.matrix("/model/B", &file.model.b, n, None);
        let c = match (&file.model.c, file.coupling) {
            (Some(c), _) => col.matrix("/model/C", c, None, n),
            (None, Coupling::Full) => n.map(|n| DMatrix::identity(n, n)),
            (None, Coupling::Partial) => {
                col.push("/model/C", "required under partial-state coupling");
                None
            }
        };
        let model = match (a, b, c) {
            (Some(a), Some(b), Some(c)) if col.issues.is_empty() => match AgentModel::new(a, b, c) {
                Ok(m) => Some(m),
                Err(e) => {
                    col.push("/model", e.to_string());
                    None
                }
            },
            _ => None,
        };
        if let Some(m) = &model {
            match check_assumption(m) {
                Ok(r) if r.pass => {}
                Ok(r) => col.push(
                    "/model",
                    format!(
                        "violates the standing assumption (max Re eig(A) = {:e}, stabilizable = {}, detectable = {})",
                        r.max_real_part, r.stabilizable, r.detectable
                    ),
                ),
                Err(e) => col.push("/model", e.to_string()),
            }
        }

        let adjacency = col.matrix("/network/adjacency", &file.network.adjacency, None, None);
        let agents = adjacency.as_ref().map(|m| m.nrows());
        let mut adjacency_ok = adjacency.is_some();
        if let Some(adj) = &adjacency {
            if adj.nrows() != adj.ncols() {
                col.push(
                    "/network/adjacency",
                    format!("must be square, found {}x{}", adj.nrows(), adj.ncols()),
                );
                adjacency_ok = false;
            } else {
                for i in 0..adj.nrows() {
                    for j in 0..adj.ncols() {
                        let w = adj[(i, j)];
                        if i == j && w != 0.0 {
                            col.push(format!("/network/adjacency/{i}/{j}"), "self-loop: diagonal weights must be 0");
                            adjacency_ok = false;
                        } else if w < 0.0 {
                            col.push(format!("/network/adjacency/{i}/{j}"), format!("negative weight {w}"));
                            adjacency_ok = false;
                        }
                    }
                }
            }
        }
        let mut roots_ok = true;
        if let Some(agents) = agents {
            for (k, &r) in file.network.roots.iter().enumerate() {
                if r >= agents {
                    col.push(format!("/network/roots/{k}"), format!("root {r} out of range for {agents} agents"));
                    roots_ok = false;
                }
            }
        }
        let net = match (adjacency, adjacency_ok && roots_ok) {
            (Some(adj), true) => match Network::with_root_set(adj, &file.network.roots) {
                Ok(net) => Some(net),
                Err(e) => {
                    col.push("/network", e.to_string());
                    None
                }
            },
            _ => None,
        };
        if let Some(net) = &net {
            match net.rooted_family() {
                RootedFamily::Member => {}
                RootedFamily::EmptyRootSet => warnings.push(Issue {
                    pointer: "/network/roots".into(),
                    message: "root set is empty; no agent sees the exosystem".into(),
                }),
                RootedFamily::Unreachable(nodes) => warnings.push(Issue {
                    pointer: "/network".into(),
                    message: format!("agents {nodes:?} are not reachable from the root set"),
                }),
            }
        }

        let mut x0 = None;
        let mut xr0 = None;
        let mut chi0 = None;
        let mut xhat0 = None;
        if let (Some(n), Some(agents)) = (n, agents) {
            x0 = col.vectors("/x0", &file.x0, agents, n);
            if file.xr0.len() != n {
                col.push("/xr0", format!("expected {n} entries, found {}", file.xr0.len()));
            } else {
                xr0 = Some(DVector::from_column_slice(&file.xr0));
            }
            if let Some(ps) = &file.protocol_x0 {
                if let Some(chi) = &ps.chi {
                    chi0 = col.vectors("/protocol_x0/chi", chi, agents, n);
                }
                if let Some(xhat) = &ps.xhat {
                    if file.coupling == Coupling::Full {
                        col.push("/protocol_x0/xhat", "observer states only exist under partial-state coupling");
                    } else {
                        xhat0 = col.vectors("/protocol_x0/xhat", xhat, agents, n);
                    }
                }
            }
        }

        if !col.issues.is_empty() {
            return Err(ScenarioError::Invalid(col.issues));
        }
        let canonical = serde_json::to_vec(&file).expect("scenario files serialize");
        Ok(Scenario {
            name: file.name.clone().unwrap_or_else(|| "unnamed".into()),
            model: model.expect("validated"),
            net: net.expect("validated"),
            x0: x0.expect("validated"),
            xr0: xr0.expect("validated"),
            chi0,
            xhat0,
            coupling: file.coupling,
            warnings,
            fingerprint: fnv1a(&canonical),
            source: file,
        })
    }

    pub fn agents(&self) -> usize {
        self.net.agents()
    }

    pub fn fingerprint_hex(&self) -> String {
        format!("{:016x}", self.fingerprint)
    }

    /// Stacked initial state for a protocol of the given kind; protocol and
    /// observer states not given in the file start at zero.
    pub fn initial_state(&self, layout: &StateLayout) -> DVector<f64> {
        layout
            .assemble(&self.x0, &self.xr0, self.chi0.as_deref(), self.xhat0.as_deref())
            .expect("scenario dimensions were validated")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": { "A": [[0]], "B": [[1]], "C": [[1]] },
        "network": { "adjacency": [[0]], "roots": [0] },
        "x0": [[1]],
        "xr0": [0],
        "coupling": "partial"
    }"#;

    #[test]
    fn minimal_scalar_scenario() {
        let s = Scenario::from_json_str(MINIMAL).unwrap();
        assert_eq!(s.agents(), 1);
        assert_eq!(s.model.n(), 1);
        assert!(s.warnings.is_empty());
        assert_eq!(s.name, "unnamed");
    }

    #[test]
    fn self_loop_is_reported_with_pointer() {
        let text = MINIMAL.replace(r#""adjacency": [[0]]"#, r#""adjacency": [[1]]"#);
        match Scenario::from_json_str(&text).unwrap_err() {
            ScenarioError::Invalid(issues) => {
                assert_eq!(issues.len(), 1);
                assert_eq!(issues[0].pointer, "/network/adjacency/0/0");
                assert!(issues[0].message.contains("self-loop"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn all_issues_are_collected() {
        let text = r#"{
            "model": { "A": [[0, 1], [0]], "B": [[1]] },
            "network": { "adjacency": [[0, -1], [1, 0]], "roots": [5] },
            "x0": [[1, 2]],
            "xr0": [0, 0, 0],
            "coupling": "partial"
        }"#;
        let ScenarioError::Invalid(issues) = Scenario::from_json_str(text).unwrap_err() else {
            panic!("expected validation failure");
        };
        let pointers: Vec<&str> = issues.iter().map(|i| i.pointer.as_str()).collect();
        for expected in ["/model/A/1", "/model/C", "/network/adjacency/0/1", "/network/roots/0"] {
            assert!(pointers.contains(&expected), "{expected} missing from {pointers:?}");
        }
    }

    #[test]
    fn unstable_model_is_rejected() {
        let text = MINIMAL.replace(r#""A": [[0]]"#, r#""A": [[0.5]]"#);
        let ScenarioError::Invalid(issues) = Scenario::from_json_str(&text).unwrap_err() else {
            panic!("expected validation failure");
        };
        assert_eq!(issues[0].pointer, "/model");
    }

    #[test]
    fn unrooted_network_is_only_a_warning() {
        let text = r#"{
            "model": { "A": [[0]], "B": [[1]] },
            "network": { "adjacency": [[0, 0], [0, 0]], "roots": [0] },
            "x0": [[1], [2]],
            "xr0": [0],
            "coupling": "full"
        }"#;
        let s = Scenario::from_json_str(text).unwrap();
        assert_eq!(s.warnings.len(), 1);
        assert!(s.warnings[0].message.contains("[1]"));
        assert_eq!(s.model.c(), &DMatrix::identity(1, 1));
    }

    #[test]
    fn parse_errors_and_unknown_fields() {
        assert!(matches!(Scenario::from_json_str("{"), Err(ScenarioError::Parse(_))));
        let text = MINIMAL.replace(r#""coupling""#, r#""extra": 1, "coupling""#);
        assert!(matches!(Scenario::from_json_str(&text), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn fingerprint_is_stable_and_content_sensitive() {
        let a = Scenario::from_json_str(MINIMAL).unwrap();
        let b = Scenario::from_json_str(&MINIMAL.replace("\n", " ")).unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        let c = Scenario::from_json_str(&MINIMAL.replace(r#""x0": [[1]]"#, r#""x0": [[2]]"#)).unwrap();
        assert_ne!(a.fingerprint, c.fingerprint);
    }
}
