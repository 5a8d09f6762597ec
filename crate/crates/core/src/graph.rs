//! Weighted communication digraphs, their Laplacians and the root-set
//! reachability condition.
//!
//! An entry `a_ij > 0` is an edge from node `j` to node `i`: agent `i`
//! receives information from agent `j`. Nodes are indexed from 0.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, Complex64};
use crate::model::{check_assumption, AgentModel};

/// Real parts above this count as strictly positive.
pub const POSITIVITY_THRESHOLD: f64 = 1e-9;

/// Hurwitz margin used by [`target_dynamics_stable`].
pub const HURWITZ_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    adjacency: DMatrix<f64>,
    roots: Vec<bool>,
}

/// Outcome of the root-set reachability test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RootedFamily {
    Member,
    EmptyRootSet,
    Unreachable(Vec<usize>),
}

impl Network {
    /// Builds a network from its adjacency matrix and the root indicator `ι`.
    pub fn new(adjacency: DMatrix<f64>, roots: Vec<bool>) -> Result<Self> {
        let n = adjacency.nrows();
        if n == 0 {
            return Err(Error::Empty { field: "adjacency" });
        }
        if adjacency.ncols() != n {
            return Err(Error::Dimension {
                field: "adjacency",
                expected: (n, n),
                found: adjacency.shape(),
            });
        }
        if roots.len() != n {
            return Err(Error::Dimension {
                field: "roots",
                expected: (n, 1),
                found: (roots.len(), 1),
            });
        }
        for i in 0..n {
            for j in 0..n {
                let w = adjacency[(i, j)];
                if !w.is_finite() {
                    return Err(Error::NonFinite { field: "adjacency" });
                }
                if w < 0.0 {
                    return Err(Error::NegativeWeight { row: i, col: j, weight: w });
                }
            }
            if adjacency[(i, i)] != 0.0 {
                return Err(Error::SelfLoop { node: i });
            }
        }
        Ok(Self { adjacency, roots })
    }

    /// Builds a network whose root set is given by node indices.
    pub fn with_root_set(adjacency: DMatrix<f64>, root_set: &[usize]) -> Result<Self> {
        let n = adjacency.nrows();
        let mut roots = vec![false; n];
        for &r in root_set {
            if r >= n {
                return Err(Error::RootOutOfRange { node: r, agents: n });
            }
            roots[r] = true;
        }
        Self::new(adjacency, roots)
    }

    /// Builds an unweighted network from `(from, to)` edge pairs.
    pub fn from_edges(agents: usize, edges: &[(usize, usize)], root_set: &[usize]) -> Result<Self> {
        let mut adjacency = DMatrix::zeros(agents, agents);
        for &(from, to) in edges {
            if from >= agents || to >= agents {
                return Err(Error::RootOutOfRange {
                    node: from.max(to),
                    agents,
                });
            }
            adjacency[(to, from)] = 1.0;
        }
        Self::with_root_set(adjacency, root_set)
    }

    pub fn agents(&self) -> usize {
        self.roots.len()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// Root indicator `ι`.
    pub fn roots(&self) -> &[bool] {
        &self.roots
    }

    pub fn root_indicator(&self, i: usize) -> f64 {
        if self.roots[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn root_set(&self) -> Vec<usize> {
        (0..self.agents()).filter(|&i| self.roots[i]).collect()
    }

    /// `ℓ_ii = Σ_k a_ik`, `ℓ_ij = −a_ij`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.agents();
        let mut l = -self.adjacency.clone();
        for i in 0..n {
            l[(i, i)] = self.adjacency.row(i).sum();
        }
        l
    }

    /// `L̃ = L + diag(ι)` with its spectrum.
    pub fn expanded_laplacian(&self) -> Result<ExpandedLaplacian> {
        let mut matrix = self.laplacian();
        for i in 0..self.agents() {
            matrix[(i, i)] += self.root_indicator(i);
        }
        let spectrum = linalg::eigenvalues(&matrix).ok_or(Error::Eigen {
            what: "expanded Laplacian",
        })?;
        Ok(ExpandedLaplacian { matrix, spectrum })
    }

    /// Nodes reachable from the root set along edges `j → i` with `a_ij > 0`.
    pub fn reachable_from_roots(&self) -> Vec<bool> {
        let n = self.agents();
        let mut seen = self.roots.clone();
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| self.roots[i]).collect();
        while let Some(j) = queue.pop_front() {
            for i in 0..n {
                if !seen[i] && self.adjacency[(i, j)] > 0.0 {
                    seen[i] = true;
                    queue.push_back(i);
                }
            }
        }
        seen
    }

    pub fn rooted_family(&self) -> RootedFamily {
        if !self.roots.iter().any(|&r| r) {
            return RootedFamily::EmptyRootSet;
        }
        let unreachable: Vec<usize> = self
            .reachable_from_roots()
            .iter()
            .enumerate()
            .filter(|(_, &ok)| !ok)
            .map(|(i, _)| i)
            .collect();
        if unreachable.is_empty() {
            RootedFamily::Member
        } else {
            RootedFamily::Unreachable(unreachable)
        }
    }

    /// Every node lies on a directed tree rooted in the root set.
    pub fn in_rooted_family(&self) -> bool {
        self.rooted_family() == RootedFamily::Member
    }

    /// Applies the relabeling `new index = perm[old index]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.agents();
        let mut adjacency = DMatrix::zeros(n, n);
        let mut roots = vec![false; n];
        for i in 0..n {
            roots[perm[i]] = self.roots[i];
            for j in 0..n {
                adjacency[(perm[i], perm[j])] = self.adjacency[(i, j)];
            }
        }
        Self::new(adjacency, roots)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedLaplacian {
    pub matrix: DMatrix<f64>,
    pub spectrum: Vec<Complex64>,
}

impl ExpandedLaplacian {
    pub fn min_real_part(&self) -> f64 {
        self.spectrum
            .iter()
            .map(|z| z.re)
            .fold(f64::INFINITY, f64::min)
    }

    /// All eigenvalues strictly in the open right half plane.
    pub fn is_positive(&self) -> bool {
        self.min_real_part() > POSITIVITY_THRESHOLD
    }
}

/// Whether `A − λI` is Hurwitz for every eigenvalue `λ` of `L̃`, i.e. whether
/// `I⊗A − L̃⊗I` is Hurwitz. Fails when the model violates the standing
/// assumption.
pub fn target_dynamics_stable(net: &Network, model: &AgentModel) -> Result<bool> {
    let report = check_assumption(model)?;
    if !report.pass {
        return Err(Error::AssumptionViolated {
            max_real_part: report.max_real_part,
            stabilizable: report.stabilizable,
            detectable: report.detectable,
        });
    }
    let expanded = net.expanded_laplacian()?;
    Ok(expanded.spectrum.iter().all(|lambda| {
        report
            .eigenvalues
            .iter()
            .all(|mu| mu.re - lambda.re < -HURWITZ_MARGIN)
    }))
}

/// `I⊗A − L̃⊗I`, the synchronization-error dynamics of the full-state protocols.
pub fn target_dynamics_matrix(net: &Network, model: &AgentModel) -> Result<DMatrix<f64>> {
    let expanded = net.expanded_laplacian()?;
    let n = model.n();
    let agents = net.agents();
    let eye_n = DMatrix::<f64>::identity(n, n);
    let eye_agents = DMatrix::<f64>::identity(agents, agents);
    Ok(eye_agents.kronecker(model.a()) - expanded.matrix.kronecker(&eye_n))
}
