//! Agent dynamics `ẋ = Ax + Bσ(u)`, `y = Cx`, the exosystem and the
//! standing assumption on `(A, B, C)`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, Complex64};

/// Tolerance for membership of an eigenvalue in the closed left half plane.
pub const EIGEN_TOLERANCE: f64 = 1e-8;

/// Relative singular-value threshold used by the PBH rank tests.
pub const PBH_RANK_TOLERANCE: f64 = 1e-9;

/// The triple `(A, B, C)` shared by every agent and by the exosystem.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
}

impl AgentModel {
    /// Checks that `A` is n×n, `B` is n×m and `C` is q×n with finite entries.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Err(Error::Empty { field: "A" });
        }
        if a.ncols() != n {
            return Err(Error::Dimension {
                field: "A",
                expected: (n, n),
                found: a.shape(),
            });
        }
        if b.ncols() == 0 {
            return Err(Error::Empty { field: "B" });
        }
        if b.nrows() != n {
            return Err(Error::Dimension {
                field: "B",
                expected: (n, b.ncols()),
                found: b.shape(),
            });
        }
        if c.nrows() == 0 {
            return Err(Error::Empty { field: "C" });
        }
        if c.ncols() != n {
            return Err(Error::Dimension {
                field: "C",
                expected: (c.nrows(), n),
                found: c.shape(),
            });
        }
        for (field, m) in [("A", &a), ("B", &b), ("C", &c)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { field });
            }
        }
        Ok(Self { a, b, c })
    }

    /// Chain of `n` integrators driven at the last state, measured at the first.
    pub fn integrator_chain(n: usize) -> Self {
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n.saturating_sub(1) {
            a[(i, i + 1)] = 1.0;
        }
        let mut b = DMatrix::zeros(n, 1);
        b[(n - 1, 0)] = 1.0;
        let mut c = DMatrix::zeros(1, n);
        c[(0, 0)] = 1.0;
        Self { a, b, c }
    }

    /// Same model with `C = I`, the full-state coupling case.
    pub fn with_full_state_output(&self) -> Self {
        let n = self.n();
        Self {
            a: self.a.clone(),
            b: self.b.clone(),
            c: DMatrix::identity(n, n),
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Output dimension.
    pub fn q(&self) -> usize {
        self.c.nrows()
    }

    /// FNV-1a hash over the bit patterns of `A`, `B` and `C`.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for m in [&self.a, &self.b, &self.c] {
            h.write_usize(m.nrows());
            h.write_usize(m.ncols());
            for v in m.iter() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write_u64(&mut self, v: u64) {
        for byte in v.to_le_bytes() {
            self.0 ^= u64::from(byte);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn write_usize(&mut self, v: usize) {
        self.write_u64(v as u64);
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Reference generator `ẋ_r = A x_r`, `y_r = C x_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExosystemState {
    pub x_r: DVector<f64>,
    pub y_r: DVector<f64>,
}

impl ExosystemState {
    pub fn new(model: &AgentModel, x_r: DVector<f64>) -> Result<Self> {
        if x_r.len() != model.n() {
            return Err(Error::StateLength {
                expected: model.n(),
                found: x_r.len(),
            });
        }
        let y_r = model.c() * &x_r;
        Ok(Self { x_r, y_r })
    }

    /// Exact flow `e^{At} x_r` of the unforced exosystem.
    pub fn advance(&self, model: &AgentModel, t: f64) -> Self {
        let x_r = linalg::expm(&(model.a() * t)) * &self.x_r;
        let y_r = model.c() * &x_r;
        Self { x_r, y_r }
    }
}

/// `sat(w) = sgn(w)·min(1, |w|)` applied componentwise.
pub fn saturate(v: &DVector<f64>) -> DVector<f64> {
    v.map(sat)
}

#[inline]
pub fn sat(w: f64) -> f64 {
    w.clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub eigenvalues: Vec<Complex64>,
    pub max_real_part: f64,
    pub stabilizable: bool,
    pub detectable: bool,
    pub pass: bool,
}

/// Verifies that `A` has no eigenvalue in the open right half plane and that
/// `(A, B)` is stabilizable and `(A, C)` detectable (PBH tests at every
/// eigenvalue with `Re λ ≥ -τ`).
pub fn check_assumption(model: &AgentModel) -> Result<AssumptionReport> {
    let eigenvalues = linalg::eigenvalues(model.a()).ok_or(Error::Eigen { what: "A" })?;
    let max_real_part = eigenvalues
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let critical: Vec<Complex64> = eigenvalues
        .iter()
        .copied()
        .filter(|z| z.re >= -EIGEN_TOLERANCE)
        .collect();
    let stabilizable = critical.iter().all(|&l| pbh_full_rank(model.a(), model.b(), l, false));
    let detectable = critical.iter().all(|&l| pbh_full_rank(model.a(), model.c(), l, true));
    let pass = max_real_part <= EIGEN_TOLERANCE && stabilizable && detectable;
    Ok(AssumptionReport {
        eigenvalues,
        max_real_part,
        stabilizable,
        detectable,
        pass,
    })
}

/// `rank [A − λI, B] = n` (or `rank [A − λI; C] = n` when `dual`).
fn pbh_full_rank(a: &DMatrix<f64>, other: &DMatrix<f64>, lambda: Complex64, dual: bool) -> bool {
    let n = a.nrows();
    let shifted = linalg::to_complex(a) - DMatrix::<Complex64>::identity(n, n) * lambda;
    let other = linalg::to_complex(other);
    let stacked = if dual {
        let mut m = DMatrix::<Complex64>::zeros(n + other.nrows(), n);
        m.view_mut((0, 0), (n, n)).copy_from(&shifted);
        m.view_mut((n, 0), (other.nrows(), n)).copy_from(&other);
        m
    } else {
        let mut m = DMatrix::<Complex64>::zeros(n, n + other.ncols());
        m.view_mut((0, 0), (n, n)).copy_from(&shifted);
        m.view_mut((0, n), (n, other.ncols())).copy_from(&other);
        m
    };
    let threshold = PBH_RANK_TOLERANCE * linalg::complex_inf_norm(&stacked);
    linalg::complex_rank(&stacked, threshold) == n
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn saturate_identity_inside_box() {
        assert_eq!(saturate(&DVector::from_vec(vec![0.5])), DVector::from_vec(vec![0.5]));
    }

    #[test]
    fn saturate_clips_to_unit_box() {
        let out = saturate(&DVector::from_vec(vec![2.0, -3.0]));
        assert_eq!(out, DVector::from_vec(vec![1.0, -1.0]));
    }

    #[test]
    fn saturate_boundary_and_zero() {
        let v = DVector::from_vec(vec![0.0, 1.0, -1.0]);
        assert_eq!(saturate(&v), v);
    }

    proptest! {
        #[test]
        fn saturate_is_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..6)) {
            let v = DVector::from_vec(v);
            let once = saturate(&v);
            prop_assert_eq!(saturate(&once), once);
        }

        #[test]
        fn saturate_is_one_lipschitz(
            pair in (1usize..6).prop_flat_map(|k| (
                proptest::collection::vec(-5.0f64..5.0, k),
                proptest::collection::vec(-5.0f64..5.0, k),
            ))
        ) {
            let (a, b) = (DVector::from_vec(pair.0), DVector::from_vec(pair.1));
            let lhs = (saturate(&a) - saturate(&b)).amax();
            prop_assert!(lhs <= (a - b).amax() + 1e-15);
        }

        #[test]
        fn saturate_is_identity_iff_inside(v in proptest::collection::vec(-2.0f64..2.0, 1..6)) {
            let v = DVector::from_vec(v);
            prop_assert_eq!(saturate(&v) == v, v.amax() <= 1.0);
        }
    }

    #[test]
    fn triple_integrator_passes() {
        let model = AgentModel::integrator_chain(3);
        let report = check_assumption(&model).unwrap();
        assert!(report.pass);
        assert!(report.eigenvalues.iter().all(|z| z.re == 0.0 && z.im == 0.0));
        assert_eq!(report.max_real_part, 0.0);
    }

    #[test]
    fn unstable_scalar_fails() {
        let model = AgentModel::new(m(1, 1, &[1.0]), m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap();
        let report = check_assumption(&model).unwrap();
        assert!(!report.pass);
        assert_eq!(report.max_real_part, 1.0);
        assert!(report.stabilizable && report.detectable);
    }

    #[test]
    fn zero_input_double_integrator_is_unstabilizable() {
        let model = AgentModel::new(
            m(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            m(2, 1, &[0.0, 0.0]),
            m(1, 2, &[1.0, 0.0]),
        )
        .unwrap();
        let report = check_assumption(&model).unwrap();
        assert!(!report.stabilizable);
        assert!(report.detectable);
        assert!(!report.pass);
    }

    #[test]
    fn velocity_output_is_undetectable() {
        let model = AgentModel::new(
            m(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            m(2, 1, &[0.0, 1.0]),
            m(1, 2, &[0.0, 1.0]),
        )
        .unwrap();
        assert!(!check_assumption(&model).unwrap().detectable);
    }

    #[test]
    fn stable_uncontrollable_mode_is_fine() {
        let model = AgentModel::new(
            m(2, 2, &[0.0, 0.0, 0.0, -1.0]),
            m(2, 1, &[1.0, 0.0]),
            m(1, 2, &[1.0, 0.0]),
        )
        .unwrap();
        assert!(check_assumption(&model).unwrap().pass);
    }

    #[test]
    fn dimension_errors_name_the_field() {
        let err = AgentModel::new(m(2, 2, &[0.0; 4]), m(3, 1, &[0.0; 3]), m(1, 2, &[1.0, 0.0]))
            .unwrap_err();
        assert!(matches!(err, Error::Dimension { field: "B", .. }));
        let err = AgentModel::new(m(2, 2, &[0.0; 4]), m(2, 1, &[0.0; 2]), m(1, 3, &[1.0, 0.0, 0.0]))
            .unwrap_err();
        assert!(matches!(err, Error::Dimension { field: "C", .. }));
        let err = AgentModel::new(m(2, 3, &[0.0; 6]), m(2, 1, &[0.0; 2]), m(1, 2, &[1.0, 0.0]))
            .unwrap_err();
        assert!(matches!(err, Error::Dimension { field: "A", .. }));
    }

    #[test]
    fn exosystem_flow_matches_polynomial_solution() {
        let model = AgentModel::integrator_chain(3);
        let exo = ExosystemState::new(&model, DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let later = exo.advance(&model, 2.0);
        // p + v t + a t²/2, v + a t, a
        assert!((later.x_r[0] - (1.0 + 4.0 + 6.0)).abs() < 1e-12);
        assert!((later.x_r[1] - 8.0).abs() < 1e-12);
        assert_eq!(later.x_r[2], 3.0);
        assert_eq!(later.y_r[0], later.x_r[0]);
    }
}
