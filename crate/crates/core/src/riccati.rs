//! Stabilizing solutions of the two algebraic Riccati equations used by the
//! protocols, plus the observer gain and a Hurwitz test.
//!
//! * scheduled: `AᵀP + PA − PBBᵀP + ρP = 0`, solved as the zero-state-weight
//!   equation for the shifted matrix `A + (ρ/2)I`;
//! * low gain: `AᵀP + PA − PBBᵀP + εI = 0`.
//!
//! Both go through [`solve_care`]: a stable-invariant-subspace estimate of the
//! Hamiltonian (matrix sign function) followed by Newton–Kleinman refinement.

use alloc::format;
use alloc::string::ToString;

use nalgebra::{DMatrix, SVD};

use crate::error::{Error, Result};
use crate::linalg::{self, solve_lyapunov, symmetrize};
use crate::model::{check_assumption, AgentModel};

/// Relative residual tolerance: `‖R(P)‖ ≤ RESIDUAL_TOLERANCE·(1 + ‖P‖²)`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-9;

/// Smallest admissible eigenvalue of a "positive semidefinite" solution.
pub const PSD_TOLERANCE: f64 = -1e-8;

/// `is_hurwitz` requires every eigenvalue to have real part below `-HURWITZ_MARGIN`.
pub const HURWITZ_MARGIN: f64 = 1e-9;

const MAX_NEWTON_STEPS: usize = 20;
const MAX_SIGN_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiccatiKind {
    Scheduled { rho: f64 },
    LowGain { epsilon: f64 },
}

impl RiccatiKind {
    pub fn parameter(&self) -> f64 {
        match *self {
            RiccatiKind::Scheduled { rho } => rho,
            RiccatiKind::LowGain { epsilon } => epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub kind: RiccatiKind,
    pub residual_norm: f64,
    /// Tolerance the residual was certified against.
    pub residual_tolerance: f64,
    pub min_eigenvalue: f64,
    /// Spectral abscissa of the certified closed-loop matrix.
    pub closed_loop_abscissa: f64,
    pub closed_loop_stable: bool,
}

impl RiccatiSolution {
    /// Feedback matrix `BᵀP`, so that `u = −BᵀP χ`.
    pub fn feedback(&self, model: &AgentModel) -> DMatrix<f64> {
        model.b().transpose() * &self.p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverGain {
    pub k: DMatrix<f64>,
    /// Spectral abscissa of `A − KC`.
    pub abscissa: f64,
}

/// `max Re eig(M) < −1e−9`.
pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    linalg::spectral_abscissa(m).is_some_and(|s| s < -HURWITZ_MARGIN)
}

/// Residual `aᵀP + Pa − PSP + Q`.
pub fn care_residual(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    q: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    a.transpose() * p + p * a - p * s * p + q
}

/// Stabilizing solution of `aᵀP + Pa − PSP + Q = 0` for symmetric `S, Q ⪰ 0`.
///
/// The returned matrix makes `a − SP` stable whenever the Hamiltonian has no
/// eigenvalues on the imaginary axis; callers certify that separately.
pub fn solve_care(a: &DMatrix<f64>, s: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p0 = sign_function_estimate(a, s, q)?;
    Ok(newton_refine(a, s, q, p0))
}

fn sign_function_estimate(a: &DMatrix<f64>, s: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-s));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let mut z = h;
    let mut scale = true;
    let mut converged = false;
    for _ in 0..MAX_SIGN_STEPS {
        let lu = z.clone().lu();
        let Some(z_inv) = lu.try_inverse() else {
            return Err(Error::Riccati {
                reason: "Hamiltonian is singular (eigenvalue on the imaginary axis)".to_string(),
                condition: f64::INFINITY,
            });
        };
        let c = if scale {
            // |det Z|^{-1/(2n)} computed in log space
            let u = lu.u();
            let log_det: f64 = u.diagonal().iter().map(|d| libm::log(d.abs())).sum();
            libm::exp(-log_det / (2 * n) as f64)
        } else {
            1.0
        };
        let next = (&z * c + z_inv / c) * 0.5;
        let change = (&next - &z).abs().sum();
        let size = next.abs().sum();
        z = next;
        if !size.is_finite() {
            break;
        }
        if change <= 1e-2 * size {
            scale = false;
        }
        if change <= 1e-13 * size {
            converged = true;
            break;
        }
    }
    if !converged || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Riccati {
            reason: "matrix sign iteration did not converge".to_string(),
            condition: f64::INFINITY,
        });
    }

    // [W12; W22 + I] P = −[W11 + I; W21]
    let mut lhs = DMatrix::<f64>::zeros(2 * n, n);
    let mut rhs = DMatrix::<f64>::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n))
        .copy_from(&(z.view((n, n), (n, n)) + DMatrix::<f64>::identity(n, n)));
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(z.view((0, 0), (n, n)) + DMatrix::<f64>::identity(n, n))));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-z.view((n, 0), (n, n))));

    let svd = SVD::new(lhs, true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < 1e14) {
        return Err(Error::Riccati {
            reason: "stable invariant subspace is ill-conditioned".to_string(),
            condition,
        });
    }
    let p = svd.solve(&rhs, 0.0).map_err(|e| Error::Riccati {
        reason: format!("least-squares extraction failed: {e}"),
        condition,
    })?;
    Ok(symmetrize(&p))
}

/// Newton–Kleinman defect correction from a stabilizing initial guess, run
/// until the residual stops decreasing. Stopping at the certification
/// tolerance instead leaves `P` too coarse at small `ρ` when `A` has repeated
/// Jordan blocks on the imaginary axis: the closed-loop spectrum then drifts
/// across the axis.
fn newton_refine(a: &DMatrix<f64>, s: &DMatrix<f64>, q: &DMatrix<f64>, p0: DMatrix<f64>) -> DMatrix<f64> {
    let mut p = p0;
    let mut res = care_residual(a, s, q, &p);
    let mut res_norm = res.norm();
    for _ in 0..MAX_NEWTON_STEPS {
        if res_norm == 0.0 {
            break;
        }
        let closed = a - s * &p;
        let Some(delta) = solve_lyapunov(&closed, &res) else {
            break;
        };
        let candidate = symmetrize(&(&p + delta));
        let cand_res = care_residual(a, s, q, &candidate);
        let cand_norm = cand_res.norm();
        if !cand_norm.is_finite() {
            break;
        }
        if cand_norm >= res_norm {
            break;
        }
        p = candidate;
        res = cand_res;
        res_norm = cand_norm;
    }
    p
}

fn residual_tolerance(p: &DMatrix<f64>) -> f64 {
    let norm = linalg::symmetric_norm(p);
    RESIDUAL_TOLERANCE * (1.0 + norm * norm)
}

/// Newton refinement of the scheduled equation at `rho` from a guess that
/// stabilizes `A + (ρ/2)I − BBᵀP`. Used for on-demand solves between grid
/// points; only the residual is certified.
pub(crate) fn refine_scheduled(model: &AgentModel, rho: f64, p_start: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (a_s, s, q) = scheduled_data(model, rho);
    let p = newton_refine(&a_s, &s, &q, p_start.clone());
    let residual = care_residual(&a_s, &s, &q, &p).norm();
    (residual <= residual_tolerance(&p)).then_some(p)
}

fn scheduled_data(model: &AgentModel, rho: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = model.n();
    let a_s = model.a() + DMatrix::<f64>::identity(n, n) * (rho / 2.0);
    let s = model.b() * model.b().transpose();
    (a_s, s, DMatrix::zeros(n, n))
}

fn check_parameter(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter {
            name,
            value,
            range: "(0, 1]",
        })
    }
}

fn certify(
    model: &AgentModel,
    kind: RiccatiKind,
    p: DMatrix<f64>,
    closed_loop: DMatrix<f64>,
) -> Result<RiccatiSolution> {
    let n = model.n();
    let bbt = model.b() * model.b().transpose();
    let q = match kind {
        RiccatiKind::Scheduled { rho } => &p * rho,
        RiccatiKind::LowGain { epsilon } => DMatrix::<f64>::identity(n, n) * epsilon,
    };
    let residual_norm = care_residual(model.a(), &bbt, &q, &p).norm();
    let residual_tolerance = residual_tolerance(&p);
    let min_eigenvalue = linalg::symmetric_eigenvalues(&p)[0];
    let closed_loop_abscissa = linalg::spectral_abscissa(&closed_loop).ok_or(Error::Eigen {
        what: "Riccati closed loop",
    })?;
    let closed_loop_stable = closed_loop_abscissa < -HURWITZ_MARGIN;
    if !(residual_norm <= residual_tolerance) {
        return Err(Error::Riccati {
            reason: format!("residual {residual_norm:e} exceeds tolerance {residual_tolerance:e}"),
            condition: f64::NAN,
        });
    }
    if min_eigenvalue < PSD_TOLERANCE {
        return Err(Error::Riccati {
            reason: format!("solution is indefinite (min eigenvalue {min_eigenvalue:e})"),
            condition: f64::NAN,
        });
    }
    if !closed_loop_stable {
        return Err(Error::NotStabilizing {
            abscissa: closed_loop_abscissa,
        });
    }
    Ok(RiccatiSolution {
        p,
        kind,
        residual_norm,
        residual_tolerance,
        min_eigenvalue,
        closed_loop_abscissa,
        closed_loop_stable,
    })
}

/// Stabilizing positive semidefinite solution of `AᵀP + PA − PBBᵀP + ρP = 0`.
///
/// For small `ρ` the stable subspace of the Hamiltonian becomes too badly
/// scaled to extract directly; the solve then continues from `ρ = 1` down a
/// halving sequence, refining each step from the previous solution.
pub fn solve_scheduled_are(model: &AgentModel, rho: f64) -> Result<RiccatiSolution> {
    check_parameter("rho", rho)?;
    match solve_scheduled_direct(model, rho) {
        Ok(sol) => Ok(sol),
        Err(direct_err) => {
            let mut current = solve_scheduled_direct(model, 1.0).map_err(|_| direct_err.clone())?;
            let mut r = 1.0;
            while r * 0.5 > rho {
                r *= 0.5;
                current = continue_scheduled_are(model, r, &current)?;
            }
            continue_scheduled_are(model, rho, &current)
        }
    }
}

fn solve_scheduled_direct(model: &AgentModel, rho: f64) -> Result<RiccatiSolution> {
    let (a_s, s, q) = scheduled_data(model, rho);
    let p = solve_care(&a_s, &s, &q)?;
    let closed = &a_s - &s * &p;
    certify(model, RiccatiKind::Scheduled { rho }, p, closed)
}

/// Scheduled solution at `rho` refined from a neighbouring solution instead of
/// a fresh Hamiltonian solve, with the full certificate.
pub fn continue_scheduled_are(model: &AgentModel, rho: f64, from: &RiccatiSolution) -> Result<RiccatiSolution> {
    check_parameter("rho", rho)?;
    let (a_s, s, q) = scheduled_data(model, rho);
    let p = newton_refine(&a_s, &s, &q, from.p.clone());
    let closed = &a_s - &s * &p;
    certify(model, RiccatiKind::Scheduled { rho }, p, closed)
}

/// Stabilizing positive definite solution of `AᵀP + PA − PBBᵀP + εI = 0`.
pub fn solve_lowgain_are(model: &AgentModel, epsilon: f64) -> Result<RiccatiSolution> {
    check_parameter("epsilon", epsilon)?;
    let n = model.n();
    let s = model.b() * model.b().transpose();
    let q = DMatrix::<f64>::identity(n, n) * epsilon;
    let p = solve_care(model.a(), &s, &q)?;
    let closed = model.a() - &s * &p;
    certify(model, RiccatiKind::LowGain { epsilon }, p, closed)
}

/// `K = P_o Cᵀ` from the dual equation `AP_o + P_oAᵀ − P_oCᵀCP_o + I = 0`.
pub fn design_observer_gain(model: &AgentModel) -> Result<ObserverGain> {
    let report = check_assumption(model)?;
    if !report.detectable {
        return Err(Error::NotDetectable);
    }
    let n = model.n();
    let at = model.a().transpose();
    let s = model.c().transpose() * model.c();
    let p = solve_care(&at, &s, &DMatrix::identity(n, n))?;
    let k = &p * model.c().transpose();
    let closed = model.a() - &k * model.c();
    let abscissa = linalg::spectral_abscissa(&closed).ok_or(Error::Eigen { what: "A - KC" })?;
    if !(abscissa < -HURWITZ_MARGIN) {
        return Err(Error::NotStabilizing { abscissa });
    }
    Ok(ObserverGain { k, abscissa })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::random_validated_model;
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: f64, b: f64, c: f64) -> AgentModel {
        AgentModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, c),
        )
        .unwrap()
    }

    fn double_integrator() -> AgentModel {
        AgentModel::integrator_chain(2)
    }

    #[test]
    fn scheduled_scalar_integrator_is_rho() {
        let sol = solve_scheduled_are(&scalar(0.0, 1.0, 1.0), 0.5).unwrap();
        assert!((sol.p[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn scheduled_scalar_stable_is_zero() {
        let sol = solve_scheduled_are(&scalar(-1.0, 1.0, 1.0), 0.5).unwrap();
        assert!(sol.p[(0, 0)].abs() < 1e-12);
        assert!(sol.closed_loop_stable);
    }

    #[test]
    fn scheduled_double_integrator_certificates() {
        let model = double_integrator();
        let sol = solve_scheduled_are(&model, 1.0).unwrap();
        assert!(sol.residual_norm < 1e-9);
        assert!(sol.min_eigenvalue > 0.0);
        let closed = model.a() + DMatrix::identity(2, 2) * 0.5 - model.b() * model.b().transpose() * &sol.p;
        assert!(is_hurwitz(&closed));
        // Oracle: plain Newton from a hand-picked stabilizing gain.
        let (a_s, s, q) = scheduled_data(&model, 1.0);
        let p_init = DMatrix::from_row_slice(2, 2, &[10.0, 5.0, 5.0, 10.0]);
        assert!(is_hurwitz(&(&a_s - &s * &p_init)));
        let oracle = newton_refine(&a_s, &s, &q, p_init);
        assert!((&oracle - &sol.p).norm() < 1e-9);
    }

    /// `P_ρ = ρ^{2n−1} D⁻¹ P_1 D⁻¹` with `D = diag(1, ρ, …, ρ^{n−1})` for a chain
    /// of `n` integrators; `P_1` for the triple integrator is the integer
    /// matrix below (closed loop `(s + 1/2)³`).
    #[test]
    fn scheduled_integrator_chain_scaling_law() {
        let model = AgentModel::integrator_chain(3);
        let p1 = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 1.0, 2.0, 5.0, 3.0, 1.0, 3.0, 3.0]);
        let sol1 = solve_scheduled_are(&model, 1.0).unwrap();
        assert!((&sol1.p - &p1).amax() < 1e-12);
        for k in [1, 3, 7, 12, 16, 20] {
            let rho = libm::pow(2.0, -(k as f64));
            let exact = DMatrix::from_fn(3, 3, |i, j| {
                p1[(i, j)] * libm::pow(rho, 5.0 - i as f64 - j as f64)
            });
            let sol = solve_scheduled_are(&model, rho).unwrap();
            let rel = (&sol.p - &exact).component_div(&exact).amax();
            assert!(rel < 1e-10, "rho = 2^-{k}: relative error {rel:e}");
            assert!(sol.closed_loop_stable);
        }
    }

    #[test]
    fn scheduled_rejects_out_of_range_rho() {
        let model = double_integrator();
        for rho in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(solve_scheduled_are(&model, rho), Err(Error::Parameter { .. })));
        }
    }

    #[test]
    fn lowgain_scalar_closed_forms() {
        let sol = solve_lowgain_are(&scalar(0.0, 1.0, 1.0), 0.25).unwrap();
        assert!((sol.p[(0, 0)] - 0.5).abs() < 1e-12);
        let sol = solve_lowgain_are(&scalar(0.0, 1.0, 1.0), 1.0).unwrap();
        assert!((sol.p[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lowgain_triple_integrator_certificates() {
        let model = AgentModel::integrator_chain(3);
        let sol = solve_lowgain_are(&model, 0.01).unwrap();
        assert!(sol.residual_norm < 1e-9);
        assert!(sol.min_eigenvalue > 0.0);
        assert!(is_hurwitz(&(model.a() - model.b() * sol.feedback(&model))));
    }

    #[test]
    fn lowgain_norm_shrinks_with_epsilon() {
        let model = AgentModel::integrator_chain(3);
        let norms: Vec<f64> = (0..12)
            .map(|k| {
                let eps = libm::pow(10.0, -(k as f64) / 2.0);
                linalg::symmetric_norm(&solve_lowgain_are(&model, eps).unwrap().p)
            })
            .collect();
        for w in norms.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        // ‖P_ε‖ ~ ε^{1/6} for the triple integrator
        assert!(norms[11] < 0.2 * norms[0]);
        let tiny = solve_lowgain_are(&model, 1e-12).unwrap();
        assert!(linalg::symmetric_norm(&tiny.p) < 2e-2 * norms[0]);
    }

    #[test]
    fn observer_gain_scalar() {
        let gain = design_observer_gain(&scalar(0.0, 1.0, 1.0)).unwrap();
        assert!((gain.k[(0, 0)] - 1.0).abs() < 1e-12);
        let gain = design_observer_gain(&scalar(-1.0, 1.0, 1.0)).unwrap();
        assert!(gain.k[(0, 0)] >= 0.0);
        assert!(-1.0 - gain.k[(0, 0)] < 0.0);
    }

    #[test]
    fn observer_gain_triple_integrator() {
        let model = AgentModel::integrator_chain(3);
        let gain = design_observer_gain(&model).unwrap();
        assert!(gain.abscissa < -0.1);
        assert!(is_hurwitz(&(model.a() - &gain.k * model.c())));
    }

    #[test]
    fn observer_gain_rejects_undetectable() {
        let model = AgentModel::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        )
        .unwrap();
        assert_eq!(design_observer_gain(&model), Err(Error::NotDetectable));
    }

    #[test]
    fn observer_gain_is_dual_lowgain_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let model = random_validated_model(&mut rng, 4, 1, 2);
            let dual = AgentModel::new(
                model.a().transpose(),
                model.c().transpose(),
                model.b().transpose(),
            )
            .unwrap();
            let k = design_observer_gain(&model).unwrap().k;
            let dual_sol = solve_lowgain_are(&dual, 1.0).unwrap();
            let k_dual = dual_sol.feedback(&dual).transpose();
            assert!((&k - &k_dual).norm() < 1e-9 * (1.0 + k.norm()));
        }
    }

    #[test]
    fn hurwitz_examples() {
        assert!(is_hurwitz(&DMatrix::from_element(1, 1, -1.0)));
        assert!(!is_hurwitz(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])));
        assert!(is_hurwitz(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -1.0])));
    }

    #[test]
    fn random_models_certify_both_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..30 {
            let n = 1 + trial % 6;
            let model = random_validated_model(&mut rng, n, 1 + trial % 2, 1 + (trial / 2) % 2);
            let rho = 0.05 + 0.95 * ((trial * 7) % 10) as f64 / 10.0;
            let sched = solve_scheduled_are(&model, rho).unwrap();
            assert!(sched.residual_norm <= sched.residual_tolerance);
            let low = solve_lowgain_are(&model, rho).unwrap();
            assert!(low.residual_norm <= low.residual_tolerance);
            assert!(low.min_eigenvalue > 0.0);
        }
    }
}
