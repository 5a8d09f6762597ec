//! Small dense linear-algebra helpers shared by the design and analysis code.
//!
//! Everything here works on `nalgebra` dynamic matrices and is sized for
//! agent models of a few dozen states at most.

use alloc::vec::Vec;

use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen, SVD};

pub type Complex64 = Complex<f64>;

const RADIX: f64 = 2.0;

/// Parlett–Reinsch diagonal balancing. Returns `D⁻¹ M D` with `D` a diagonal
/// of powers of two, which leaves the spectrum unchanged (up to rounding in
/// the last bit) and equalises row and column norms.
pub fn balance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = m.clone();
    let mut converged = false;
    let mut sweeps = 0;
    while !converged && sweeps < 100 {
        converged = true;
        sweeps += 1;
        for i in 0..n {
            let mut col = 0.0;
            let mut row = 0.0;
            for j in 0..n {
                if j != i {
                    col += out[(j, i)].abs();
                    row += out[(i, j)].abs();
                }
            }
            if col == 0.0 || row == 0.0 {
                continue;
            }
            let total = col + row;
            let mut f = 1.0;
            let mut c = col;
            let mut g = row / RADIX;
            while c < g {
                f *= RADIX;
                c *= RADIX * RADIX;
            }
            g = row * RADIX;
            while c > g {
                f /= RADIX;
                c /= RADIX * RADIX;
            }
            if (col * f + row / f) < 0.95 * total {
                converged = false;
                for j in 0..n {
                    out[(i, j)] /= f;
                }
                for j in 0..n {
                    out[(j, i)] *= f;
                }
            }
        }
    }
    out
}

/// Eigenvalues of a real square matrix (balanced real Schur form).
///
/// Returns `None` when the QR iteration fails to converge.
pub fn eigenvalues(m: &DMatrix<f64>) -> Option<Vec<Complex64>> {
    let n = m.nrows();
    if n == 0 {
        return Some(Vec::new());
    }
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let balanced = balance(m);
    let schur = Schur::try_new(balanced, f64::EPSILON, 1000 * n.max(4))?;
    Some(schur.complex_eigenvalues().iter().copied().collect())
}

/// Largest real part over the spectrum of `m`; `None` on eigen failure.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Option<f64> {
    let eigs = eigenvalues(m)?;
    Some(eigs.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

pub fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(p: &DMatrix<f64>) -> Vec<f64> {
    let mut eigs: Vec<f64> = SymmetricEigen::new(symmetrize(p)).eigenvalues.iter().copied().collect();
    eigs.sort_by(|a, b| a.total_cmp(b));
    eigs
}

/// Spectral norm of a symmetric matrix.
pub fn symmetric_norm(p: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(p)
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Induced ∞-norm (maximum absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Solves the Lyapunov equation `Aᵀ X + X A + Q = 0` through its Kronecker
/// form. Returns `None` when `A` and `-A` share an eigenvalue (singular
/// operator).
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    // vec(AᵀX) = (I ⊗ Aᵀ) vec X, vec(XA) = (Aᵀ ⊗ I) vec X for column-major vec.
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let lu = op.lu();
    let sol = lu.solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Some(symmetrize(&x))
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = inf_norm(m);
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let x = m * scale;
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=20 {
        term = &term * &x / k as f64;
        sum += &term;
        if term.amax() <= f64::EPSILON * sum.amax() * 1e-2 {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Numerical rank of a complex matrix by singular values against an absolute
/// threshold.
pub fn complex_rank(m: &DMatrix<Complex64>, threshold: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let svd = SVD::new(m.clone(), false, false);
    svd.singular_values.iter().filter(|s| **s > threshold).count()
}

/// ∞-norm of a complex matrix.
pub fn complex_inf_norm(m: &DMatrix<Complex64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}
