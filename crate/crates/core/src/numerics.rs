//! Dense linear algebra and fixed-step integration kernel.
//!
//! Everything here works on small matrices (at most a few dozen rows), so the
//! algorithms favour simplicity: cyclic Jacobi for symmetric eigenvalues,
//! classical RK4 for ODEs and an SVD-backed least-squares solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance (times the largest singular value) below which a
/// singular value counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 64;

/// Dense symmetric matrix. Construction symmetrizes the input with `(M + Mᵀ)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::InvalidInput(format!(
                "symmetric matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { t: f64::NAN });
        }
        Ok(Self::symmetrized(m))
    }

    /// Symmetrizes without validation. Callers guarantee a square input.
    pub(crate) fn symmetrized(m: DMatrix<f64>) -> Self {
        let sym = (&m + m.transpose()) * 0.5;
        SymMatrix(sym)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        SymMatrix(DMatrix::identity(n, n) * s)
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn scale(&self, s: f64) -> Self {
        SymMatrix(&self.0 * s)
    }

    /// All eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        jacobi_eigenvalues(&self.0)
    }

    pub fn eig_extrema(&self) -> Result<(f64, f64)> {
        sym_eig_extrema(self)
    }

    pub fn is_pd(&self) -> bool {
        matches!(self.eig_extrema(), Ok((lo, _)) if lo > 0.0)
    }

    /// Positive semidefinite up to `tol` times the largest eigenvalue magnitude.
    pub fn is_psd(&self, tol: f64) -> bool {
        match self.eig_extrema() {
            Ok((lo, hi)) => lo >= -tol * hi.abs().max(lo.abs()).max(1.0),
            Err(_) => false,
        }
    }

    /// Solves `self · x = b` through a Cholesky factorization.
    pub fn solve(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        let chol = self.0.clone().cholesky()?;
        Some(chol.solve(b))
    }
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eig_extrema(m: &SymMatrix) -> Result<(f64, f64)> {
    let ev = jacobi_eigenvalues(&m.0)?;
    Ok((ev[0], ev[ev.len() - 1]))
}

/// Cyclic Jacobi eigenvalue iteration on a symmetric matrix.
///
/// Returns the eigenvalues sorted ascending. Only the symmetric part of the
/// input is used.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = m.nrows();
    if n == 0 || n != m.ncols() {
        return Err(Error::InvalidInput("eigenvalues need a square, non-empty matrix".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { t: f64::NAN });
    }
    let mut a = (m + m.transpose()) * 0.5;
    let scale = a.norm();
    if scale == 0.0 {
        return Ok(vec![0.0; n]);
    }

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= f64::EPSILON * scale * 1e-3 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
            }
        }
    }

    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    Ok(ev)
}

/// Spectral norm `sqrt(λmax(MᵀM))`.
pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    let ev = jacobi_eigenvalues(&(m.transpose() * m))?;
    Ok(ev[ev.len() - 1].max(0.0).sqrt())
}

/// One classical fourth-order Runge–Kutta step of `ṡ = f(t, s)`.
pub fn rk4_step<F>(mut f: F, t: f64, s: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    try_rk4_step(|t, s| Ok(f(t, s)), t, s, h)
}

/// RK4 step for fallible right-hand sides.
pub fn try_rk4_step<F>(mut f: F, t: f64, s: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidInput(format!("step size must be positive, got {h}")));
    }
    let half = 0.5 * h;
    let k1 = f(t, s)?;
    check_finite(&k1, t)?;
    let k2 = f(t + half, &(s + &k1 * half))?;
    check_finite(&k2, t + half)?;
    let k3 = f(t + half, &(s + &k2 * half))?;
    check_finite(&k3, t + half)?;
    let k4 = f(t + h, &(s + &k3 * h))?;
    check_finite(&k4, t + h)?;
    let next = s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    check_finite(&next, t + h)?;
    Ok(next)
}

fn check_finite(v: &DVector<f64>, t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { t })
    }
}

/// Result of [`solve_least_squares`].
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub x: DVector<f64>,
    pub residual_norm: f64,
    pub rank: usize,
}

/// Minimum-norm least-squares solution of `A x ≈ b`.
///
/// Singular values below `RANK_TOLERANCE · σmax` are discarded, which also
/// defines the reported numerical rank.
pub fn solve_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<LeastSquares> {
    if a.nrows() == 0 || a.ncols() == 0 || a.nrows() != b.len() {
        return Err(Error::InvalidInput(format!(
            "least squares needs a non-empty {}x{} system with matching rhs of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = RANK_TOLERANCE * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let x = if rank == 0 {
        DVector::zeros(a.ncols())
    } else {
        svd.solve(b, tol).map_err(|e| Error::InvalidInput(e.to_string()))?
    };
    let residual_norm = (a * &x - b).norm();
    Ok(LeastSquares { x, residual_norm, rank })
}

/// Numerical rank at `RANK_TOLERANCE · σmax`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOLERANCE * smax).count()
}

/// Flattens a matrix column-major into a vector (RK4 state layout).
pub(crate) fn flatten(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub(crate) fn unflatten(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v)
}

/// Orthogonal projector `I − y yᵀ` onto the plane orthogonal to unit vector `y`.
pub fn projector(y: &DVector<f64>) -> DMatrix<f64> {
    let n = y.len();
    DMatrix::identity(n, n) - y * y.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Characteristic polynomial coefficients by Faddeev–LeVerrier,
    /// highest degree first (monic).
    fn char_poly(a: &DMatrix<f64>) -> Vec<f64> {
        let n = a.nrows();
        let mut coeffs = vec![1.0];
        let mut m = DMatrix::<f64>::zeros(n, n);
        let id = DMatrix::<f64>::identity(n, n);
        let mut c = 1.0;
        for k in 1..=n {
            m = a * &m + &id * c;
            let am = a * &m;
            c = -am.trace() / k as f64;
            coeffs.push(c);
        }
        coeffs
    }

    fn horner(p: &[f64], x: f64) -> f64 {
        p.iter().fold(0.0, |acc, &c| acc * x + c)
    }

    /// Real roots by sign-change bracketing and bisection.
    fn bracket_roots(p: &[f64], lo: f64, hi: f64, cells: usize) -> Vec<f64> {
        let mut roots = Vec::new();
        let dx = (hi - lo) / cells as f64;
        for i in 0..cells {
            let (mut a, mut b) = (lo + dx * i as f64, lo + dx * (i + 1) as f64);
            let (mut fa, fb) = (horner(p, a), horner(p, b));
            if fa == 0.0 {
                roots.push(a);
                continue;
            }
            if fa * fb > 0.0 {
                continue;
            }
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                let fm = horner(p, mid);
                if fa * fm <= 0.0 {
                    b = mid;
                } else {
                    a = mid;
                    fa = fm;
                }
            }
            roots.push(0.5 * (a + b));
        }
        roots
    }

    #[test]
    fn identity_and_projection_extrema() {
        assert_eq!(sym_eig_extrema(&SymMatrix::identity(3)).unwrap(), (1.0, 1.0));
        let (lo, hi) = sym_eig_extrema(&SymMatrix::from_diagonal(&[0.0, 1.0, 1.0])).unwrap();
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn gram_matrix_extrema_match_characteristic_roots() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let ata = a.transpose() * &a;
        let p = char_poly(&ata);
        let bound = ata.iter().map(|v| v.abs()).sum::<f64>() + 1.0;
        let roots = bracket_roots(&p, -1e-9, bound, 200_000);
        assert_eq!(roots.len(), 5, "roots {roots:?}");
        let (lo, hi) = sym_eig_extrema(&SymMatrix::new(ata).unwrap()).unwrap();
        assert!((lo - roots[0]).abs() < 1e-8, "{lo} vs {}", roots[0]);
        assert!((hi - roots[4]).abs() < 1e-8, "{hi} vs {}", roots[4]);
        // and with the singular values of A
        let sv = a.singular_values();
        assert!((hi - sv.max().powi(2)).abs() < 1e-9);
        assert!((lo - sv.min().powi(2)).abs() < 1e-9);
    }

    #[test]
    fn rotated_diagonal_recovers_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=9 {
            let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let r = g.qr().q();
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let m = r.transpose() * DMatrix::from_diagonal(&DVector::from_vec(d.clone())) * &r;
            let (lo, hi) = sym_eig_extrema(&SymMatrix::new(m).unwrap()).unwrap();
            let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let dmax = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((lo - dmin).abs() < 1e-9 && (hi - dmax).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_entries_are_rejected() {
        let mut m = DMatrix::<f64>::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(jacobi_eigenvalues(&m), Err(Error::Numeric { .. })));
        assert!(SymMatrix::new(m).is_err());
    }

    #[test]
    fn rk4_zero_field_and_exponential() {
        let s0 = DVector::from_vec(vec![1.0, -2.0]);
        let s = rk4_step(|_, s| s * 0.0, 0.0, &s0, 0.3).unwrap();
        assert_eq!(s, s0);

        let one = DVector::from_element(1, 1.0);
        let s = rk4_step(|_, s| s.clone(), 0.0, &one, 0.1).unwrap();
        assert!((s[0] - 0.1f64.exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_rotation_flow() {
        let mut s = DVector::from_vec(vec![1.0, 0.0]);
        let h = 0.01;
        for i in 0..100 {
            s = rk4_step(|_, s| DVector::from_vec(vec![s[1], -s[0]]), i as f64 * h, &s, h).unwrap();
        }
        assert!((s[0] - 1f64.cos()).abs() < 1e-8);
        assert!((s[1] + 1f64.sin()).abs() < 1e-8);
    }

    #[test]
    fn rk4_global_error_is_fourth_order() {
        let err = |h: f64| {
            let steps = (1.0 / h).round() as usize;
            let mut s = DVector::from_element(1, 1.0);
            for i in 0..steps {
                s = rk4_step(|_, s| s.clone(), i as f64 * h, &s, h).unwrap();
            }
            (s[0] - 1f64.exp()).abs()
        };
        let (e1, e2) = (err(0.1), err(0.05));
        assert!(e1 / e2 >= 8.0 * 0.9, "ratio {}", e1 / e2);
    }

    #[test]
    fn rk4_reports_blow_up() {
        let s0 = DVector::from_element(1, 1.0);
        let r = rk4_step(|_, s| s.map(|v| v * 1e300), 2.5, &s0, 1.0);
        assert!(matches!(r, Err(Error::Numeric { .. })));
        assert!(rk4_step(|_, s| s.clone(), 0.0, &s0, 0.0).is_err());
    }

    #[test]
    fn least_squares_basic_cases() {
        let ls = solve_least_squares(
            &DMatrix::identity(3, 3),
            &DVector::from_vec(vec![1.0, 2.0, 3.0]),
        )
        .unwrap();
        assert!((ls.x - DVector::from_vec(vec![1.0, 2.0, 3.0])).norm() < 1e-14);
        assert!(ls.residual_norm < 1e-14);
        assert_eq!(ls.rank, 3);

        let ls = solve_least_squares(
            &DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            &DVector::from_vec(vec![1.0, 2.0]),
        )
        .unwrap();
        assert!((ls.x[0] - 1.5).abs() < 1e-14);
        assert!((ls.residual_norm - 0.5f64.hypot(0.5)).abs() < 1e-14);
    }

    #[test]
    fn least_squares_flags_coplanar_rank_deficiency() {
        // five points on the plane z = 2; difference rows z_i - z_1 span only two axes
        let pts = [
            [0.0, 0.0, 2.0],
            [1.0, 0.0, 2.0],
            [0.0, 3.0, 2.0],
            [2.0, 5.0, 2.0],
            [-1.0, 4.0, 2.0],
        ];
        let a = DMatrix::from_fn(4, 3, |i, j| pts[i + 1][j] - pts[0][j]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let ls = solve_least_squares(&a, &b).unwrap();
        assert_eq!(ls.rank, 2);
        // minimum-norm: no component along the null direction (0, 0, 1)
        assert!(ls.x[2].abs() < 1e-12);
    }
}
