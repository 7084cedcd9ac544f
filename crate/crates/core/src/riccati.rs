//! Continuous Riccati equation, observer gain, Lyapunov diagnostics and the
//! conditioning / rate bounds for the Riccati matrix.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ltv::{checked_coefficients, LtvSystem};
use crate::numerics::{flatten, jacobi_eigenvalues, try_rk4_step, unflatten, SymMatrix};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type SymFn = Arc<dyn Fn(f64) -> SymMatrix + Send + Sync>;

/// Time-varying tuning `k(t)`, `Q(t)`, `V(t)` of a Riccati observer.
#[derive(Clone)]
pub struct GainSchedule {
    k_of: ScalarFn,
    q_of: SymFn,
    v_of: SymFn,
    // constant schedules are validated once at construction
    prevalidated: bool,
}

impl GainSchedule {
    /// Arbitrary schedules; `k ≥ 0.5` and `Q, V ⪰ 0` are checked at every query.
    pub fn new(
        k_of: impl Fn(f64) -> f64 + Send + Sync + 'static,
        q_of: impl Fn(f64) -> SymMatrix + Send + Sync + 'static,
        v_of: impl Fn(f64) -> SymMatrix + Send + Sync + 'static,
    ) -> Self {
        GainSchedule {
            k_of: Arc::new(k_of),
            q_of: Arc::new(q_of),
            v_of: Arc::new(v_of),
            prevalidated: false,
        }
    }

    pub fn constant(k: f64, q: SymMatrix, v: SymMatrix) -> Result<Self> {
        check_k(k, 0.0)?;
        check_psd(&q, "Q", 0.0)?;
        check_psd(&v, "V", 0.0)?;
        Ok(GainSchedule {
            k_of: Arc::new(move |_| k),
            q_of: Arc::new(move |_| q.clone()),
            v_of: Arc::new(move |_| v.clone()),
            prevalidated: true,
        })
    }

    pub fn k(&self, t: f64) -> Result<f64> {
        let k = (self.k_of)(t);
        if !self.prevalidated {
            check_k(k, t)?;
        }
        Ok(k)
    }

    pub fn q(&self, t: f64) -> Result<SymMatrix> {
        let q = (self.q_of)(t);
        if !self.prevalidated {
            check_psd(&q, "Q", t)?;
        }
        Ok(q)
    }

    pub fn v(&self, t: f64) -> Result<SymMatrix> {
        let v = (self.v_of)(t);
        if !self.prevalidated {
            check_psd(&v, "V", t)?;
        }
        Ok(v)
    }
}

impl fmt::Debug for GainSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GainSchedule")
            .field("k(0)", &(self.k_of)(0.0))
            .field("prevalidated", &self.prevalidated)
            .finish_non_exhaustive()
    }
}

fn check_k(k: f64, t: f64) -> Result<()> {
    if !(k >= 0.5) || !k.is_finite() {
        return Err(Error::InvalidConfig(format!("gain k must be >= 0.5, got {k} at t = {t}")));
    }
    Ok(())
}

fn check_psd(m: &SymMatrix, name: &str, t: f64) -> Result<()> {
    let tol = 1e-12 * m.as_matrix().amax().max(1.0);
    if !m.is_psd(tol) {
        return Err(Error::InvalidConfig(format!(
            "{name} must be positive semi-definite (t = {t})"
        )));
    }
    Ok(())
}

/// Riccati matrix `P` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiState {
    pub p: SymMatrix,
    pub t: f64,
}

impl RiccatiState {
    pub fn new(p: SymMatrix, t: f64) -> Result<Self> {
        ensure_pd(p.as_matrix(), t)?;
        Ok(RiccatiState { p, t })
    }

    pub fn scaled_identity(n: usize, scale: f64, t: f64) -> Result<Self> {
        RiccatiState::new(SymMatrix::scaled_identity(n, scale), t)
    }
}

/// `AP + PAᵀ − PCᵀQCP + V`.
pub fn cre_rhs(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    v: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let ap = a * p;
    let pct = p * c.transpose();
    &ap + ap.transpose() - &pct * q * pct.transpose() + v
}

/// Returns the symmetrized matrix, or a pd-violation error if it is not positive definite.
pub(crate) fn ensure_pd(p: &DMatrix<f64>, t: f64) -> Result<SymMatrix> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { t });
    }
    let s = SymMatrix::symmetrized(p.clone());
    if s.is_pd() {
        return Ok(s);
    }
    let lambda_min = jacobi_eigenvalues(s.as_matrix()).map(|e| e[0]).unwrap_or(f64::NAN);
    Err(Error::PdViolation { t, lambda_min })
}

fn cre_rk4(sys: &dyn LtvSystem, g: &GainSchedule, rs: &RiccatiState, h: f64) -> Result<RiccatiState> {
    let n = rs.p.dim();
    if sys.n_state() != n {
        return Err(Error::InvalidInput(format!(
            "P has dimension {n} but the system has {} states",
            sys.n_state()
        )));
    }
    let next = try_rk4_step(
        |t, s| {
            let co = checked_coefficients(sys, t)?;
            let p = unflatten(s.as_slice(), n, n);
            let q = g.q(t)?;
            let v = g.v(t)?;
            Ok(flatten(&cre_rhs(&co.a, &co.c, q.as_matrix(), v.as_matrix(), &p)))
        },
        rs.t,
        &flatten(rs.p.as_matrix()),
        h,
    )?;
    let t = rs.t + h;
    Ok(RiccatiState { p: ensure_pd(&unflatten(next.as_slice(), n, n), t)?, t })
}

/// One RK4 step of the CRE. A step that loses positive-definiteness is retried
/// once as two half steps before the violation is reported.
pub fn cre_step(sys: &dyn LtvSystem, g: &GainSchedule, rs: &RiccatiState, h: f64) -> Result<RiccatiState> {
    match cre_rk4(sys, g, rs, h) {
        Err(Error::PdViolation { .. }) => {
            let mid = cre_rk4(sys, g, rs, 0.5 * h)?;
            let mut out = cre_rk4(sys, g, &mid, 0.5 * h)?;
            out.t = rs.t + h;
            Ok(out)
        }
        other => other,
    }
}

/// `K = k(t) P Cᵀ(t) Q(t)`.
pub fn gain(sys: &dyn LtvSystem, g: &GainSchedule, rs: &RiccatiState) -> Result<DMatrix<f64>> {
    let c = sys.output_matrix(rs.t);
    gain_from(&c, g, rs)
}

pub(crate) fn gain_from(c: &DMatrix<f64>, g: &GainSchedule, rs: &RiccatiState) -> Result<DMatrix<f64>> {
    let q = g.q(rs.t)?;
    Ok(rs.p.as_matrix() * c.transpose() * q.as_matrix() * g.k(rs.t)?)
}

/// `x̃ᵀ P⁻¹ x̃`, through a Cholesky solve.
pub fn lyapunov_value(rs: &RiccatiState, x_tilde: &DVector<f64>) -> Result<f64> {
    if x_tilde.len() != rs.p.dim() {
        return Err(Error::InvalidInput(format!(
            "error vector has {} entries, P is {}x{}",
            x_tilde.len(),
            rs.p.dim(),
            rs.p.dim()
        )));
    }
    match rs.p.solve(x_tilde) {
        Some(z) => Ok(x_tilde.dot(&z)),
        None => {
            let lambda_min = rs.p.eig_extrema().map(|e| e.0).unwrap_or(f64::NAN);
            Err(Error::PdViolation { t: rs.t, lambda_min })
        }
    }
}

/// Constants bounding the system and tuning over a run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConditioningBounds {
    /// `sup ‖A(t)‖₂`.
    pub k_a: f64,
    /// `sup tr(Cᵀ Q C)`.
    pub mu_q_bar: f64,
    /// `inf λmin(V)`.
    pub v_m: f64,
    /// `sup λmax(V)`.
    pub v_big_m: f64,
    /// `sup tr(V)`.
    pub v_trace: f64,
    /// Floor of the Riccati Grammian `W_Q`.
    pub mu: f64,
    pub delta: f64,
}

/// Guaranteed exponential decay rate `(p_m²/p_M) v_m` of the Lyapunov function.
pub fn rate_lower_bound(b: &ConditioningBounds, p_m: f64, p_big_m: f64) -> f64 {
    p_m * p_m / p_big_m * b.v_m
}

/// Ultimate lower bound on `λmin(P)`.
pub fn ultimate_lambda_min_bound(b: &ConditioningBounds, n: usize) -> Result<f64> {
    if b.k_a == 0.0 {
        return Err(Error::UseDirectLyapunov);
    }
    let nk = n as f64 * b.k_a;
    Ok(b.v_m / nk / (1.0 + (1.0 + b.mu_q_bar * b.v_m / (nk * b.k_a)).sqrt()))
}

/// Ultimate upper bound on `λmax(P)`.
pub fn ultimate_lambda_max_bound(b: &ConditioningBounds) -> Result<f64> {
    if !(b.mu > 0.0) {
        return Err(Error::NoObservability(b.mu));
    }
    if !(b.delta > 0.0) {
        return Err(Error::InvalidInput(format!("window length must be positive, got {}", b.delta)));
    }
    let ratio = b.mu_q_bar / b.mu;
    Ok(1.0 / (b.mu * b.delta) + ratio * ratio * (6.0 * b.k_a * b.delta).exp() * b.delta * b.v_big_m / 3.0)
}

/// Which trace [`trace_growth_envelope`] bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceOf {
    P,
    PInverse,
}

/// Exponential envelope on `tr P(t)` (driven by `sup tr V`) or `tr P⁻¹(t)` (driven by `μ̄_q`).
pub fn trace_growth_envelope(b: &ConditioningBounds, tr0: f64, t: f64, which: TraceOf) -> f64 {
    let drive = match which {
        TraceOf::P => b.v_trace,
        TraceOf::PInverse => b.mu_q_bar,
    };
    if b.k_a == 0.0 {
        return tr0 + drive * t;
    }
    let offset = drive / (2.0 * b.k_a);
    (tr0 + offset) * (2.0 * b.k_a * t).exp() - offset
}
