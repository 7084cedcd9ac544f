//! Linear time-varying systems and the observability machinery built on them:
//! transition matrices, observability / Riccati Grammians, persistent-excitation
//! metrics and the static-range solvability test.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{
    flatten, jacobi_eigenvalues, numerical_rank, projector, rk4_step, solve_least_squares,
    unflatten, SymMatrix,
};

/// Coefficients of `Ẋ = A(t)X + ū(t)`, `y = C(t)X` at one time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub u_lift: DVector<f64>,
}

/// A linear time-varying system with the input already lifted into state space.
pub trait LtvSystem {
    fn n_state(&self) -> usize;
    fn n_out(&self) -> usize;
    fn coefficients(&self, t: f64) -> Coefficients;

    fn state_matrix(&self, t: f64) -> DMatrix<f64> {
        self.coefficients(t).a
    }

    fn output_matrix(&self, t: f64) -> DMatrix<f64> {
        self.coefficients(t).c
    }
}

type MatrixFn = Box<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
type VectorFn = Box<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// An [`LtvSystem`] defined by closures.
pub struct FnSystem {
    n_state: usize,
    n_out: usize,
    a: MatrixFn,
    c: MatrixFn,
    u: Option<VectorFn>,
}

impl FnSystem {
    pub fn new(
        n_state: usize,
        n_out: usize,
        a: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        c: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        FnSystem { n_state, n_out, a: Box::new(a), c: Box::new(c), u: None }
    }

    pub fn with_input(mut self, u: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.u = Some(Box::new(u));
        self
    }

    /// Constant `A` and `C`.
    pub fn constant(a: DMatrix<f64>, c: DMatrix<f64>) -> Self {
        let (n_state, n_out) = (a.nrows(), c.nrows());
        FnSystem::new(n_state, n_out, move |_| a.clone(), move |_| c.clone())
    }
}

impl fmt::Debug for FnSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnSystem")
            .field("n_state", &self.n_state)
            .field("n_out", &self.n_out)
            .finish_non_exhaustive()
    }
}

impl LtvSystem for FnSystem {
    fn n_state(&self) -> usize {
        self.n_state
    }

    fn n_out(&self) -> usize {
        self.n_out
    }

    fn coefficients(&self, t: f64) -> Coefficients {
        Coefficients {
            a: (self.a)(t),
            c: (self.c)(t),
            u_lift: self.u.as_ref().map_or_else(|| DVector::zeros(self.n_state), |u| u(t)),
        }
    }

    fn state_matrix(&self, t: f64) -> DMatrix<f64> {
        (self.a)(t)
    }

    fn output_matrix(&self, t: f64) -> DMatrix<f64> {
        (self.c)(t)
    }
}

/// Coefficients at `t`, with dimensions and finiteness checked.
pub fn checked_coefficients(sys: &dyn LtvSystem, t: f64) -> Result<Coefficients> {
    let co = sys.coefficients(t);
    let (n, m) = (sys.n_state(), sys.n_out());
    if co.a.shape() != (n, n) || co.c.shape() != (m, n) || co.u_lift.len() != n {
        return Err(Error::InvalidInput(format!(
            "inconsistent dimensions at t = {t}: A {:?}, C {:?}, u {} for n_state {n}, n_out {m}",
            co.a.shape(),
            co.c.shape(),
            co.u_lift.len()
        )));
    }
    if co.a.iter().chain(co.c.iter()).chain(co.u_lift.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric { t });
    }
    Ok(co)
}

/// Integration window `[t, t + delta]` sampled at (roughly) `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeWindow {
    pub delta: f64,
    pub dt: f64,
}

impl PeWindow {
    pub fn new(delta: f64, dt: f64) -> Result<Self> {
        if !(delta > 0.0 && dt > 0.0 && delta >= dt) || !delta.is_finite() {
            return Err(Error::InvalidInput(format!(
                "window needs delta >= dt > 0, got delta = {delta}, dt = {dt}"
            )));
        }
        Ok(PeWindow { delta, dt })
    }

    /// Number of quadrature intervals; the step is adjusted so they tile `delta` exactly.
    pub fn steps(&self) -> usize {
        ((self.delta / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn step(&self) -> f64 {
        self.delta / self.steps() as f64
    }

    fn weight(&self, k: usize) -> f64 {
        let n = self.steps();
        let h = self.step();
        if k == 0 || k == n {
            0.5 * h
        } else {
            h
        }
    }
}

/// Source points `z₁ … z_l` with weights `α` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceGeometry {
    points: Vec<DVector<f64>>,
    alpha: DVector<f64>,
}

impl SourceGeometry {
    pub fn new(points: Vec<DVector<f64>>, alpha: DVector<f64>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::InvalidConfig("at least one source point is required".into()));
        };
        let n = first.len();
        if !(2..=3).contains(&n) {
            return Err(Error::InvalidConfig(format!("space dimension must be 2 or 3, got {n}")));
        }
        if points.iter().any(|p| p.len() != n) {
            return Err(Error::InvalidConfig("source points have mixed dimensions".into()));
        }
        if alpha.len() != points.len() {
            return Err(Error::InvalidConfig(format!(
                "alpha has {} weights for {} source points",
                alpha.len(),
                points.len()
            )));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("alpha must sum to 1, sums to {sum}")));
        }
        Ok(SourceGeometry { points, alpha })
    }

    /// Equal weights `1/l`.
    pub fn uniform(points: Vec<DVector<f64>>) -> Result<Self> {
        let l = points.len().max(1);
        let alpha = DVector::from_element(points.len(), 1.0 / l as f64);
        // 1/l does not always sum to exactly one in floating point
        let mut alpha = alpha;
        if let Some(last) = alpha.len().checked_sub(1) {
            let head: f64 = alpha.iter().take(last).sum();
            alpha[last] = 1.0 - head;
        }
        SourceGeometry::new(points, alpha)
    }

    pub fn single(point: DVector<f64>) -> Result<Self> {
        SourceGeometry::new(vec![point], DVector::from_element(1, 1.0))
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// `Σ αᵢ zᵢ`.
    pub fn weighted_centroid(&self) -> DVector<f64> {
        self.points
            .iter()
            .zip(self.alpha.iter())
            .fold(DVector::zeros(self.dim()), |acc, (z, &a)| acc + z * a)
    }

    /// `Z = [z₁ … z_l]`, an `n × l` matrix.
    pub fn z_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&self.points)
    }

    /// `D(α) = ξαᵀ − I`.
    pub fn d_matrix(&self) -> DMatrix<f64> {
        let l = self.len();
        DMatrix::from_element(l, 1, 1.0) * self.alpha.transpose() - DMatrix::identity(l, l)
    }

    /// `D(α) Zᵀ`, whose row j is `(Σαᵢzᵢ − z_j)ᵀ`.
    pub fn dz_matrix(&self) -> DMatrix<f64> {
        self.d_matrix() * self.z_matrix().transpose()
    }

    /// `Z Dᵀ(α) D(α) Zᵀ`.
    pub fn geometric_excitation(&self) -> DMatrix<f64> {
        let dz = self.dz_matrix();
        dz.transpose() * dz
    }

    pub fn d_rank(&self) -> usize {
        numerical_rank(&self.d_matrix())
    }

    pub fn dz_rank(&self) -> usize {
        numerical_rank(&self.dz_matrix())
    }
}

/// `Φ(t1, t0)` for `Φ̇ = A(t)Φ`, integrated with RK4 at step `dt` (adjusted to tile the span).
pub fn transition_matrix(sys: &dyn LtvSystem, t0: f64, t1: f64, dt: f64) -> Result<DMatrix<f64>> {
    if t1 < t0 {
        return Err(Error::InvalidInput(format!("transition needs t1 >= t0, got {t0} > {t1}")));
    }
    let n = sys.n_state();
    let mut phi = DMatrix::identity(n, n);
    if t1 == t0 {
        return Ok(phi);
    }
    let steps = ((t1 - t0) / dt - 1e-9).ceil().max(1.0) as usize;
    let h = (t1 - t0) / steps as f64;
    for k in 0..steps {
        phi = forward_transition_step(sys, &phi, t0 + k as f64 * h, h)?;
    }
    Ok(phi)
}

fn forward_transition_step(
    sys: &dyn LtvSystem,
    phi: &DMatrix<f64>,
    t: f64,
    h: f64,
) -> Result<DMatrix<f64>> {
    let n = phi.nrows();
    let next = rk4_step(
        |s, v| {
            let m = unflatten(v.as_slice(), n, n);
            flatten(&(sys.state_matrix(s) * m))
        },
        t,
        &flatten(phi),
        h,
    )?;
    Ok(unflatten(next.as_slice(), n, n))
}

/// `Ψ(s) = Φ(t, s)` evolves as `dΨ/ds = −Ψ A(s)`.
fn backward_transition_step(
    sys: &dyn LtvSystem,
    psi: &DMatrix<f64>,
    s: f64,
    h: f64,
) -> Result<DMatrix<f64>> {
    let n = psi.nrows();
    let next = rk4_step(
        |s, v| {
            let m = unflatten(v.as_slice(), n, n);
            flatten(&(-(m * sys.state_matrix(s))))
        },
        s,
        &flatten(psi),
        h,
    )?;
    Ok(unflatten(next.as_slice(), n, n))
}

/// `(1/δ)∫ Φᵀ(s,t) Cᵀ(s) Q(s) C(s) Φ(s,t) ds` by trapezoid at the window step.
fn output_weighted_gramian(
    sys: &dyn LtvSystem,
    weight: &dyn Fn(f64) -> DMatrix<f64>,
    t: f64,
    w: PeWindow,
) -> Result<SymMatrix> {
    let n = sys.n_state();
    let steps = w.steps();
    let h = w.step();
    let mut phi = DMatrix::identity(n, n);
    let mut acc = DMatrix::zeros(n, n);
    for k in 0..=steps {
        let s = t + k as f64 * h;
        let c = sys.output_matrix(s);
        if c.shape() != (sys.n_out(), n) {
            return Err(Error::InvalidInput(format!("C({s}) has shape {:?}", c.shape())));
        }
        let cphi = c * &phi;
        acc += cphi.transpose() * weight(s) * cphi * w.weight(k);
        if k < steps {
            phi = forward_transition_step(sys, &phi, s, h)?;
        }
    }
    finish_gramian(acc / w.delta, t)
}

fn finish_gramian(m: DMatrix<f64>, t: f64) -> Result<SymMatrix> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { t });
    }
    Ok(SymMatrix::symmetrized(m))
}

/// Observability Grammian `W(t, t+δ)`.
pub fn observability_gramian(sys: &dyn LtvSystem, t: f64, w: PeWindow) -> Result<SymMatrix> {
    let m = sys.n_out();
    output_weighted_gramian(sys, &|_| DMatrix::identity(m, m), t, w)
}

/// Riccati observability Grammian `W_Q(t, t+δ)`.
pub fn riccati_gramian_wq(
    sys: &dyn LtvSystem,
    q_of: &dyn Fn(f64) -> SymMatrix,
    t: f64,
    w: PeWindow,
) -> Result<SymMatrix> {
    output_weighted_gramian(sys, &|s| q_of(s).into_inner(), t, w)
}

/// `W_V(t, t+δ) = (1/δ)∫ Φ(t,s) V(s) Φᵀ(t,s) ds`.
pub fn controllability_gramian_wv(
    sys: &dyn LtvSystem,
    v_of: &dyn Fn(f64) -> SymMatrix,
    t: f64,
    w: PeWindow,
) -> Result<SymMatrix> {
    let n = sys.n_state();
    let steps = w.steps();
    let h = w.step();
    let mut psi = DMatrix::identity(n, n);
    let mut acc = DMatrix::zeros(n, n);
    for k in 0..=steps {
        let s = t + k as f64 * h;
        acc += &psi * v_of(s).as_matrix() * psi.transpose() * w.weight(k);
        if k < steps {
            psi = backward_transition_step(sys, &psi, s, h)?;
        }
    }
    finish_gramian(acc / w.delta, t)
}

/// `N_k(t)` with `N₀ = C`, `N_{k+1} = N_k A + Ṅ_k`, derivatives by central differences.
fn observation_block(sys: &dyn LtvSystem, t: f64, k: usize, fd: f64) -> DMatrix<f64> {
    if k == 0 {
        return sys.output_matrix(t);
    }
    let prev = observation_block(sys, t, k - 1, fd);
    let ahead = observation_block(sys, t + fd, k - 1, fd);
    let behind = observation_block(sys, t - fd, k - 1, fd);
    prev * sys.state_matrix(t) + (ahead - behind) / (2.0 * fd)
}

/// Stacked observation space `[N₀; …; N_depth]` at `t`.
pub fn observation_space(sys: &dyn LtvSystem, t: f64, depth: usize, fd_step: f64) -> DMatrix<f64> {
    let blocks: Vec<DMatrix<f64>> =
        (0..=depth).map(|k| observation_block(sys, t, k, fd_step)).collect();
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, sys.n_state());
    let mut r = 0;
    for b in blocks {
        out.rows_mut(r, b.nrows()).copy_from(&b);
        r += b.nrows();
    }
    out
}

/// Numerical rank of the observation space at `t`.
pub fn instantaneous_observability_rank(
    sys: &dyn LtvSystem,
    t: f64,
    depth: usize,
    fd_step: f64,
) -> usize {
    numerical_rank(&observation_space(sys, t, depth, fd_step))
}

/// `λmin((1/δ)∫ Mᵀ(s) M(s) ds)`.
pub fn pe_metric(m_of: &dyn Fn(f64) -> DMatrix<f64>, t: f64, w: PeWindow) -> Result<f64> {
    let integral = window_integral(&|s| {
        let m = m_of(s);
        m.transpose() * m
    }, t, w)?;
    Ok(jacobi_eigenvalues(&integral)?[0])
}

/// `(1/δ)∫ F(s) ds` by trapezoid.
pub fn window_integral(f: &dyn Fn(f64) -> DMatrix<f64>, t: f64, w: PeWindow) -> Result<DMatrix<f64>> {
    let h = w.step();
    let mut acc: Option<DMatrix<f64>> = None;
    for k in 0..=w.steps() {
        let s = t + k as f64 * h;
        let term = f(s) * w.weight(k);
        acc = Some(match acc {
            Some(a) => a + term,
            None => term,
        });
    }
    let out = acc.expect("at least one quadrature node") / w.delta;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { t });
    }
    Ok(out)
}

/// The integral excitation conditions under which the observers are certified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PeKind {
    /// `(1/δ)∫ Σᵢ Π_{yᵢ(s)} ds ≥ μ I`.
    DirectionPersistent,
    /// `(1/δ)∫ u uᵀ ≥ μ I`.
    RangeU,
    /// `(1/δ)∫ u̇ u̇ᵀ ≥ μ I`.
    RangeUdot,
    /// `Z DᵀD Zᵀ + (1/δ)∫ u uᵀ ≥ μ I`.
    MultiRangeU,
    /// `Z DᵀD Zᵀ + (1/δ)∫ u̇ u̇ᵀ ≥ μ I`.
    MultiRangeUdot,
    /// Same matrix as [`PeKind::MultiRangeU`], strict inequality.
    BiasedRangeC1,
    /// Some `τ` in the window has `|ẏ̄(τ)| > ν`.
    BiasedRangeC2,
}

impl PeKind {
    pub fn name(self) -> &'static str {
        match self {
            PeKind::DirectionPersistent => "direction_persistent",
            PeKind::RangeU => "range_u",
            PeKind::RangeUdot => "range_udot",
            PeKind::MultiRangeU => "multi_range_u",
            PeKind::MultiRangeUdot => "multi_range_udot",
            PeKind::BiasedRangeC1 => "biased_range_C1",
            PeKind::BiasedRangeC2 => "biased_range_C2",
        }
    }
}

impl fmt::Display for PeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type SignalFn<'a> = &'a dyn Fn(f64) -> DVector<f64>;

/// Signals available to [`pe_condition_report`]. Missing derivatives are
/// formed by central differences at the window step.
#[derive(Default, Clone, Copy)]
pub struct ExcitationInputs<'a> {
    pub velocity: Option<SignalFn<'a>>,
    pub acceleration: Option<SignalFn<'a>>,
    pub directions: Option<&'a dyn Fn(f64) -> Vec<DVector<f64>>>,
    pub ranges: Option<SignalFn<'a>>,
    pub range_rates: Option<SignalFn<'a>>,
    pub geometry: Option<&'a SourceGeometry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeReport {
    pub kind: PeKind,
    /// `λmin` of the window matrix, or `max |ẏ̄|` for C2.
    pub value: f64,
    pub threshold: f64,
    pub satisfied: bool,
}

fn central_difference<'a>(f: SignalFn<'a>, h: f64) -> impl Fn(f64) -> DVector<f64> + 'a {
    move |t| (f(t + h) - f(t - h)) / (2.0 * h)
}

fn outer(v: &DVector<f64>) -> DMatrix<f64> {
    v * v.transpose()
}

/// Evaluates one excitation condition over `[t, t+δ]` against `threshold` (μ or ν).
pub fn pe_condition_report(
    kind: PeKind,
    inputs: &ExcitationInputs<'_>,
    t: f64,
    w: PeWindow,
    threshold: f64,
) -> Result<PeReport> {
    let missing = |what: &str| Error::InsufficientSamples(format!("{kind} needs {what}"));
    let geometric = |need: bool| -> Result<Option<DMatrix<f64>>> {
        if !need {
            return Ok(None);
        }
        let g = inputs.geometry.ok_or_else(|| missing("source geometry"))?;
        Ok(Some(g.geometric_excitation()))
    };

    let value = match kind {
        PeKind::DirectionPersistent => {
            let dirs = inputs.directions.ok_or_else(|| missing("direction samples"))?;
            let m = window_integral(
                &|s| {
                    let ys = dirs(s);
                    let n = ys.first().map_or(0, |y| y.len());
                    ys.iter().fold(DMatrix::zeros(n, n), |acc, y| acc + projector(y))
                },
                t,
                w,
            )?;
            jacobi_eigenvalues(&m)?[0]
        }
        PeKind::RangeU | PeKind::MultiRangeU | PeKind::BiasedRangeC1 => {
            let u = inputs.velocity.ok_or_else(|| missing("velocity samples"))?;
            let mut m = window_integral(&|s| outer(&u(s)), t, w)?;
            if let Some(g) = geometric(kind != PeKind::RangeU)? {
                m += g;
            }
            jacobi_eigenvalues(&m)?[0]
        }
        PeKind::RangeUdot | PeKind::MultiRangeUdot => {
            let m = match (inputs.acceleration, inputs.velocity) {
                (Some(du), _) => window_integral(&|s| outer(&du(s)), t, w)?,
                (None, Some(u)) => {
                    let du = central_difference(u, w.step());
                    window_integral(&|s| outer(&du(s)), t, w)?
                }
                (None, None) => return Err(missing("velocity or acceleration samples")),
            };
            let m = match geometric(kind == PeKind::MultiRangeUdot)? {
                Some(g) => m + g,
                None => m,
            };
            jacobi_eigenvalues(&m)?[0]
        }
        PeKind::BiasedRangeC2 => {
            let rate: Box<dyn Fn(f64) -> DVector<f64>> = match (inputs.range_rates, inputs.ranges) {
                (Some(r), _) => Box::new(r),
                (None, Some(r)) => Box::new(central_difference(r, w.step())),
                (None, None) => return Err(missing("range samples")),
            };
            let h = w.step();
            (0..=w.steps())
                .map(|k| rate(t + k as f64 * h).norm())
                .fold(0.0, f64::max)
        }
    };
    if !value.is_finite() {
        return Err(Error::Numeric { t });
    }
    Ok(PeReport { kind, value, threshold, satisfied: value > threshold })
}

/// Outcome of [`static_range_solvability`].
#[derive(Debug, Clone, PartialEq)]
pub struct StaticSolvability {
    /// True when some `w` satisfies all constraints, i.e. the geometry is degenerate.
    pub has_solution_w: bool,
    pub w: DVector<f64>,
    /// Least-squares residual of `(zᵢ − z₁)ᵀ w = dᵢ − d₁`, in metres.
    pub residual: f64,
    /// Residual divided by `maxᵢ dᵢ`.
    pub relative_residual: f64,
    pub rank: usize,
}

/// Tests whether a motionless body admits a `w` with
/// `d₁(1 + wᵀr₁) = … = d_l(1 + wᵀr_l)`, the degenerate case for biased ranges.
pub fn static_range_solvability(
    geometry: &SourceGeometry,
    body: &DVector<f64>,
) -> Result<StaticSolvability> {
    let l = geometry.len();
    if l < 2 {
        return Err(Error::InvalidInput("static solvability needs at least two sources".into()));
    }
    if body.len() != geometry.dim() {
        return Err(Error::InvalidInput("body and sources differ in dimension".into()));
    }
    let d: Vec<f64> = geometry.points().iter().map(|z| (body - z).norm()).collect();
    if d.iter().any(|&di| di < 1e-12) {
        return Err(Error::InvalidInput("body coincides with a source point".into()));
    }
    let z = geometry.points();
    let a = DMatrix::from_fn(l - 1, geometry.dim(), |i, j| z[i + 1][j] - z[0][j]);
    let b = DVector::from_fn(l - 1, |i, _| d[i + 1] - d[0]);
    let ls = solve_least_squares(&a, &b)?;
    let scale = d.iter().cloned().fold(0.0, f64::max);
    let relative = ls.residual_norm / scale;
    Ok(StaticSolvability {
        has_solution_w: relative < 1e-8,
        w: ls.x,
        residual: ls.residual_norm,
        relative_residual: relative,
        rank: ls.rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn m2(a: f64, b: f64, c: f64, d: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a, b, c, d])
    }

    fn rotation_system() -> FnSystem {
        FnSystem::new(
            2,
            2,
            |_| m2(0.0, 1.0, -1.0, 0.0),
            |t| projector(&v(&[t.cos(), -t.sin()])),
        )
    }

    #[test]
    fn transition_matrix_closed_forms() {
        let zero = FnSystem::constant(DMatrix::zeros(3, 3), DMatrix::identity(3, 3));
        assert_eq!(transition_matrix(&zero, 0.0, 2.0, 1e-2).unwrap(), DMatrix::identity(3, 3));

        let nil = FnSystem::constant(m2(0.0, 1.0, 0.0, 0.0), DMatrix::identity(2, 2));
        let tau = 1.7;
        let phi = transition_matrix(&nil, 0.3, 0.3 + tau, 1e-2).unwrap();
        assert!((phi - m2(1.0, tau, 0.0, 1.0)).norm() < 1e-12);

        let phi = transition_matrix(&rotation_system(), 0.0, PI / 2.0, 1e-3).unwrap();
        assert!((phi - m2(0.0, 1.0, -1.0, 0.0)).norm() < 1e-8);

        assert!(transition_matrix(&nil, 1.0, 0.0, 1e-2).is_err());
    }

    #[test]
    fn transition_semigroup() {
        let sys = FnSystem::new(
            2,
            1,
            |t| m2(-0.2, 1.0 + 0.5 * t.sin(), -t.cos(), 0.1),
            |_| DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        );
        let (t0, t1, t2) = (0.0, 0.8, 2.1);
        let a = transition_matrix(&sys, t0, t2, 1e-3).unwrap();
        let b = transition_matrix(&sys, t1, t2, 1e-3).unwrap() * transition_matrix(&sys, t0, t1, 1e-3).unwrap();
        assert!((a - b).norm() < 1e-7);
    }

    #[test]
    fn trivial_gramians() {
        let sys = FnSystem::constant(DMatrix::zeros(3, 3), DMatrix::identity(3, 3));
        let w = PeWindow::new(1.0, 1e-2).unwrap();
        let g = observability_gramian(&sys, 0.0, w).unwrap();
        assert!((g.as_matrix() - DMatrix::identity(3, 3)).norm() < 1e-12);
        let wv = controllability_gramian_wv(&sys, &|_| SymMatrix::identity(3), 0.0, w).unwrap();
        assert!((wv.as_matrix() - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn circling_projection_gramian_is_half_identity() {
        let sys = FnSystem::new(2, 2, |_| DMatrix::zeros(2, 2), |t| projector(&v(&[t.cos(), t.sin()])));
        let w = PeWindow::new(2.0 * PI, 1e-3).unwrap();
        for t in [0.0, 0.4, 3.0] {
            let g = observability_gramian(&sys, t, w).unwrap();
            assert!((g.as_matrix() - DMatrix::identity(2, 2) * 0.5).norm() < 1e-9);
        }
    }

    #[test]
    fn imaginary_eigenvalue_counterexample_is_never_observable() {
        let sys = rotation_system();
        let w = PeWindow::new(2.0 * PI, 1e-3).unwrap();
        for t in [0.0, 1.0, 2.5] {
            let (lo, hi) = observability_gramian(&sys, t, w).unwrap().eig_extrema().unwrap();
            assert!(lo.abs() < 1e-8, "lambda_min = {lo}");
            assert!(hi > 0.1);
        }
        // Π_{y(s)} e^{As} b = 0 along the whole orbit
        for k in 0..50 {
            let s = 0.13 * k as f64;
            let e = m2(s.cos(), s.sin(), -s.sin(), s.cos());
            let r = projector(&v(&[s.cos(), -s.sin()])) * e * v(&[1.0, 0.0]);
            assert!(r.norm() < 1e-9);
        }
    }

    fn random_ltv(rng: &mut ChaCha8Rng, n: usize, m: usize) -> FnSystem {
        let a0 = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        let a1 = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        let c0 = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let c1 = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        FnSystem::new(n, m, move |t| &a0 + &a1 * t.sin(), move |t| &c0 + &c1 * (2.0 * t).cos())
    }

    #[test]
    fn weighted_gramians_scale_and_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = PeWindow::new(1.5, 1e-2).unwrap();
        for _ in 0..5 {
            let sys = random_ltv(&mut rng, 3, 2);
            let g = observability_gramian(&sys, 0.2, w).unwrap();
            let gi = riccati_gramian_wq(&sys, &|_| SymMatrix::identity(2), 0.2, w).unwrap();
            let g2 = riccati_gramian_wq(&sys, &|_| SymMatrix::scaled_identity(2, 2.0), 0.2, w).unwrap();
            assert!((g.as_matrix() - gi.as_matrix()).abs().max() < 1e-9);
            assert!((g.as_matrix() * 2.0 - g2.as_matrix()).abs().max() < 1e-12);

            let eps = 0.3;
            let qd = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let q = SymMatrix::new(qd.transpose() * qd + DMatrix::identity(2, 2) * eps).unwrap();
            let q_min = q.eig_extrema().unwrap().0;
            let wq = riccati_gramian_wq(&sys, &|_| q.clone(), 0.2, w).unwrap();
            assert!(wq.eig_extrema().unwrap().0 >= q_min * g.eig_extrema().unwrap().0 - 1e-12);
        }
    }

    #[test]
    fn wv_floor_from_transition_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let delta = 1.0;
        let w = PeWindow::new(delta, 1e-2).unwrap();
        for _ in 0..5 {
            let sys = random_ltv(&mut rng, 3, 1);
            let k_a = (0..=100)
                .map(|k| crate::numerics::spectral_norm(&sys.state_matrix(k as f64 * 0.01)).unwrap())
                .fold(0.0, f64::max);
            let eps = 0.2;
            let wv = controllability_gramian_wv(&sys, &|_| SymMatrix::scaled_identity(3, eps), 0.0, w).unwrap();
            let (lo, _) = wv.eig_extrema().unwrap();
            // sampled sup of ‖A‖ slightly underestimates the true one; allow 1%
            assert!(lo >= eps * (-2.0 * k_a * 1.01 * delta).exp(), "{lo}");
        }
    }

    #[test]
    fn wv_positive_for_controllable_pair() {
        // double integrator with force input
        let sys = FnSystem::constant(m2(0.0, 1.0, 0.0, 0.0), DMatrix::identity(2, 2));
        let b = v(&[0.0, 1.0]);
        let vv = SymMatrix::new(&b * b.transpose()).unwrap();
        let wv = controllability_gramian_wv(&sys, &|_| vv.clone(), 0.0, PeWindow::new(1.0, 1e-3).unwrap()).unwrap();
        assert!(wv.eig_extrema().unwrap().0 > 1e-3);
    }

    #[test]
    fn observability_rank_cases() {
        let n = 3;
        let mut a = DMatrix::zeros(2 * n, 2 * n);
        a.view_mut((0, n), (n, n)).copy_from(&DMatrix::identity(n, n));
        let mut cbar = DMatrix::zeros(n, 2 * n);
        cbar.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
        let sys = FnSystem::constant(a, cbar);
        assert_eq!(instantaneous_observability_rank(&sys, 0.0, 1, 1e-4), 2 * n);
        assert_eq!(instantaneous_observability_rank(&sys, 0.0, 0, 1e-4), n);

        let id = FnSystem::constant(DMatrix::zeros(n, n), DMatrix::identity(n, n));
        assert_eq!(instantaneous_observability_rank(&id, 0.0, 0, 1e-4), n);

        // single-range unbiased model, u(t) = (sin t, 0, 0) is zero at t = 0
        let range = FnSystem::new(
            n + 1,
            1,
            |t| {
                let mut a = DMatrix::zeros(4, 4);
                a[(3, 0)] = t.sin();
                a
            },
            |_| DMatrix::from_row_slice(1, 4, &[0.0, 0.0, 0.0, 1.0]),
        );
        assert_eq!(instantaneous_observability_rank(&range, 0.0, 1, 1e-4), 1);
    }

    #[test]
    fn pe_metric_cases() {
        let w = PeWindow::new(2.0 * PI, 1e-3).unwrap();
        assert!((pe_metric(&|_| DMatrix::identity(3, 3), 0.0, w).unwrap() - 1.0).abs() < 1e-12);
        let mu = pe_metric(&|t| projector(&v(&[t.cos(), t.sin()])), 0.7, w).unwrap();
        assert!((mu - 0.5).abs() < 1e-9);
        let mu = pe_metric(
            &|t| DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 0.0, 1.0, t.sin(), t.cos(), 0.0, 0.0]),
            0.0,
            w,
        )
        .unwrap();
        assert!(mu.abs() < 1e-12);
    }

    #[test]
    fn pe_metric_row_permutation_and_scaling() {
        let w = PeWindow::new(1.0, 1e-2).unwrap();
        let base = |t: f64| DMatrix::from_row_slice(3, 2, &[1.0, t, t.sin(), 2.0, 0.5, t * t]);
        let swapped = |t: f64| {
            let m = base(t);
            DMatrix::from_rows(&[m.row(2).into_owned(), m.row(0).into_owned(), m.row(1).into_owned()])
        };
        let a = pe_metric(&base, 0.0, w).unwrap();
        assert!((a - pe_metric(&swapped, 0.0, w).unwrap()).abs() < 1e-12);
        let scaled = pe_metric(&|t| base(t) * 3.0, 0.0, w).unwrap();
        assert!((scaled - 9.0 * a).abs() < 1e-10 * scaled.abs().max(1.0));
    }

    fn tetra() -> SourceGeometry {
        SourceGeometry::uniform(vec![
            v(&[0.0, 0.0, 0.0]),
            v(&[10.0, 0.0, 0.0]),
            v(&[0.0, 10.0, 0.0]),
            v(&[0.0, 0.0, 10.0]),
        ])
        .unwrap()
    }

    #[test]
    fn geometry_invariants() {
        let g = tetra();
        assert!((g.alpha().sum() - 1.0).abs() < 1e-12);
        assert_eq!(g.d_rank(), 3);
        assert_eq!(g.dz_rank(), 3);
        let bad = SourceGeometry::new(vec![v(&[0.0, 0.0]); 3], v(&[0.5, 0.5, 0.5]));
        assert!(matches!(bad, Err(Error::InvalidConfig(_))));
        // D(α)Zᵀ row j is (Σ αᵢ zᵢ − z_j)ᵀ
        let c = g.weighted_centroid();
        let dz = g.dz_matrix();
        for (j, z) in g.points().iter().enumerate() {
            assert!((dz.row(j).transpose() - (&c - z)).norm() < 1e-12);
        }
    }

    #[test]
    fn pe_reports() {
        let w = PeWindow::new(2.0, 1e-2).unwrap();
        let still = |_: f64| vec![v(&[0.6, 0.0, 0.8])];
        let r = pe_condition_report(
            PeKind::DirectionPersistent,
            &ExcitationInputs { directions: Some(&still), ..Default::default() },
            0.0,
            w,
            1e-6,
        )
        .unwrap();
        assert!(r.value.abs() < 1e-12 && !r.satisfied);

        let zero = |_: f64| DVector::zeros(3);
        let g = tetra();
        let r = pe_condition_report(
            PeKind::MultiRangeU,
            &ExcitationInputs { velocity: Some(&zero), geometry: Some(&g), ..Default::default() },
            0.0,
            w,
            1e-6,
        )
        .unwrap();
        assert!(r.satisfied);

        // body on a sphere around the single source: constant range
        let r = pe_condition_report(
            PeKind::BiasedRangeC2,
            &ExcitationInputs { ranges: Some(&|_| v(&[7.0])), ..Default::default() },
            0.0,
            w,
            1e-6,
        )
        .unwrap();
        assert!(!r.satisfied && r.value == 0.0);

        assert!(matches!(
            pe_condition_report(PeKind::RangeU, &ExcitationInputs::default(), 0.0, w, 1e-6),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn static_solvability_equal_distances() {
        let body = v(&[1.0, 2.0, 3.0]);
        let dirs = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -0.6, -0.8]];
        let pts = dirs.iter().map(|d| &body + v(d) * 5.0).collect();
        let s = static_range_solvability(&SourceGeometry::uniform(pts).unwrap(), &body).unwrap();
        assert!(s.has_solution_w);
        assert!(s.w.norm() < 1e-10);
    }

    #[test]
    fn static_solvability_half_cone() {
        // sources on one nappe of a cone with apex at the body: r_i · axis = -cos θ
        let body = v(&[2.0, -1.0, 0.5]);
        let axis = v(&[0.0, 0.0, 1.0]);
        let theta: f64 = 0.6;
        let dists = [3.0, 7.5, 4.2, 9.0, 5.5];
        let pts: Vec<_> = dists
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let phi = 1.3 * i as f64;
                let r = v(&[theta.sin() * phi.cos(), theta.sin() * phi.sin(), -theta.cos()]);
                &body - r * d
            })
            .collect();
        let s = static_range_solvability(&SourceGeometry::uniform(pts).unwrap(), &body).unwrap();
        assert!(s.has_solution_w);
        assert!((&s.w - axis / theta.cos()).norm() < 1e-9, "w = {}", s.w);
    }

    #[test]
    fn static_solvability_generic_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let body = v(&[1.0, 1.0, 1.0]);
        let pts: Vec<_> = (0..5)
            .map(|_| v(&[rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)]))
            .collect();
        let g = SourceGeometry::uniform(pts.clone()).unwrap();
        let s = static_range_solvability(&g, &body).unwrap();
        assert!(!s.has_solution_w);
        // oracle: residual from the normal equations
        let a = DMatrix::from_fn(4, 3, |i, j| pts[i + 1][j] - pts[0][j]);
        let d: Vec<f64> = pts.iter().map(|z| (&body - z).norm()).collect();
        let b = DVector::from_fn(4, |i, _| d[i + 1] - d[0]);
        let x = (a.transpose() * &a).lu().solve(&(a.transpose() * &b)).unwrap();
        let res = (&a * x - b).norm();
        assert!((res - s.residual).abs() < 1e-9);
        assert!(s.residual > 1e-3);
    }

    #[test]
    fn static_solvability_rejects_coincident_body() {
        let g = tetra();
        assert!(matches!(
            static_range_solvability(&g, &v(&[10.0, 0.0, 0.0])),
            Err(Error::InvalidInput(_))
        ));
    }
}
