//! The observer families: each variant is an LTV model in a lifted state,
//! rebuilt from the current measurement and stepped jointly with its CRE.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ltv::{Coefficients, LtvSystem, SourceGeometry};
use crate::numerics::{flatten, projector, try_rk4_step, unflatten};
use crate::riccati::{cre_rhs, ensure_pd, GainSchedule, RiccatiState};

/// Which observer is run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObserverKind {
    DirUnbiased,
    DirBiasedSingle,
    DirBiasedMulti,
    RangeUnbiased,
    RangeBiased,
    RangeMultiUnbiased,
    RangeMultiBiased,
    RangeMeasBias,
    RangeAlternate,
}

impl ObserverKind {
    pub const ALL: [ObserverKind; 9] = [
        ObserverKind::DirUnbiased,
        ObserverKind::DirBiasedSingle,
        ObserverKind::DirBiasedMulti,
        ObserverKind::RangeUnbiased,
        ObserverKind::RangeBiased,
        ObserverKind::RangeMultiUnbiased,
        ObserverKind::RangeMultiBiased,
        ObserverKind::RangeMeasBias,
        ObserverKind::RangeAlternate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObserverKind::DirUnbiased => "dir_unbiased",
            ObserverKind::DirBiasedSingle => "dir_biased_single",
            ObserverKind::DirBiasedMulti => "dir_biased_multi",
            ObserverKind::RangeUnbiased => "range_unbiased",
            ObserverKind::RangeBiased => "range_biased",
            ObserverKind::RangeMultiUnbiased => "range_multi_unbiased",
            ObserverKind::RangeMultiBiased => "range_multi_biased",
            ObserverKind::RangeMeasBias => "range_meas_bias",
            ObserverKind::RangeAlternate => "range_alternate",
        }
    }

    pub fn is_direction(self) -> bool {
        matches!(self, ObserverKind::DirUnbiased | ObserverKind::DirBiasedSingle | ObserverKind::DirBiasedMulti)
    }

    /// Whether the state carries the velocity bias `a` in slots `n..2n`.
    pub fn estimates_velocity_bias(self) -> bool {
        matches!(
            self,
            ObserverKind::DirBiasedSingle
                | ObserverKind::DirBiasedMulti
                | ObserverKind::RangeBiased
                | ObserverKind::RangeMultiBiased
        )
    }

    pub fn uses_riccati(self) -> bool {
        self != ObserverKind::RangeAlternate
    }

    fn single_source(self) -> bool {
        matches!(
            self,
            ObserverKind::DirBiasedSingle
                | ObserverKind::RangeUnbiased
                | ObserverKind::RangeBiased
                | ObserverKind::RangeAlternate
        )
    }

    pub fn n_state(self, n: usize) -> usize {
        match self {
            ObserverKind::DirUnbiased => n,
            ObserverKind::DirBiasedSingle | ObserverKind::DirBiasedMulti => 2 * n,
            ObserverKind::RangeUnbiased | ObserverKind::RangeMultiUnbiased | ObserverKind::RangeAlternate => n + 1,
            ObserverKind::RangeBiased | ObserverKind::RangeMultiBiased => 2 * n + 3,
            ObserverKind::RangeMeasBias => n + 2,
        }
    }

    pub fn n_out(self, n: usize, l: usize) -> usize {
        match self {
            k if k.is_direction() => l * n,
            ObserverKind::RangeUnbiased | ObserverKind::RangeBiased | ObserverKind::RangeAlternate => 1,
            _ => l + 1,
        }
    }
}

impl fmt::Display for ObserverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObserverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObserverKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown observer variant '{s}'")))
    }
}

/// An observer kind bound to a space dimension and source geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverVariant {
    pub kind: ObserverKind,
    pub geometry: SourceGeometry,
    /// Run with `u ≡ 0` so that the bias slot estimates the body velocity itself.
    pub velocity_mode: bool,
}

impl ObserverVariant {
    pub fn new(kind: ObserverKind, geometry: SourceGeometry) -> Result<Self> {
        let l = geometry.len();
        if kind.single_source() && l != 1 {
            return Err(Error::InvalidConfig(format!("{kind} uses exactly one source point, got {l}")));
        }
        if kind == ObserverKind::RangeMeasBias && l < 2 {
            return Err(Error::InvalidConfig(format!("{kind} needs at least two source points")));
        }
        Ok(ObserverVariant { kind, geometry, velocity_mode: false })
    }

    /// Variant configured to ignore velocity measurements and estimate the
    /// (constant) body velocity in place of the bias.
    pub fn estimate_velocity_mode(kind: ObserverKind, geometry: SourceGeometry) -> Result<Self> {
        let n = geometry.dim();
        match kind {
            ObserverKind::DirBiasedMulti => {
                let pts = geometry.points();
                if !pts.iter().any(|p| (p - &pts[0]).norm() > 1e-9) {
                    return Err(Error::InvalidConfig(
                        "velocity estimation from directions needs at least two distinct sources".into(),
                    ));
                }
            }
            ObserverKind::RangeMultiBiased => {
                if geometry.dz_rank() < n {
                    return Err(Error::InvalidConfig(format!(
                        "velocity estimation from ranges needs {} sources not in a common {}",
                        n + 1,
                        if n == 3 { "plane" } else { "line" }
                    )));
                }
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "velocity mode is only defined for dir_biased_multi and range_multi_biased, not {kind}"
                )))
            }
        }
        Ok(ObserverVariant { velocity_mode: true, ..ObserverVariant::new(kind, geometry)? })
    }

    pub fn n(&self) -> usize {
        self.geometry.dim()
    }

    pub fn n_state(&self) -> usize {
        self.kind.n_state(self.n())
    }

    pub fn n_out(&self) -> usize {
        self.kind.n_out(self.n(), self.geometry.len())
    }

    /// Coefficients and output vector for the current measurement.
    pub fn model(&self, m: &Measurement) -> Result<FrozenModel> {
        let n = self.n();
        if m.velocity.len() != n {
            return Err(Error::InvalidInput(format!("velocity has {} entries, expected {n}", m.velocity.len())));
        }
        let u = if self.velocity_mode { DVector::zeros(n) } else { m.velocity.clone() };
        let ns = self.n_state();
        let mut a = DMatrix::zeros(ns, ns);
        let mut ul = DVector::zeros(ns);
        ul.rows_mut(0, n).copy_from(&u);
        let g = &self.geometry;

        let (c, y) = match self.kind {
            ObserverKind::DirUnbiased | ObserverKind::DirBiasedSingle | ObserverKind::DirBiasedMulti => {
                if self.kind != ObserverKind::DirUnbiased {
                    a.view_mut((0, n), (n, n)).fill_with_identity();
                }
                self.direction_output(m)?
            }
            ObserverKind::RangeUnbiased | ObserverKind::RangeAlternate => {
                let z = &g.points()[0];
                a.view_mut((n, 0), (1, n)).copy_from(&u.transpose());
                ul[n] = -z.dot(&u);
                let mut c = DMatrix::zeros(1, ns);
                c[(0, n)] = 1.0;
                (c, DVector::from_element(1, half_square(self.ranges(m)?[0])))
            }
            ObserverKind::RangeBiased | ObserverKind::RangeMultiBiased => {
                let (zc, y) = if self.kind == ObserverKind::RangeBiased {
                    (g.points()[0].clone(), DVector::from_element(1, half_square(self.ranges(m)?[0])))
                } else {
                    (g.weighted_centroid(), self.multi_range_output(self.ranges(m)?))
                };
                let iy = 2 * n;
                a.view_mut((0, n), (n, n)).fill_with_identity();
                a.view_mut((iy, 0), (1, n)).copy_from(&u.transpose());
                a.view_mut((iy, n), (1, n)).copy_from(&(-zc.transpose()));
                a[(iy, iy + 1)] = 1.0;
                a.view_mut((iy + 1, n), (1, n)).copy_from(&u.transpose());
                a[(iy + 1, iy + 2)] = 1.0;
                ul[iy] = -zc.dot(&u);
                let mut c = DMatrix::zeros(y.len(), ns);
                c[(0, iy)] = 1.0;
                if self.kind == ObserverKind::RangeMultiBiased {
                    c.view_mut((1, 0), (g.len(), n)).copy_from(&g.dz_matrix());
                }
                (c, y)
            }
            ObserverKind::RangeMultiUnbiased => {
                let cbar = g.weighted_centroid();
                a.view_mut((n, 0), (1, n)).copy_from(&u.transpose());
                ul[n] = -cbar.dot(&u);
                let mut c = DMatrix::zeros(g.len() + 1, ns);
                c[(0, n)] = 1.0;
                c.view_mut((1, 0), (g.len(), n)).copy_from(&g.dz_matrix());
                (c, self.multi_range_output(self.ranges(m)?))
            }
            ObserverKind::RangeMeasBias => {
                let ybar = self.ranges(m)?;
                let cbar = g.weighted_centroid();
                a.view_mut((n, 0), (1, n)).copy_from(&u.transpose());
                ul[n] = -cbar.dot(&u);
                let mut c = DMatrix::zeros(g.len() + 1, ns);
                c[(0, n)] = 1.0;
                c[(0, n + 1)] = g.alpha().dot(ybar);
                c.view_mut((1, 0), (g.len(), n)).copy_from(&g.dz_matrix());
                c.view_mut((1, n + 1), (g.len(), 1)).copy_from(&(-(g.d_matrix() * ybar)));
                (c, self.multi_range_output(ybar))
            }
        };
        Ok(FrozenModel { a, c, u_lift: ul, y })
    }

    fn ranges<'m>(&self, m: &'m Measurement) -> Result<&'m DVector<f64>> {
        let r = m
            .ranges
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("{} needs range measurements", self.kind)))?;
        if r.len() != self.geometry.len() {
            return Err(Error::InvalidInput(format!(
                "{} ranges for {} source points",
                r.len(),
                self.geometry.len()
            )));
        }
        Ok(r)
    }

    /// `[y₀, y₁ − y₀ − ½|z₁|², …]` with `yᵢ = ½ȳᵢ²` and `y₀ = Σ αᵢ(yᵢ − ½|zᵢ|²)`.
    fn multi_range_output(&self, ybar: &DVector<f64>) -> DVector<f64> {
        let g = &self.geometry;
        let shifted: Vec<f64> =
            g.points().iter().zip(ybar.iter()).map(|(z, &r)| half_square(r) - 0.5 * z.norm_squared()).collect();
        let y0: f64 = g.alpha().iter().zip(&shifted).map(|(a, s)| a * s).sum();
        let mut y = DVector::zeros(g.len() + 1);
        y[0] = y0;
        for (j, s) in shifted.iter().enumerate() {
            y[j + 1] = s - y0;
        }
        y
    }

    /// Stacked `Πᵢ C̄` and `Πᵢ zᵢ`; a missing direction zeroes its block.
    fn direction_output(&self, m: &Measurement) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let n = self.n();
        let dirs = m
            .directions
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("{} needs direction measurements", self.kind)))?;
        let l = self.geometry.len();
        if dirs.len() != l {
            return Err(Error::InvalidInput(format!("{} directions for {l} source points", dirs.len())));
        }
        let mut c = DMatrix::zeros(l * n, self.n_state());
        let mut y = DVector::zeros(l * n);
        for (i, (d, z)) in dirs.iter().zip(self.geometry.points()).enumerate() {
            if let Some(d) = d {
                if d.len() != n {
                    return Err(Error::InvalidInput(format!("direction {i} has dimension {}", d.len())));
                }
                let p = projector(d);
                y.rows_mut(i * n, n).copy_from(&(&p * z));
                c.view_mut((i * n, 0), (n, n)).copy_from(&p);
            }
        }
        Ok((c, y))
    }

    /// Lifted state of a body at `x` with velocity bias `a` and range bias `b`.
    pub fn lift(&self, x: &DVector<f64>, a: &DVector<f64>, b: f64) -> DVector<f64> {
        let n = self.n();
        let g = &self.geometry;
        let mut out = DVector::zeros(self.n_state());
        out.rows_mut(0, n).copy_from(x);
        match self.kind {
            ObserverKind::DirUnbiased => {}
            ObserverKind::DirBiasedSingle | ObserverKind::DirBiasedMulti => {
                out.rows_mut(n, n).copy_from(a);
            }
            ObserverKind::RangeUnbiased | ObserverKind::RangeAlternate => {
                out[n] = 0.5 * (x - &g.points()[0]).norm_squared();
            }
            ObserverKind::RangeBiased | ObserverKind::RangeMultiBiased => {
                out.rows_mut(n, n).copy_from(a);
                out[2 * n] = if self.kind == ObserverKind::RangeBiased {
                    0.5 * (x - &g.points()[0]).norm_squared()
                } else {
                    0.5 * x.norm_squared() - g.weighted_centroid().dot(x)
                };
                out[2 * n + 1] = a.dot(x);
                out[2 * n + 2] = a.norm_squared();
            }
            ObserverKind::RangeMultiUnbiased => {
                out[n] = 0.5 * x.norm_squared() - g.weighted_centroid().dot(x);
            }
            ObserverKind::RangeMeasBias => {
                out[n] = 0.5 * x.norm_squared() - g.weighted_centroid().dot(x) - 0.5 * b * b;
                out[n + 1] = b;
            }
        }
        out
    }

    pub fn position(&self, state: &DVector<f64>) -> DVector<f64> {
        state.rows(0, self.n()).into_owned()
    }

    /// Bias estimate in the state, if the variant carries one.
    pub fn velocity_bias(&self, state: &DVector<f64>) -> Option<DVector<f64>> {
        self.kind.estimates_velocity_bias().then(|| state.rows(self.n(), self.n()).into_owned())
    }

    pub fn range_bias(&self, state: &DVector<f64>) -> Option<f64> {
        (self.kind == ObserverKind::RangeMeasBias).then(|| state[self.n() + 1])
    }

    /// Initial observer state from position and bias guesses (unknown range bias starts at 0).
    pub fn initial_state(&self, x_hat: &DVector<f64>, a_hat: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n();
        if x_hat.len() != n || a_hat.len() != n {
            return Err(Error::InvalidConfig(format!(
                "initial estimates must have dimension {n}, got {} and {}",
                x_hat.len(),
                a_hat.len()
            )));
        }
        Ok(self.lift(x_hat, a_hat, 0.0))
    }
}

fn half_square(r: f64) -> f64 {
    0.5 * r * r
}

/// One sample of the sensor channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub t: f64,
    /// Unit vectors from each source to the body; `None` where the body sits on the source.
    pub directions: Option<Vec<Option<DVector<f64>>>>,
    /// (Possibly biased) distances to each source.
    pub ranges: Option<DVector<f64>>,
    /// Measured velocity `u`.
    pub velocity: DVector<f64>,
}

impl Measurement {
    pub fn validate(&self) -> Result<()> {
        if let Some(dirs) = &self.directions {
            for d in dirs.iter().flatten() {
                if (d.norm() - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidInput(format!("direction with norm {} is not a unit vector", d.norm())));
                }
            }
        }
        if let Some(r) = &self.ranges {
            if r.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::InvalidInput("ranges must be nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Number of direction channels dropped because the body coincides with a source.
    pub fn dropped_directions(&self) -> usize {
        self.directions.as_ref().map_or(0, |d| d.iter().filter(|d| d.is_none()).count())
    }
}

/// Observer model frozen at one measurement: `Ẋ = AX + ū`, `y = CX`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub u_lift: DVector<f64>,
    pub y: DVector<f64>,
}

impl FrozenModel {
    pub fn residual(&self, x_hat: &DVector<f64>) -> DVector<f64> {
        &self.y - &self.c * x_hat
    }
}

/// The observer model as an [`LtvSystem`], driven by a measurement stream.
pub struct MeasuredSystem<F> {
    variant: ObserverVariant,
    measure: F,
}

impl<F: Fn(f64) -> Measurement> MeasuredSystem<F> {
    pub fn new(variant: ObserverVariant, measure: F) -> Self {
        MeasuredSystem { variant, measure }
    }
}

impl<F: Fn(f64) -> Measurement> LtvSystem for MeasuredSystem<F> {
    fn n_state(&self) -> usize {
        self.variant.n_state()
    }

    fn n_out(&self) -> usize {
        self.variant.n_out()
    }

    fn coefficients(&self, t: f64) -> Coefficients {
        match self.variant.model(&(self.measure)(t)) {
            Ok(m) => Coefficients { a: m.a, c: m.c, u_lift: m.u_lift },
            Err(_) => {
                let ns = self.n_state();
                Coefficients {
                    a: DMatrix::from_element(ns, ns, f64::NAN),
                    c: DMatrix::from_element(self.n_out(), ns, f64::NAN),
                    u_lift: DVector::from_element(ns, f64::NAN),
                }
            }
        }
    }
}

/// Estimate and Riccati matrix of a running observer.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub x_hat: DVector<f64>,
    /// `None` for the non-Riccati alternate observer.
    pub riccati: Option<RiccatiState>,
    pub variant: Arc<ObserverVariant>,
    pub t: f64,
}

impl ObserverState {
    pub fn new(variant: Arc<ObserverVariant>, x_hat: DVector<f64>, p0_scale: f64, t: f64) -> Result<Self> {
        if x_hat.len() != variant.n_state() {
            return Err(Error::InvalidConfig(format!(
                "{} has {} states, initial estimate has {}",
                variant.kind,
                variant.n_state(),
                x_hat.len()
            )));
        }
        let riccati = if variant.kind.uses_riccati() {
            if !(p0_scale > 0.0) {
                return Err(Error::InvalidConfig(format!("P(0) scale must be positive, got {p0_scale}")));
            }
            Some(RiccatiState::scaled_identity(variant.n_state(), p0_scale, t)?)
        } else {
            None
        };
        Ok(ObserverState { x_hat, riccati, variant, t })
    }
}

fn check_gain_dims(g: &GainSchedule, v: &ObserverVariant, t: f64) -> Result<()> {
    let (q, vv) = (g.q(t)?, g.v(t)?);
    if q.dim() != v.n_out() || vv.dim() != v.n_state() {
        return Err(Error::InvalidConfig(format!(
            "{} needs Q of size {} and V of size {}, got {} and {}",
            v.kind,
            v.n_out(),
            v.n_state(),
            q.dim(),
            vv.dim()
        )));
    }
    Ok(())
}

/// Right-hand side of `[X̂; P]` for the observer, at time `t` with measurement `m`.
fn observer_rhs(
    v: &ObserverVariant,
    g: &GainSchedule,
    m: &Measurement,
    t: f64,
    x_hat: &DVector<f64>,
    p: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let model = v.model(m)?;
    let q = g.q(t)?;
    let vv = g.v(t)?;
    let pct = p * model.c.transpose();
    let dx = &model.a * x_hat + &model.u_lift + (&pct * q.as_matrix()) * model.residual(x_hat) * g.k(t)?;
    let dp = cre_rhs(&model.a, &model.c, q.as_matrix(), vv.as_matrix(), p);
    Ok((dx, dp))
}

fn joint_rk4(
    os: &ObserverState,
    g: &GainSchedule,
    measure: &dyn Fn(f64) -> Result<Measurement>,
    h: f64,
) -> Result<ObserverState> {
    let rs = os.riccati.as_ref().expect("Riccati observer");
    let v = &*os.variant;
    let ns = v.n_state();
    let mut s = DVector::zeros(ns + ns * ns);
    s.rows_mut(0, ns).copy_from(&os.x_hat);
    s.rows_mut(ns, ns * ns).copy_from(&flatten(rs.p.as_matrix()));
    let next = try_rk4_step(
        |t, s| {
            let x = s.rows(0, ns).into_owned();
            let p = unflatten(&s.as_slice()[ns..], ns, ns);
            let (dx, dp) = observer_rhs(v, g, &measure(t)?, t, &x, &p)?;
            let mut out = DVector::zeros(s.len());
            out.rows_mut(0, ns).copy_from(&dx);
            out.rows_mut(ns, ns * ns).copy_from(&flatten(&dp));
            Ok(out)
        },
        os.t,
        &s,
        h,
    )?;
    let t = os.t + h;
    let p = ensure_pd(&unflatten(&next.as_slice()[ns..], ns, ns), t)?;
    Ok(ObserverState {
        x_hat: next.rows(0, ns).into_owned(),
        riccati: Some(RiccatiState { p, t }),
        variant: os.variant.clone(),
        t,
    })
}

/// Advances estimate and Riccati matrix together over `[t, t+h]` with RK4.
/// `measure` is queried at the stage times; pass a constant closure for a
/// zero-order hold. A step losing positive-definiteness is retried once as two half steps.
pub fn observer_step(
    os: &ObserverState,
    g: &GainSchedule,
    measure: &dyn Fn(f64) -> Result<Measurement>,
    h: f64,
) -> Result<ObserverState> {
    if os.riccati.is_none() {
        return Err(Error::InvalidInput(format!(
            "{} has no Riccati matrix; step it with alternate_range_step",
            os.variant.kind
        )));
    }
    check_gain_dims(g, &os.variant, os.t)?;
    match joint_rk4(os, g, measure, h) {
        Err(Error::PdViolation { .. }) => {
            let mid = joint_rk4(os, g, measure, 0.5 * h)?;
            let mut out = joint_rk4(&mid, g, measure, 0.5 * h)?;
            out.t = os.t + h;
            if let Some(r) = out.riccati.as_mut() {
                r.t = out.t;
            }
            Ok(out)
        }
        other => other,
    }
}

/// `A − K C` at one measurement.
pub fn error_dynamics_matrix(model: &FrozenModel, g: &GainSchedule, p: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let k = p * model.c.transpose() * g.q(t)?.as_matrix() * g.k(t)?;
    Ok(&model.a - k * &model.c)
}

/// State `(x̂, ŷ)` of the gradient-type range observer.
#[derive(Debug, Clone, PartialEq)]
pub struct AlternateState {
    pub x_hat: DVector<f64>,
    pub y_hat: f64,
    pub t: f64,
}

impl AlternateState {
    pub fn as_vector(&self) -> DVector<f64> {
        let n = self.x_hat.len();
        let mut v = DVector::zeros(n + 1);
        v.rows_mut(0, n).copy_from(&self.x_hat);
        v[n] = self.y_hat;
        v
    }
}

/// One RK4 step of `ẋ̂ = u + k₁ u (y − ŷ)`, `ŷ̇ = uᵀx̂ − zᵀu + k₂(t)(y − ŷ)` with
/// `y = ½ȳ²` the half squared range to the source `z`. The function
/// `|x̃|²/k₁ + ỹ²` then decreases as `−2k₂ỹ²`.
pub fn alternate_range_step(
    state: &AlternateState,
    source: &DVector<f64>,
    k1: f64,
    k2_of: &dyn Fn(f64) -> f64,
    measure: &dyn Fn(f64) -> Result<Measurement>,
    h: f64,
) -> Result<AlternateState> {
    if !(k1 > 0.0) {
        return Err(Error::InvalidConfig(format!("k1 must be positive, got {k1}")));
    }
    let n = state.x_hat.len();
    let next = try_rk4_step(
        |t, s| {
            let m = measure(t)?;
            let k2 = k2_of(t);
            if !(k2 >= 0.0) {
                return Err(Error::InvalidConfig(format!("k2 must be nonnegative, got {k2} at t = {t}")));
            }
            let r = m
                .ranges
                .as_ref()
                .and_then(|r| r.get(0).copied())
                .ok_or_else(|| Error::InvalidInput("range_alternate needs a range measurement".into()))?;
            let u = &m.velocity;
            let x = s.rows(0, n);
            let innovation = half_square(r) - s[n];
            let mut out = DVector::zeros(n + 1);
            out.rows_mut(0, n).copy_from(&(u * (1.0 + k1 * innovation)));
            out[n] = u.dot(&x) - source.dot(u) + k2 * innovation;
            Ok(out)
        },
        state.t,
        &state.as_vector(),
        h,
    )?;
    Ok(AlternateState { x_hat: next.rows(0, n).into_owned(), y_hat: next[n], t: state.t + h })
}
