//! Ground truth, sensor synthesis and full scenario runs.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ltv::{
    pe_condition_report, riccati_gramian_wq, ExcitationInputs, LtvSystem, PeKind, PeWindow, SourceGeometry,
};
use crate::numerics::{jacobi_eigenvalues, spectral_norm, SymMatrix};
use crate::observers::{
    alternate_range_step, observer_step, AlternateState, Measurement, MeasuredSystem, ObserverKind, ObserverState,
    ObserverVariant,
};
use crate::riccati::{rate_lower_bound, ConditioningBounds, GainSchedule};

/// Cubic Hermite interpolation through timed position samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    times: Vec<f64>,
    points: Vec<DVector<f64>>,
    tangents: Vec<DVector<f64>>,
}

impl SampledPath {
    pub fn new(times: Vec<f64>, points: Vec<DVector<f64>>) -> Result<Self> {
        if times.len() < 2 || times.len() != points.len() {
            return Err(Error::InvalidConfig(
                "sampled trajectory needs at least two (time, position) samples".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig("sample times must be strictly increasing".into()));
        }
        let n = points[0].len();
        if points.iter().any(|p| p.len() != n) {
            return Err(Error::InvalidConfig("samples have mixed dimensions".into()));
        }
        let last = times.len() - 1;
        let tangents = (0..=last)
            .map(|i| {
                let (a, b) = (i.saturating_sub(1), (i + 1).min(last));
                (&points[b] - &points[a]) / (times[b] - times[a])
            })
            .collect();
        Ok(SampledPath { times, points, tangents })
    }

    fn locate(&self, t: f64) -> Option<(usize, f64, f64)> {
        let last = self.times.len() - 1;
        if t < self.times[0] || t > self.times[last] {
            return None;
        }
        let i = self.times.partition_point(|&s| s <= t).clamp(1, last) - 1;
        let dt = self.times[i + 1] - self.times[i];
        Some((i, (t - self.times[i]) / dt, dt))
    }

    /// Position, velocity and acceleration; held constant outside the sampled span.
    fn eval(&self, t: f64) -> [DVector<f64>; 3] {
        let n = self.points[0].len();
        let Some((i, s, dt)) = self.locate(t) else {
            let end = if t < self.times[0] { 0 } else { self.points.len() - 1 };
            return [self.points[end].clone(), DVector::zeros(n), DVector::zeros(n)];
        };
        let (p0, p1) = (&self.points[i], &self.points[i + 1]);
        let (m0, m1) = (&self.tangents[i] * dt, &self.tangents[i + 1] * dt);
        let (s2, s3) = (s * s, s * s * s);
        let pos = p0 * (2.0 * s3 - 3.0 * s2 + 1.0) + &m0 * (s3 - 2.0 * s2 + s) + p1 * (-2.0 * s3 + 3.0 * s2)
            + &m1 * (s3 - s2);
        let vel = (p0 * (6.0 * s2 - 6.0 * s) + &m0 * (3.0 * s2 - 4.0 * s + 1.0) + p1 * (-6.0 * s2 + 6.0 * s)
            + &m1 * (3.0 * s2 - 2.0 * s))
            / dt;
        let acc = (p0 * (12.0 * s - 6.0) + &m0 * (6.0 * s - 4.0) + p1 * (-12.0 * s + 6.0) + &m1 * (6.0 * s - 2.0))
            / (dt * dt);
        [pos, vel, acc]
    }
}

/// Body motion with analytic derivatives.
#[derive(Debug, Clone, PartialEq)]
pub enum Trajectory {
    /// `xᵢ(t) = offsetᵢ + cos_ampᵢ cos(ωᵢt) + sin_ampᵢ sin(ωᵢt)`.
    Lissajous { offset: DVector<f64>, cos_amp: DVector<f64>, sin_amp: DVector<f64>, omega: DVector<f64> },
    /// Horizontal circle `center + r(cos ωt, sin ωt, 0)`.
    Circle { center: DVector<f64>, radius: f64, omega: f64 },
    Static { position: DVector<f64> },
    ConstantVelocity { start: DVector<f64>, velocity: DVector<f64> },
    Samples(SampledPath),
}

impl Trajectory {
    /// `(20 cos t − 15, 20 sin t, −2 cos t + 6)`.
    pub fn preset_lissajous() -> Self {
        Trajectory::Lissajous {
            offset: DVector::from_column_slice(&[-15.0, 0.0, 6.0]),
            cos_amp: DVector::from_column_slice(&[20.0, 0.0, -2.0]),
            sin_amp: DVector::from_column_slice(&[0.0, 20.0, 0.0]),
            omega: DVector::from_element(3, 1.0),
        }
    }

    /// `(20 cos t − 15, 20 sin t, 4)`.
    pub fn preset_circle() -> Self {
        Trajectory::Circle { center: DVector::from_column_slice(&[-15.0, 0.0, 4.0]), radius: 20.0, omega: 1.0 }
    }

    pub fn preset_static() -> Self {
        Trajectory::Static { position: DVector::from_column_slice(&[5.0, 0.0, 4.0]) }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Trajectory::Lissajous { .. } => "lissajous",
            Trajectory::Circle { .. } => "circle",
            Trajectory::Static { .. } => "static",
            Trajectory::ConstantVelocity { .. } => "constant_velocity",
            Trajectory::Samples(_) => "samples",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Trajectory::Lissajous { offset, .. } => offset.len(),
            Trajectory::Circle { center, .. } => center.len(),
            Trajectory::Static { position } => position.len(),
            Trajectory::ConstantVelocity { start, .. } => start.len(),
            Trajectory::Samples(s) => s.points[0].len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if !(2..=3).contains(&n) {
            return Err(Error::InvalidConfig(format!("trajectory dimension must be 2 or 3, got {n}")));
        }
        let ok = match self {
            Trajectory::Lissajous { cos_amp, sin_amp, omega, .. } => {
                cos_amp.len() == n && sin_amp.len() == n && omega.len() == n
            }
            Trajectory::ConstantVelocity { velocity, .. } => velocity.len() == n,
            _ => true,
        };
        if !ok {
            return Err(Error::InvalidConfig(format!("{} parameters have inconsistent dimensions", self.name())));
        }
        Ok(())
    }

    pub fn position(&self, t: f64) -> DVector<f64> {
        match self {
            Trajectory::Lissajous { offset, cos_amp, sin_amp, omega } => DVector::from_fn(offset.len(), |i, _| {
                offset[i] + cos_amp[i] * (omega[i] * t).cos() + sin_amp[i] * (omega[i] * t).sin()
            }),
            Trajectory::Circle { center, radius, omega } => {
                let mut p = center.clone();
                p[0] += radius * (omega * t).cos();
                p[1] += radius * (omega * t).sin();
                p
            }
            Trajectory::Static { position } => position.clone(),
            Trajectory::ConstantVelocity { start, velocity } => start + velocity * t,
            Trajectory::Samples(s) => s.eval(t)[0].clone(),
        }
    }

    pub fn velocity(&self, t: f64) -> DVector<f64> {
        match self {
            Trajectory::Lissajous { cos_amp, sin_amp, omega, .. } => DVector::from_fn(omega.len(), |i, _| {
                omega[i] * (-cos_amp[i] * (omega[i] * t).sin() + sin_amp[i] * (omega[i] * t).cos())
            }),
            Trajectory::Circle { center, radius, omega } => {
                let mut v = DVector::zeros(center.len());
                v[0] = -radius * omega * (omega * t).sin();
                v[1] = radius * omega * (omega * t).cos();
                v
            }
            Trajectory::Static { position } => DVector::zeros(position.len()),
            Trajectory::ConstantVelocity { velocity, .. } => velocity.clone(),
            Trajectory::Samples(s) => s.eval(t)[1].clone(),
        }
    }

    pub fn acceleration(&self, t: f64) -> DVector<f64> {
        match self {
            Trajectory::Lissajous { cos_amp, sin_amp, omega, .. } => DVector::from_fn(omega.len(), |i, _| {
                -omega[i] * omega[i] * (cos_amp[i] * (omega[i] * t).cos() + sin_amp[i] * (omega[i] * t).sin())
            }),
            Trajectory::Circle { center, radius, omega } => {
                let mut a = DVector::zeros(center.len());
                a[0] = -radius * omega * omega * (omega * t).cos();
                a[1] = -radius * omega * omega * (omega * t).sin();
                a
            }
            Trajectory::Static { position } => DVector::zeros(position.len()),
            Trajectory::ConstantVelocity { velocity, .. } => DVector::zeros(velocity.len()),
            Trajectory::Samples(s) => s.eval(t)[2].clone(),
        }
    }
}

/// Complete description of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub trajectory: Trajectory,
    pub sources: SourceGeometry,
    pub kind: ObserverKind,
    pub velocity_mode: bool,
    /// Velocity bias: measured velocity is `ẋ − a`.
    pub bias_a: DVector<f64>,
    /// Common offset added to every range.
    pub range_bias_b: f64,
    pub xhat0: DVector<f64>,
    pub ahat0: DVector<f64>,
    pub p0_scale: f64,
    pub noise_vel_std: f64,
    pub noise_pos_std: f64,
    pub seed: u64,
    pub h: f64,
    pub horizon: f64,
    pub k: f64,
    pub q_scale: f64,
    pub eps_v: f64,
    /// Explicit diagonal of `V`, replacing the per-variant default.
    pub v_diag: Option<Vec<f64>>,
    /// Gains of the alternate (non-Riccati) range observer.
    pub k1: f64,
    pub k2: f64,
}

fn vec3(x: f64, y: f64, z: f64) -> DVector<f64> {
    DVector::from_column_slice(&[x, y, z])
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::preset(1, ObserverKind::DirBiasedSingle).expect("built-in scenario")
    }
}

impl ScenarioConfig {
    /// One of the three published scenarios with the given observer.
    ///
    /// Source layouts not fixed by the published setup: the second range source
    /// for the circle is `(0,0,10)` (a source in the plane `z = 0` would leave a
    /// mirror ambiguity), static direction sources are `(0,0,0), (10,0,0)` and
    /// static range sources add `(0,10,0), (0,0,10)`.
    pub fn preset(scenario: u8, kind: ObserverKind) -> Result<Self> {
        let trajectory = match scenario {
            1 => Trajectory::preset_lissajous(),
            2 => Trajectory::preset_circle(),
            3 => Trajectory::preset_static(),
            s => return Err(Error::InvalidConfig(format!("scenario must be 1, 2 or 3, got {s}"))),
        };
        let sources = SourceGeometry::uniform(Self::preset_sources(scenario, kind))?;
        let biased = kind.estimates_velocity_bias();
        let cfg = ScenarioConfig {
            trajectory,
            sources,
            kind,
            velocity_mode: false,
            bias_a: if biased { vec3(0.33, 0.66, 0.99) } else { DVector::zeros(3) },
            range_bias_b: 0.0,
            xhat0: vec3(4.0, 6.0, 12.0),
            ahat0: DVector::zeros(3),
            p0_scale: 100.0,
            noise_vel_std: 0.0,
            noise_pos_std: 0.0,
            seed: 0,
            h: 1e-3,
            horizon: 30.0,
            k: 1.0,
            q_scale: 1.5,
            eps_v: 1e-3,
            v_diag: None,
            k1: 1e-3,
            k2: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset_sources(scenario: u8, kind: ObserverKind) -> Vec<DVector<f64>> {
        let origin = vec3(0.0, 0.0, 0.0);
        let multi = matches!(
            kind,
            ObserverKind::DirBiasedMulti | ObserverKind::RangeMultiUnbiased | ObserverKind::RangeMultiBiased | ObserverKind::RangeMeasBias
        );
        match (scenario, kind.is_direction(), multi) {
            (_, _, false) => vec![origin],
            (1, _, true) => vec![origin],
            (2, true, true) => vec![origin],
            (2, false, true) => vec![origin, vec3(0.0, 0.0, 10.0)],
            (_, true, true) => vec![origin, vec3(10.0, 0.0, 0.0)],
            (_, false, true) => vec![origin, vec3(10.0, 0.0, 0.0), vec3(0.0, 10.0, 0.0), vec3(0.0, 0.0, 10.0)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        let n = self.trajectory.dim();
        if self.sources.dim() != n {
            return Err(Error::InvalidConfig(format!(
                "sources are {}-dimensional but the trajectory is {n}-dimensional",
                self.sources.dim()
            )));
        }
        for (name, v) in [("bias_a", &self.bias_a), ("xhat0", &self.xhat0), ("ahat0", &self.ahat0)] {
            if v.len() != n {
                return Err(Error::InvalidConfig(format!("{name} must have {n} entries, got {}", v.len())));
            }
        }
        let positive = [("h", self.h), ("horizon", self.horizon), ("p0_scale", self.p0_scale), ("k1", self.k1)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("noise_vel_std", self.noise_vel_std),
            ("noise_pos_std", self.noise_pos_std),
            ("q_scale", self.q_scale),
            ("eps_v", self.eps_v),
            ("k2", self.k2),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.horizon < self.h {
            return Err(Error::InvalidConfig("horizon is shorter than one step".into()));
        }
        if !(self.k >= 0.5) {
            return Err(Error::InvalidConfig(format!("gain k must be >= 0.5, got {}", self.k)));
        }
        if let Some(d) = &self.v_diag {
            let ns = self.kind.n_state(n);
            if d.len() != ns {
                return Err(Error::InvalidConfig(format!("v_diag needs {ns} entries for {}, got {}", self.kind, d.len())));
            }
            if d.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::InvalidConfig("v_diag entries must be nonnegative".into()));
            }
        }
        self.variant().map(|_| ())
    }

    pub fn variant(&self) -> Result<ObserverVariant> {
        if self.velocity_mode {
            ObserverVariant::estimate_velocity_mode(self.kind, self.sources.clone())
        } else {
            ObserverVariant::new(self.kind, self.sources.clone())
        }
    }

    /// Diagonal of `V`: `0.01` on the position slots, `0.1` on the half-squared-range
    /// slot of every range layout, zero elsewhere, plus `eps_v` everywhere.
    pub fn v_diagonal(&self) -> Vec<f64> {
        if let Some(d) = &self.v_diag {
            return d.clone();
        }
        let n = self.trajectory.dim();
        let ns = self.kind.n_state(n);
        let mut d = vec![0.0; ns];
        d[..n].iter_mut().for_each(|x| *x = 0.01);
        match self.kind {
            ObserverKind::RangeBiased | ObserverKind::RangeMultiBiased => d[2 * n] = 0.1,
            ObserverKind::RangeUnbiased
            | ObserverKind::RangeMultiUnbiased
            | ObserverKind::RangeAlternate
            | ObserverKind::RangeMeasBias => d[n] = 0.1,
            _ => {}
        }
        d.iter().map(|x| x + self.eps_v).collect()
    }

    pub fn gains(&self) -> Result<GainSchedule> {
        let n_out = self.kind.n_out(self.trajectory.dim(), self.sources.len());
        GainSchedule::constant(
            self.k,
            SymMatrix::scaled_identity(n_out, self.q_scale),
            SymMatrix::from_diagonal(&self.v_diagonal()),
        )
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.h).round().max(1.0) as usize
    }

    /// Observer model driven by noise-free measurements of this scenario.
    pub fn noise_free_system(&self) -> Result<MeasuredSystem<impl Fn(f64) -> Measurement + '_>> {
        let variant = self.variant()?;
        let zero = NoiseSample::zero(self.trajectory.dim());
        Ok(MeasuredSystem::new(variant, move |t| synthesize_measurement_with(self, t, &zero)))
    }
}

/// Per-step noise draw, held over the step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub velocity: DVector<f64>,
    pub position: DVector<f64>,
}

impl NoiseSample {
    pub fn zero(n: usize) -> Self {
        NoiseSample { velocity: DVector::zeros(n), position: DVector::zeros(n) }
    }

    /// Always consumes `2n` normals so the stream does not depend on the standard deviations.
    pub fn draw<R: Rng>(rng: &mut R, n: usize, vel_std: f64, pos_std: f64) -> Self {
        let mut normal = |s: f64| DVector::from_fn(n, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        let velocity = normal(vel_std);
        let position = normal(pos_std);
        NoiseSample { velocity, position }
    }
}

/// Sensor readings at `t` with a fresh noise draw from `rng`.
pub fn synthesize_measurement<R: Rng>(cfg: &ScenarioConfig, t: f64, rng: &mut R) -> Measurement {
    let noise = NoiseSample::draw(rng, cfg.trajectory.dim(), cfg.noise_vel_std, cfg.noise_pos_std);
    synthesize_measurement_with(cfg, t, &noise)
}

/// Sensor readings at `t` for a given noise sample. Directions from a source the
/// (noisy) body sits on are dropped.
pub fn synthesize_measurement_with(cfg: &ScenarioConfig, t: f64, noise: &NoiseSample) -> Measurement {
    let x = cfg.trajectory.position(t) + &noise.position;
    let velocity = cfg.trajectory.velocity(t) - &cfg.bias_a + &noise.velocity;
    let pts = cfg.sources.points();
    let (directions, ranges) = if cfg.kind.is_direction() {
        let dirs = pts
            .iter()
            .map(|z| {
                let d = &x - z;
                let r = d.norm();
                (r >= 1e-9).then(|| d / r)
            })
            .collect();
        (Some(dirs), None)
    } else {
        let r = DVector::from_iterator(pts.len(), pts.iter().map(|z| (&x - z).norm() + cfg.range_bias_b));
        (None, Some(r))
    };
    Measurement { t, directions, ranges, velocity }
}

/// One logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub x: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub a: DVector<f64>,
    /// Bias estimate; zero for observers that assume an unbiased velocity.
    pub a_hat: DVector<f64>,
    pub b: f64,
    pub b_hat: f64,
    /// Lyapunov function (`X̃ᵀP⁻¹X̃`, or `|x̃|²/k₁ + ỹ²` for the alternate observer).
    pub lyap: f64,
    /// `NaN` for the alternate observer.
    pub lam_min_p: f64,
    pub lam_max_p: f64,
    pub trace_p: f64,
    pub trace_p_inv: f64,
    pub residual_norm: f64,
    pub dropped_directions: usize,
}

impl StepRecord {
    pub fn position_error(&self) -> f64 {
        (&self.x - &self.x_hat).norm()
    }

    pub fn bias_error(&self) -> f64 {
        (&self.a - &self.a_hat).norm()
    }

    pub fn log_lyap(&self) -> f64 {
        self.lyap.max(f64::MIN_POSITIVE).ln()
    }
}

/// Scenario output: per-step records plus the constants measured along the run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub kind: ObserverKind,
    pub records: Vec<StepRecord>,
    pub bounds: ConditioningBounds,
}

/// Derived statistics of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub horizon: f64,
    pub initial_position_error: f64,
    pub final_position_error: f64,
    pub final_bias_error: f64,
    pub final_range_bias_error: f64,
    /// Least-squares slope of `ln V` over the second half of the run.
    pub log_lyap_slope: f64,
    /// `inf λmin(P)` and `sup λmax(P)` over the second half.
    pub p_m: f64,
    pub p_big_m: f64,
    pub rate_bound: f64,
    /// Tighter decay rate `v_m p_m / p_M²` from the same constants.
    pub rate_bound_direct: f64,
    pub min_lambda_min: f64,
    pub max_lambda_max: f64,
    pub tail_rms_position_error: f64,
    pub dropped_directions: usize,
    pub bounds: ConditioningBounds,
}

/// Ordinary least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    sxy / sxx
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl RunLog {
    pub fn final_record(&self) -> &StepRecord {
        self.records.last().expect("a run logs at least its initial state")
    }

    fn window(&self, t0: f64, t1: f64) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(move |r| r.t >= t0 - 1e-9 && r.t <= t1 + 1e-9)
    }

    /// Least-squares slope of `ln V` over `[t0, t1]`.
    pub fn log_lyap_slope(&self, t0: f64, t1: f64) -> f64 {
        let (ts, ls): (Vec<f64>, Vec<f64>) = self.window(t0, t1).map(|r| (r.t, r.log_lyap())).unzip();
        ls_slope(&ts, &ls)
    }

    /// `(inf λmin(P), sup λmax(P))` over `[t0, t1]`.
    pub fn p_extrema(&self, t0: f64, t1: f64) -> (f64, f64) {
        self.window(t0, t1)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.lam_min_p), hi.max(r.lam_max_p)))
    }

    pub fn rms_position_error(&self, t0: f64, t1: f64) -> f64 {
        let (sum, count) = self.window(t0, t1).fold((0.0, 0usize), |(s, c), r| (s + r.position_error().powi(2), c + 1));
        (sum / count as f64).sqrt()
    }

    /// Median position error in each of `windows` equal slices of `[t0, t1]`.
    pub fn windowed_error_medians(&self, t0: f64, t1: f64, windows: usize) -> Vec<f64> {
        let width = (t1 - t0) / windows as f64;
        (0..windows)
            .map(|w| {
                let (a, b) = (t0 + w as f64 * width, t0 + (w + 1) as f64 * width);
                let mut errs: Vec<f64> =
                    self.records.iter().filter(|r| r.t >= a && r.t < b).map(StepRecord::position_error).collect();
                if errs.is_empty() {
                    f64::NAN
                } else {
                    median(&mut errs)
                }
            })
            .collect()
    }

    pub fn summary(&self) -> RunSummary {
        let first = &self.records[0];
        let last = self.final_record();
        let horizon = last.t - first.t;
        let mid = first.t + 0.5 * horizon;
        let (p_m, p_big_m) = self.p_extrema(mid, last.t);
        let (min_lambda_min, max_lambda_max) = self.p_extrema(first.t, last.t);
        RunSummary {
            steps: self.records.len() - 1,
            horizon,
            initial_position_error: first.position_error(),
            final_position_error: last.position_error(),
            final_bias_error: last.bias_error(),
            final_range_bias_error: (last.b - last.b_hat).abs(),
            log_lyap_slope: self.log_lyap_slope(mid, last.t),
            p_m,
            p_big_m,
            rate_bound: rate_lower_bound(&self.bounds, p_m, p_big_m),
            rate_bound_direct: self.bounds.v_m * p_m / (p_big_m * p_big_m),
            min_lambda_min,
            max_lambda_max,
            tail_rms_position_error: self.rms_position_error(first.t + 0.75 * horizon, last.t),
            dropped_directions: self.records.iter().map(|r| r.dropped_directions).sum(),
            bounds: self.bounds,
        }
    }
}

/// A run that stopped early, with everything logged up to the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub error: Error,
    pub partial: RunLog,
}

enum Estimator {
    Riccati(ObserverState),
    Alternate(AlternateState),
}

struct BoundsTracker {
    b: ConditioningBounds,
}

impl BoundsTracker {
    fn new(v: &SymMatrix) -> Result<Self> {
        let (v_m, v_big_m) = v.eig_extrema()?;
        Ok(BoundsTracker {
            b: ConditioningBounds { v_m, v_big_m, v_trace: v.trace(), ..Default::default() },
        })
    }

    fn observe(&mut self, a: &DMatrix<f64>, c: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<()> {
        self.b.k_a = self.b.k_a.max(spectral_norm(a)?);
        self.b.mu_q_bar = self.b.mu_q_bar.max((c.transpose() * q * c).trace());
        Ok(())
    }
}

/// Largest `h · ρ` (step times error-dynamics stiffness) taken in one RK4 step.
const STIFF_STEP: f64 = 0.05;
const MAX_SUBSTEPS: usize = 4096;

/// Runs truth and observer side by side for `cfg.horizon` seconds, logging every step.
pub fn run_scenario(cfg: &ScenarioConfig) -> std::result::Result<RunLog, Box<RunFailure>> {
    let mut log = RunLog { kind: cfg.kind, records: Vec::new(), bounds: ConditioningBounds::default() };
    let fail = |error: Error, log: RunLog| Box::new(RunFailure { error, partial: log });
    macro_rules! tryf {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => return Err(fail(e, log)),
            }
        };
    }
    tryf!(cfg.validate());
    let variant = Arc::new(tryf!(cfg.variant()));
    let gains = tryf!(cfg.gains());
    let q = tryf!(gains.q(0.0)).into_inner();
    let mut tracker = tryf!(BoundsTracker::new(&tryf!(gains.v(0.0))));
    let n = variant.n();
    let truth_a = &cfg.bias_a;
    let b = cfg.range_bias_b;
    let x0_hat = tryf!(variant.initial_state(&cfg.xhat0, &cfg.ahat0));
    let mut est = if cfg.kind.uses_riccati() {
        Estimator::Riccati(tryf!(ObserverState::new(variant.clone(), x0_hat, cfg.p0_scale, 0.0)))
    } else {
        Estimator::Alternate(AlternateState {
            x_hat: x0_hat.rows(0, n).into_owned(),
            y_hat: x0_hat[n],
            t: 0.0,
        })
    };
    let source0 = cfg.sources.points()[0].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = cfg.steps();
    let h = cfg.horizon / steps as f64;
    log.records.reserve(steps + 1);

    for k in 0..=steps {
        let t = k as f64 * h;
        let noise = NoiseSample::draw(&mut rng, n, cfg.noise_vel_std, cfg.noise_pos_std);
        let m = synthesize_measurement_with(cfg, t, &noise);
        let model = tryf!(variant.model(&m));
        tryf!(tracker.observe(&model.a, &model.c, &q));
        log.bounds = tracker.b;

        let x = cfg.trajectory.position(t);
        let truth = variant.lift(&x, truth_a, b);
        let record = match &est {
            Estimator::Riccati(os) => {
                let rs = os.riccati.as_ref().expect("Riccati state");
                let eig = tryf!(jacobi_eigenvalues(rs.p.as_matrix()));
                let err = &truth - &os.x_hat;
                let lyap = tryf!(crate::riccati::lyapunov_value(rs, &err));
                let trace_p_inv = match rs.p.as_matrix().clone().cholesky() {
                    Some(ch) => ch.inverse().trace(),
                    None => tryf!(Err(Error::PdViolation { t, lambda_min: eig[0] })),
                };
                StepRecord {
                    t,
                    x: x.clone(),
                    x_hat: variant.position(&os.x_hat),
                    a: truth_a.clone(),
                    a_hat: variant.velocity_bias(&os.x_hat).unwrap_or_else(|| DVector::zeros(n)),
                    b,
                    b_hat: variant.range_bias(&os.x_hat).unwrap_or(0.0),
                    lyap,
                    lam_min_p: eig[0],
                    lam_max_p: eig[eig.len() - 1],
                    trace_p: rs.p.trace(),
                    trace_p_inv,
                    residual_norm: model.residual(&os.x_hat).norm(),
                    dropped_directions: m.dropped_directions(),
                }
            }
            Estimator::Alternate(s) => {
                let xt = &x - &s.x_hat;
                let yt = truth[n] - s.y_hat;
                StepRecord {
                    t,
                    x: x.clone(),
                    x_hat: s.x_hat.clone(),
                    a: truth_a.clone(),
                    a_hat: DVector::zeros(n),
                    b,
                    b_hat: 0.0,
                    lyap: xt.norm_squared() / cfg.k1 + yt * yt,
                    lam_min_p: f64::NAN,
                    lam_max_p: f64::NAN,
                    trace_p: f64::NAN,
                    trace_p_inv: f64::NAN,
                    residual_norm: model.residual(&s.as_vector()).norm(),
                    dropped_directions: 0,
                }
            }
        };
        if !record.lyap.is_finite() || record.x_hat.iter().any(|v| !v.is_finite()) {
            return Err(fail(Error::Numeric { t }, log));
        }
        log.records.push(record);
        if k == steps {
            break;
        }

        let measure = |s: f64| Ok(synthesize_measurement_with(cfg, s, &noise));
        est = match est {
            Estimator::Riccati(mut os) => {
                // ‖A − KC‖_F bounds the error-dynamics spectral radius (twice that for the CRE
                // linearization); while P is large this is stiff, so split the step until RK4
                // resolves the fastest mode
                let p = os.riccati.as_ref().expect("Riccati state").p.as_matrix();
                let rho = (&model.a - p * model.c.transpose() * &q * &model.c * cfg.k).norm();
                let sub = ((h * rho / STIFF_STEP).ceil() as usize).clamp(1, MAX_SUBSTEPS);
                let hs = h / sub as f64;
                for _ in 0..sub {
                    os = tryf!(observer_step(&os, &gains, &measure, hs));
                }
                os.t = (k + 1) as f64 * h;
                if let Some(r) = os.riccati.as_mut() {
                    r.t = os.t;
                }
                Estimator::Riccati(os)
            }
            Estimator::Alternate(s) => {
                let k2 = cfg.k2;
                Estimator::Alternate(tryf!(alternate_range_step(&s, &source0, cfg.k1, &|_| k2, &measure, h)))
            }
        };
    }
    Ok(log)
}

/// One row of an excitation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub kind: PeKind,
    /// Smallest window value over the sweep (μ, or ν for C2).
    pub worst: f64,
    pub worst_at: f64,
    pub threshold: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationReport {
    pub variant: ObserverKind,
    pub window: PeWindow,
    pub conditions: Vec<ConditionResult>,
    /// Smallest window floor of the Riccati Grammian `W_Q`, when requested.
    pub gramian_floor: Option<f64>,
    /// Whether the conditions this observer's stability result needs all hold.
    pub guaranteed: bool,
}

/// Conditions under which each observer is certified.
pub fn relevant_conditions(kind: ObserverKind) -> Vec<PeKind> {
    match kind {
        k if k.is_direction() => vec![PeKind::DirectionPersistent],
        ObserverKind::RangeUnbiased | ObserverKind::RangeAlternate => vec![PeKind::RangeU],
        ObserverKind::RangeBiased => vec![PeKind::RangeUdot],
        ObserverKind::RangeMultiUnbiased => vec![PeKind::MultiRangeU],
        ObserverKind::RangeMultiBiased => vec![PeKind::MultiRangeUdot],
        _ => vec![PeKind::BiasedRangeC1, PeKind::BiasedRangeC2],
    }
}

/// Slides `window` over the noise-free scenario (stride `δ/4`) and keeps the worst
/// value of every condition relevant to `cfg.kind`. With `with_gramian`, also the
/// worst `λmin(W_Q)`.
pub fn excitation_sweep(
    cfg: &ScenarioConfig,
    window: PeWindow,
    threshold: f64,
    with_gramian: bool,
) -> Result<ExcitationReport> {
    cfg.validate()?;
    if cfg.horizon < window.delta {
        return Err(Error::InvalidConfig(format!(
            "horizon {} is shorter than the window {}",
            cfg.horizon, window.delta
        )));
    }
    let traj = &cfg.trajectory;
    let geom = &cfg.sources;
    let vm = cfg.velocity_mode;
    let n = traj.dim();
    // velocity mode runs with u ≡ 0
    let velocity = |t: f64| if vm { DVector::zeros(n) } else { traj.velocity(t) - &cfg.bias_a };
    let acceleration = |t: f64| if vm { DVector::zeros(n) } else { traj.acceleration(t) };
    let directions = |t: f64| -> Vec<DVector<f64>> {
        let x = traj.position(t);
        geom.points().iter().filter_map(|z| {
            let d = &x - z;
            (d.norm() >= 1e-9).then(|| d.normalize())
        }).collect()
    };
    let rates = |t: f64| {
        let (x, v) = (traj.position(t), traj.velocity(t));
        DVector::from_iterator(geom.len(), geom.points().iter().map(|z| {
            let d = &x - z;
            let r = d.norm();
            if r < 1e-12 { 0.0 } else { d.dot(&v) / r }
        }))
    };
    let inputs = ExcitationInputs {
        velocity: Some(&velocity),
        acceleration: Some(&acceleration),
        directions: Some(&directions),
        ranges: None,
        range_rates: Some(&rates),
        geometry: Some(geom),
    };
    let stride = 0.25 * window.delta;
    let count = ((cfg.horizon - window.delta) / stride + 1e-9).floor() as usize + 1;
    let starts: Vec<f64> = (0..count).map(|i| i as f64 * stride).collect();

    let mut conditions = Vec::new();
    for kind in relevant_conditions(cfg.kind) {
        let mut worst = (f64::INFINITY, 0.0);
        for &t in &starts {
            let r = pe_condition_report(kind, &inputs, t, window, threshold)?;
            if r.value < worst.0 {
                worst = (r.value, t);
            }
        }
        conditions.push(ConditionResult {
            kind,
            worst: worst.0,
            worst_at: worst.1,
            threshold,
            satisfied: worst.0 > threshold,
        });
    }
    let gramian_floor = if with_gramian {
        let sys = cfg.noise_free_system()?;
        let q = cfg.gains()?.q(0.0)?;
        let mut floor = f64::INFINITY;
        for &t in &starts {
            let w = riccati_gramian_wq(&sys, &|_| q.clone(), t, window)?;
            floor = floor.min(w.eig_extrema()?.0);
        }
        Some(floor)
    } else {
        None
    };
    let guaranteed = conditions.iter().all(|c| c.satisfied);
    Ok(ExcitationReport { variant: cfg.kind, window, conditions, gramian_floor, guaranteed })
}

/// The noise-free observer model of a scenario as a boxed [`LtvSystem`].
pub fn scenario_system(cfg: &ScenarioConfig) -> Result<Box<dyn LtvSystem + '_>> {
    Ok(Box::new(cfg.noise_free_system()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let path = SampledPath::new(
            (0..20).map(|i| i as f64 * 0.5).collect(),
            (0..20).map(|i| vec3((i as f64 * 0.5).sin(), i as f64 * 0.1, 2.0)).collect(),
        )
        .unwrap();
        let trajs = [
            Trajectory::preset_lissajous(),
            Trajectory::preset_circle(),
            Trajectory::preset_static(),
            Trajectory::ConstantVelocity { start: vec3(1.0, 2.0, 3.0), velocity: vec3(0.5, -1.0, 0.0) },
            Trajectory::Samples(path),
        ];
        let e = 1e-6;
        for traj in &trajs {
            for t in [0.3, 1.7, 4.2, 6.9] {
                let fd = (traj.position(t + e) - traj.position(t - e)) / (2.0 * e);
                assert!((fd - traj.velocity(t)).norm() < 1e-6, "{}", traj.name());
                let fd = (traj.velocity(t + e) - traj.velocity(t - e)) / (2.0 * e);
                assert!((fd - traj.acceleration(t)).norm() < 1e-5, "{}", traj.name());
            }
        }
    }

    #[test]
    fn preset_initial_position() {
        for s in 1..=3 {
            let cfg = ScenarioConfig::preset(s, ObserverKind::DirBiasedSingle).unwrap_or_else(|_| {
                ScenarioConfig::preset(s, ObserverKind::DirBiasedMulti).unwrap()
            });
            assert_eq!(cfg.trajectory.position(0.0), vec3(5.0, 0.0, 4.0));
        }
    }

    #[test]
    fn lissajous_lies_in_a_plane() {
        // x₁ + 10 x₃ = 45 along the whole curve
        let traj = Trajectory::preset_lissajous();
        for k in 0..100 {
            let x = traj.position(0.37 * k as f64);
            assert!((x[0] + 10.0 * x[2] - 45.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_free_measurements_are_exact() {
        let mut cfg = ScenarioConfig::preset(3, ObserverKind::RangeMultiBiased).unwrap();
        cfg.bias_a = DVector::zeros(3);
        cfg.range_bias_b = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = synthesize_measurement(&cfg, 2.0, &mut rng);
        let x = vec3(5.0, 0.0, 4.0);
        for (r, z) in m.ranges.unwrap().iter().zip(cfg.sources.points()) {
            assert_eq!(*r, (&x - z).norm() + 1.0);
        }
        assert_eq!(m.velocity, DVector::zeros(3));
    }

    #[test]
    fn v_defaults_follow_the_published_layout() {
        let d = ScenarioConfig::preset(1, ObserverKind::DirBiasedSingle).unwrap().v_diagonal();
        let want = [0.011, 0.011, 0.011, 0.001, 0.001, 0.001];
        assert!(d.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
        let d = ScenarioConfig::preset(1, ObserverKind::RangeBiased).unwrap().v_diagonal();
        let want = [0.011, 0.011, 0.011, 0.001, 0.001, 0.001, 0.101, 0.001, 0.001];
        assert!(d.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn runs_are_deterministic() {
        let mut cfg = ScenarioConfig::preset(2, ObserverKind::DirBiasedSingle).unwrap();
        cfg.horizon = 0.5;
        cfg.noise_pos_std = 0.05;
        cfg.noise_vel_std = 0.1;
        cfg.seed = 42;
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        assert_eq!(a, b);
        cfg.seed = 43;
        assert_ne!(a, run_scenario(&cfg).unwrap());
    }

    fn zero_start_drift(s: u8, kind: ObserverKind, h: f64) -> f64 {
        let mut cfg = ScenarioConfig::preset(s, kind).unwrap();
        cfg.horizon = 3.0;
        cfg.h = h;
        cfg.xhat0 = cfg.trajectory.position(0.0);
        cfg.ahat0 = cfg.bias_a.clone();
        let log = run_scenario(&cfg).unwrap();
        log.records.iter().map(|r| r.position_error().max(r.bias_error())).fold(0.0, f64::max)
    }

    #[test]
    fn zero_initial_error_stays_zero() {
        for (s, kind) in [
            (1, ObserverKind::DirBiasedSingle),
            (2, ObserverKind::RangeMultiBiased),
            (3, ObserverKind::DirBiasedMulti),
            (3, ObserverKind::RangeMultiBiased),
        ] {
            let worst = zero_start_drift(s, kind, 1e-3);
            assert!(worst < 1e-8, "{kind}: {worst}");
        }
    }

    #[test]
    fn pd_violation_returns_partial_log() {
        let mut cfg = ScenarioConfig::preset(1, ObserverKind::RangeBiased).unwrap();
        cfg.h = 0.5;
        cfg.horizon = 5.0;
        cfg.p0_scale = 1e6;
        match run_scenario(&cfg) {
            Err(f) => {
                assert!(matches!(f.error, Error::PdViolation { .. } | Error::Numeric { .. }));
                assert!(!f.partial.records.is_empty());
            }
            Ok(_) => panic!("a coarse step with huge P(0) should fail"),
        }
    }

    #[test]
    fn circle_sweep_flags_single_range_source() {
        let cfg = ScenarioConfig::preset(2, ObserverKind::RangeBiased).unwrap();
        let rep = excitation_sweep(&cfg, PeWindow::new(2.0 * std::f64::consts::PI, 1e-2).unwrap(), 1e-6, false).unwrap();
        assert!(rep.conditions[0].worst < 1e-9 && !rep.guaranteed);
        let cfg = ScenarioConfig::preset(2, ObserverKind::RangeMultiBiased).unwrap();
        let rep = excitation_sweep(&cfg, PeWindow::new(2.0 * std::f64::consts::PI, 1e-2).unwrap(), 1e-6, false).unwrap();
        assert!(rep.guaranteed);
    }

    #[test]
    fn ls_slope_of_a_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        assert!((ls_slope(&xs, &ys) + 0.5).abs() < 1e-15);
    }
}
