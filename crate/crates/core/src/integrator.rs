//! Forward-Euler integration of QSA ODEs, mean flows and sensitivity dynamics.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{field_jacobian, FieldSpec, VectorField};
use crate::error::{check_dim, check_positive, QsaError, Result};
use crate::probing::{ClockState, ProbeSpec};

/// Default divergence guard on the state norm.
pub const DIVERGENCE_BOUND: f64 = 1e12;
/// `dt * max omega` above this only warns.
pub const STEP_WARN: f64 = 0.5;
/// `dt * max omega` above this is an error.
pub const STEP_MAX: f64 = std::f64::consts::PI;

const POWER_ITERATIONS: usize = 50;

/// Step-size sequence `a_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum GainSchedule {
    Constant { alpha: f64 },
    /// `alpha / (1 + t / t_e)^rho`.
    PowerLaw { alpha: f64, rho: f64, t_e: f64 },
    /// `min(c, (t + 1)^-rho)`.
    ClippedPowerLaw { c: f64, rho: f64 },
}

impl GainSchedule {
    pub fn constant(alpha: f64) -> Self {
        GainSchedule::Constant { alpha }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            GainSchedule::Constant { alpha } => check_positive("alpha", alpha),
            GainSchedule::PowerLaw { alpha, rho, t_e } => {
                check_positive("alpha", alpha)?;
                if !(0.0..=1.0).contains(&rho) || t_e < 1.0 {
                    return Err(QsaError::InvalidParameter(format!(
                        "power-law gain needs rho in [0, 1] and t_e >= 1, got rho = {rho}, t_e = {t_e}"
                    )));
                }
                Ok(())
            }
            GainSchedule::ClippedPowerLaw { c, rho } => {
                check_positive("clip", c)?;
                if !(0.0..=1.0).contains(&rho) {
                    return Err(QsaError::InvalidParameter(format!("rho must lie in [0, 1], got {rho}")));
                }
                Ok(())
            }
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        match *self {
            GainSchedule::Constant { alpha } => alpha,
            GainSchedule::PowerLaw { alpha, rho, t_e } => alpha / (1.0 + t / t_e).powf(rho),
            GainSchedule::ClippedPowerLaw { c, rho } => c.min((t + 1.0).powf(-rho)),
        }
    }
}

/// Per-coordinate box projection, or no projection.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxProjection {
    bounds: Option<Vec<(f64, f64)>>,
}

impl BoxProjection {
    pub fn disabled() -> Self {
        Self { bounds: None }
    }

    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        for &(lo, hi) in &bounds {
            if !(lo < hi) {
                return Err(QsaError::InvalidParameter(format!("box bounds need lo < hi, got [{lo}, {hi}]")));
            }
        }
        Ok(Self { bounds: Some(bounds) })
    }

    pub fn uniform(d: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![(lo, hi); d])
    }

    pub fn bounds(&self) -> Option<&[(f64, f64)]> {
        self.bounds.as_deref()
    }

    pub fn is_enabled(&self) -> bool {
        self.bounds.is_some()
    }

    pub fn project(&self, theta: &mut [f64]) {
        if let Some(b) = &self.bounds {
            for (x, &(lo, hi)) in theta.iter_mut().zip(b) {
                *x = x.clamp(lo, hi);
            }
        }
    }

    pub fn on_boundary(&self, theta: &[f64]) -> bool {
        match &self.bounds {
            Some(b) => theta.iter().zip(b).any(|(&x, &(lo, hi))| x <= lo || x >= hi),
            None => false,
        }
    }
}

/// A source of probe values that can be stepped forward in time.
pub trait ProbeSignal: Send {
    fn dim(&self) -> usize;
    fn value_into(&self, out: &mut [f64]);
    fn advance(&mut self, dt: f64);
    /// Fastest frequency, for step-size checks.
    fn max_omega(&self) -> f64;
}

/// A probe carried by its clock process.
#[derive(Clone, Debug)]
pub struct ClockedProbe {
    spec: ProbeSpec,
    clock: ClockState,
}

impl ClockedProbe {
    pub fn new(spec: ProbeSpec, clock: ClockState) -> Result<Self> {
        check_dim(spec.basis().len(), clock.len())?;
        Ok(Self { spec, clock })
    }

    pub fn clock(&self) -> &ClockState {
        &self.clock
    }

    pub fn spec(&self) -> &ProbeSpec {
        &self.spec
    }
}

impl ProbeSignal for ClockedProbe {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn value_into(&self, out: &mut [f64]) {
        self.spec.value_into(&self.clock, out);
    }

    fn advance(&mut self, dt: f64) {
        self.clock.advance(self.spec.basis(), dt);
    }

    fn max_omega(&self) -> f64 {
        self.spec.max_omega()
    }
}

/// Zero-dimensional probe for fields that ignore it.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoProbe;

impl ProbeSignal for NoProbe {
    fn dim(&self) -> usize {
        0
    }
    fn value_into(&self, _out: &mut [f64]) {}
    fn advance(&mut self, _dt: f64) {}
    fn max_omega(&self) -> f64 {
        0.0
    }
}

/// What gets recorded besides the state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channels {
    pub probe: bool,
    pub field: bool,
    pub gain: bool,
    /// Record every `stride`-th grid point.
    pub stride: usize,
}

impl Default for Channels {
    fn default() -> Self {
        Self { probe: false, field: false, gain: false, stride: 1 }
    }
}

impl Channels {
    pub fn all() -> Self {
        Self { probe: true, field: true, gain: true, stride: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChannelKind {
    Probe,
    Field,
    Gain,
    /// Filtered state with a suffix tag such as `f1`, `f2` or `pr`.
    Filtered(String),
    Sensitivity,
    LogSensitivityNorm,
    Named(String),
}

impl ChannelKind {
    fn column(&self, i: usize, width: usize) -> String {
        match self {
            ChannelKind::Probe => format!("psi_{i}"),
            ChannelKind::Field => format!("f_{i}"),
            ChannelKind::Gain => "gain".into(),
            ChannelKind::Filtered(tag) => format!("theta_{i}_{tag}"),
            ChannelKind::Sensitivity => {
                let d = (width as f64).sqrt().round() as usize;
                format!("s_{}_{}", i / d.max(1), i % d.max(1))
            }
            ChannelKind::LogSensitivityNorm => "log_s_norm".into(),
            ChannelKind::Named(name) => {
                if width == 1 {
                    name.clone()
                } else {
                    format!("{name}_{i}")
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub kind: ChannelKind,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Channel {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

/// Uniformly sampled state time series with optional channels on the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub dim: usize,
    states: Vec<f64>,
    channels: Vec<Channel>,
}

impl Trajectory {
    pub fn new(t0: f64, dt: f64, dim: usize) -> Self {
        Self { t0, dt, dim, states: Vec::new(), channels: Vec::new() }
    }

    pub fn from_states(t0: f64, dt: f64, dim: usize, states: Vec<f64>) -> Result<Self> {
        if dim == 0 || states.len() % dim != 0 {
            return Err(QsaError::DimensionMismatch { expected: dim, got: states.len() });
        }
        Ok(Self { t0, dt, dim, states, channels: Vec::new() })
    }

    pub fn push_state(&mut self, theta: &[f64]) {
        self.states.extend_from_slice(theta);
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.states.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn final_time(&self) -> f64 {
        self.time(self.len().saturating_sub(1))
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.states.iter().skip(j).step_by(self.dim).cloned().collect()
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel(&self, kind: &ChannelKind) -> Option<&Channel> {
        self.channels.iter().find(|c| &c.kind == kind)
    }

    pub fn add_channel(&mut self, kind: ChannelKind, width: usize, data: Vec<f64>) -> Result<()> {
        check_dim(self.len() * width, data.len())?;
        self.channels.retain(|c| c.kind != kind);
        self.channels.push(Channel { kind, width, data });
        Ok(())
    }

    /// A trajectory whose states are the rows of a channel.
    pub fn channel_as_trajectory(&self, kind: &ChannelKind) -> Option<Trajectory> {
        let c = self.channel(kind)?;
        Some(Trajectory { t0: self.t0, dt: self.dt, dim: c.width, states: c.data.clone(), channels: Vec::new() })
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((0..self.dim).map(|i| format!("theta_{i}")));
        for c in &self.channels {
            h.extend((0..c.width).map(|i| c.kind.column(i, c.width)));
        }
        h
    }

    /// CSV with 17 significant digits.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", self.header().join(","))?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            line.push_str(&format!("{:.16e}", self.time(i)));
            for x in self.state(i) {
                line.push_str(&format!(",{x:.16e}"));
            }
            for c in &self.channels {
                for x in c.row(i) {
                    line.push_str(&format!(",{x:.16e}"));
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Grid and safety settings for a QSA integration.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegrationSettings {
    pub dt: f64,
    pub horizon: f64,
    pub projection: BoxProjection,
    pub divergence_bound: f64,
    pub channels: Channels,
}

impl IntegrationSettings {
    pub fn new(dt: f64, horizon: f64) -> Self {
        Self {
            dt,
            horizon,
            projection: BoxProjection::disabled(),
            divergence_bound: DIVERGENCE_BOUND,
            channels: Channels::default(),
        }
    }

    pub fn with_projection(mut self, projection: BoxProjection) -> Self {
        self.projection = projection;
        self
    }

    pub fn with_channels(mut self, channels: Channels) -> Self {
        self.channels = channels;
        self
    }

    pub fn steps(&self) -> Result<usize> {
        check_positive("dt", self.dt)?;
        if !(self.horizon >= self.dt) {
            return Err(QsaError::InvalidParameter(format!(
                "horizon {} must be at least dt {}",
                self.horizon, self.dt
            )));
        }
        Ok((self.horizon / self.dt).round() as usize)
    }
}

/// Rejects steps that cannot resolve `max_omega`; warns when resolution is marginal.
pub fn check_resolution(dt: f64, max_omega: f64) -> Result<()> {
    let r = dt * max_omega;
    if r > STEP_MAX {
        return Err(QsaError::StepTooCoarse {
            detail: format!("dt * max omega = {r:.4} exceeds pi"),
        });
    }
    if r > STEP_WARN {
        log::warn!("dt * max omega = {r:.4} exceeds {STEP_WARN}; the probe is poorly resolved");
    }
    Ok(())
}

fn intrinsic_omega(field: &FieldSpec) -> f64 {
    match field {
        FieldSpec::LinearExample { omega, .. } => *omega,
        _ => 0.0,
    }
}

/// View of one grid point passed to observers.
pub struct StepView<'a> {
    pub k: usize,
    pub t: f64,
    pub theta: &'a [f64],
    pub psi: &'a [f64],
    pub field: &'a [f64],
    pub gain: f64,
}

fn guard(theta: &[f64], bound: f64, t: f64) -> Result<()> {
    let norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm > bound {
        return Err(QsaError::NonFinite {
            context: format!("state norm {norm:e} exceeds {bound:e} at t = {t}"),
        });
    }
    Ok(())
}

/// Streams the Euler recursion `theta <- Pi(theta + dt a_t f(theta, psi_t, t))` through `observer`,
/// called at every grid point `k = 0..=n`. Returns the terminal state.
pub fn simulate(
    field: &FieldSpec,
    gain: &GainSchedule,
    signal: &mut dyn ProbeSignal,
    theta0: &[f64],
    settings: &IntegrationSettings,
    mut observer: impl FnMut(&StepView) -> Result<()>,
) -> Result<Vec<f64>> {
    let d = field.state_dim();
    check_dim(d, theta0.len())?;
    check_dim(field.probe_dim(), signal.dim())?;
    gain.validate()?;
    let n = settings.steps()?;
    let dt = settings.dt;
    check_resolution(dt, signal.max_omega().max(intrinsic_omega(field)))?;
    let mut theta = theta0.to_vec();
    settings.projection.project(&mut theta);
    let mut psi = vec![0.0; signal.dim()];
    let mut f = vec![0.0; d];
    for k in 0..=n {
        let t = k as f64 * dt;
        signal.value_into(&mut psi);
        field.eval_into(&theta, &psi, t, &mut f)?;
        let a = gain.at(t);
        observer(&StepView { k, t, theta: &theta, psi: &psi, field: &f, gain: a })?;
        if k == n {
            break;
        }
        for (x, g) in theta.iter_mut().zip(&f) {
            *x += dt * a * g;
        }
        settings.projection.project(&mut theta);
        guard(&theta, settings.divergence_bound, t + dt)?;
        signal.advance(dt);
    }
    Ok(theta)
}

/// Like [`simulate`] but records a [`Trajectory`].
pub fn integrate_with_signal(
    field: &FieldSpec,
    gain: &GainSchedule,
    signal: &mut dyn ProbeSignal,
    theta0: &[f64],
    settings: &IntegrationSettings,
) -> Result<Trajectory> {
    let ch = &settings.channels;
    let stride = ch.stride.max(1);
    let mut traj = Trajectory::new(0.0, settings.dt * stride as f64, field.state_dim());
    let (mut probe, mut fld, mut gains) = (Vec::new(), Vec::new(), Vec::new());
    simulate(field, gain, signal, theta0, settings, |s| {
        if s.k % stride == 0 {
            traj.push_state(s.theta);
            if ch.probe {
                probe.extend_from_slice(s.psi);
            }
            if ch.field {
                fld.extend_from_slice(s.field);
            }
            if ch.gain {
                gains.push(s.gain);
            }
        }
        Ok(())
    })?;
    if ch.probe {
        let w = signal.dim();
        traj.add_channel(ChannelKind::Probe, w, probe)?;
    }
    if ch.field {
        let w = field.state_dim();
        traj.add_channel(ChannelKind::Field, w, fld)?;
    }
    if ch.gain {
        traj.add_channel(ChannelKind::Gain, 1, gains)?;
    }
    Ok(traj)
}

/// Integrates a QSA ODE driven by `probe` with clock started at `clock0`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_qsa(
    field: &FieldSpec,
    gain: &GainSchedule,
    probe: Option<&ProbeSpec>,
    theta0: &[f64],
    clock0: Option<&ClockState>,
    dt: f64,
    horizon: f64,
    projection: BoxProjection,
    channels: Channels,
) -> Result<Trajectory> {
    let settings = IntegrationSettings::new(dt, horizon).with_projection(projection).with_channels(channels);
    match probe {
        Some(p) => {
            let clock = clock0.cloned().unwrap_or_else(|| ClockState::zeros(p.basis().len()));
            let mut signal = ClockedProbe::new(p.clone(), clock)?;
            integrate_with_signal(field, gain, &mut signal, theta0, &settings)
        }
        None => integrate_with_signal(field, gain, &mut NoProbe, theta0, &settings),
    }
}

/// Euler on `d theta/dt = fbar(theta)`.
pub fn integrate_mean_flow(fbar: &VectorField, theta0: &[f64], dt: f64, horizon: f64) -> Result<Trajectory> {
    let field = FieldSpec::MeanField(fbar.clone());
    integrate_qsa(
        &field,
        &GainSchedule::constant(1.0),
        None,
        theta0,
        None,
        dt,
        horizon,
        BoxProjection::disabled(),
        Channels::default(),
    )
}

/// Largest singular value by power iteration on `M^T M`.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let d = m.ncols();
    if d == 0 {
        return 0.0;
    }
    let mut v = nalgebra::DVector::from_fn(d, |i, _| 1.0 + 0.1 * i as f64);
    v /= v.norm();
    let mtm = m.transpose() * m;
    for _ in 0..POWER_ITERATIONS {
        let w = &mtm * &v;
        let n = w.norm();
        if n == 0.0 {
            return 0.0;
        }
        v = w / n;
    }
    (m * v).norm()
}

/// Sensitivity matrix stored as `exp(log_scale) * m` so decaying flows do not underflow.
#[derive(Clone, Debug)]
pub struct Sensitivity {
    pub m: DMatrix<f64>,
    pub log_scale: f64,
}

impl Sensitivity {
    pub fn identity(d: usize) -> Self {
        Self { m: DMatrix::identity(d, d), log_scale: 0.0 }
    }

    pub fn log_norm(&self) -> f64 {
        self.log_scale + spectral_norm(&self.m).ln()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        &self.m * self.log_scale.exp()
    }

    fn step(&mut self, a: &DMatrix<f64>, scale: f64) {
        let next = &self.m + (a * &self.m) * scale;
        self.m = next;
        let amax = self.m.amax();
        if amax > 0.0 && !(1e-50..=1e50).contains(&amax) {
            self.m /= amax;
            self.log_scale += amax.ln();
        }
    }
}

/// Co-integrates `dS/dt = a_t A(theta_t, psi_t) S`, `S_0 = I`, and records `log |S_t|`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_sensitivity(
    field: &FieldSpec,
    gain: &GainSchedule,
    probe: Option<&ProbeSpec>,
    theta0: &[f64],
    clock0: Option<&ClockState>,
    dt: f64,
    horizon: f64,
    record_matrix: bool,
) -> Result<(Trajectory, Sensitivity)> {
    let settings = IntegrationSettings::new(dt, horizon);
    let mut signal: Box<dyn ProbeSignal> = match probe {
        Some(p) => {
            let clock = clock0.cloned().unwrap_or_else(|| ClockState::zeros(p.basis().len()));
            Box::new(ClockedProbe::new(p.clone(), clock)?)
        }
        None => Box::new(NoProbe),
    };
    let d = field.state_dim();
    let mut sens = Sensitivity::identity(d);
    let mut traj = Trajectory::new(0.0, dt, d);
    let mut log_norms = Vec::new();
    let mut mats = Vec::new();
    simulate(field, gain, signal.as_mut(), theta0, &settings, |s| {
        traj.push_state(s.theta);
        let ln = sens.log_norm();
        if !ln.is_finite() {
            return Err(QsaError::NonFinite { context: format!("sensitivity at t = {}", s.t) });
        }
        log_norms.push(ln);
        if record_matrix {
            mats.extend(sens.matrix().transpose().iter());
        }
        let a = field_jacobian(field, s.theta, s.psi, s.t)?;
        sens.step(&a, dt * s.gain);
        Ok(())
    })?;
    traj.add_channel(ChannelKind::LogSensitivityNorm, 1, log_norms)?;
    if record_matrix {
        traj.add_channel(ChannelKind::Sensitivity, d * d, mats)?;
    }
    Ok((traj, sens))
}

/// `theta -> fbar(r theta) / r`.
pub fn scaled_field(fbar: &VectorField, r: f64) -> Result<VectorField> {
    check_positive("scale r", r)?;
    let f = fbar.clone();
    Ok(VectorField::new(fbar.dim(), move |th| {
        let x: Vec<f64> = th.iter().map(|v| v * r).collect();
        f.eval(&x).into_iter().map(|v| v / r).collect()
    }))
}

/// Gap `|Theta^alpha_T - theta_T|` between the time-scaled QSA ODE
/// `d Theta/dt = f(Theta, psi_{t/alpha}, t/alpha)` and the mean flow, on a common Euler grid.
#[allow(clippy::too_many_arguments)]
pub fn solidarity_gap(
    field: &FieldSpec,
    probe: Option<&ProbeSpec>,
    fbar: &VectorField,
    theta0: &[f64],
    horizon: f64,
    alphas: &[f64],
    dt: f64,
) -> Result<Vec<(f64, f64)>> {
    let d = field.state_dim();
    check_dim(d, theta0.len())?;
    let n = IntegrationSettings::new(dt, horizon).steps()?;
    let mean = integrate_mean_flow(fbar, theta0, dt, horizon)?;
    let target = mean.final_state().to_vec();
    let probe_omega = probe.map(|p| p.max_omega()).unwrap_or(0.0).max(intrinsic_omega(field));
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        check_positive("alpha", alpha)?;
        check_resolution(dt, probe_omega / alpha)?;
        let clock0 = probe.map(|p| ClockState::zeros(p.basis().len()));
        let mut theta = theta0.to_vec();
        let mut psi = vec![0.0; probe.map(|p| p.dim()).unwrap_or(0)];
        check_dim(field.probe_dim(), psi.len())?;
        let mut f = vec![0.0; d];
        for k in 0..n {
            let s = k as f64 * dt / alpha;
            if let (Some(p), Some(c0)) = (probe, &clock0) {
                let clock = ClockState::at_time(p.basis(), c0, s);
                p.value_into(&clock, &mut psi);
            }
            field.eval_into(&theta, &psi, s, &mut f)?;
            for (x, g) in theta.iter_mut().zip(&f) {
                *x += dt * g;
            }
            guard(&theta, DIVERGENCE_BOUND, (k + 1) as f64 * dt)?;
        }
        let gap = theta.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        out.push((alpha, gap));
    }
    Ok(out)
}
