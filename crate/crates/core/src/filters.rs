//! Low-pass filters and Polyak-Ruppert averaging.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_positive, QsaError, Result};
use crate::integrator::{ChannelKind, Trajectory};

/// Largest admissible `gamma * dt`.
pub const MAX_GAMMA_DT: f64 = 0.5;
/// Default PR window parameter.
pub const DEFAULT_KAPPA: f64 = 5.0;

/// Initial filter state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterInit {
    #[default]
    MatchFirst,
    Zero,
}

/// Unity-DC-gain low-pass filter parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "order", rename_all = "kebab-case")]
pub enum FilterSpec {
    /// `gamma / (s + gamma)`, advanced by the exact exponential blend.
    FirstOrder {
        gamma: f64,
        #[serde(default)]
        init: FilterInit,
    },
    /// `gamma^2 / (s^2 + 2 zeta gamma s + gamma^2)`, semi-implicit Euler.
    SecondOrder {
        gamma: f64,
        zeta: f64,
        #[serde(default)]
        init: FilterInit,
    },
}

impl FilterSpec {
    pub fn first_order(gamma: f64) -> Self {
        FilterSpec::FirstOrder { gamma, init: FilterInit::MatchFirst }
    }

    pub fn second_order(gamma: f64, zeta: f64) -> Self {
        FilterSpec::SecondOrder { gamma, zeta, init: FilterInit::MatchFirst }
    }

    pub fn with_init(self, init: FilterInit) -> Self {
        match self {
            FilterSpec::FirstOrder { gamma, .. } => FilterSpec::FirstOrder { gamma, init },
            FilterSpec::SecondOrder { gamma, zeta, .. } => FilterSpec::SecondOrder { gamma, zeta, init },
        }
    }

    pub fn gamma(&self) -> f64 {
        match *self {
            FilterSpec::FirstOrder { gamma, .. } | FilterSpec::SecondOrder { gamma, .. } => gamma,
        }
    }

    pub fn init(&self) -> FilterInit {
        match *self {
            FilterSpec::FirstOrder { init, .. } | FilterSpec::SecondOrder { init, .. } => init,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            FilterSpec::FirstOrder { .. } => "f1",
            FilterSpec::SecondOrder { .. } => "f2",
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_positive("filter gamma", self.gamma())?;
        if let FilterSpec::SecondOrder { zeta, .. } = *self {
            if !(zeta > 0.0 && zeta <= 1.0) {
                return Err(QsaError::InvalidParameter(format!("damping zeta must lie in (0, 1], got {zeta}")));
            }
        }
        Ok(())
    }

    /// Steady-state amplitude gain at angular frequency `omega`.
    pub fn magnitude(&self, omega: f64) -> f64 {
        match *self {
            FilterSpec::FirstOrder { gamma, .. } => gamma / gamma.hypot(omega),
            FilterSpec::SecondOrder { gamma, zeta, .. } => {
                let g2 = gamma * gamma;
                g2 / ((g2 - omega * omega).powi(2) + (2.0 * zeta * gamma * omega).powi(2)).sqrt()
            }
        }
    }
}

/// Running filter state for a vector signal.
#[derive(Clone, Debug)]
pub struct Filter {
    spec: FilterSpec,
    y: Vec<f64>,
    v: Vec<f64>,
    started: bool,
}

impl Filter {
    pub fn new(spec: FilterSpec, dim: usize) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, y: vec![0.0; dim], v: vec![0.0; dim], started: false })
    }

    pub fn spec(&self) -> &FilterSpec {
        &self.spec
    }

    pub fn output(&self) -> &[f64] {
        &self.y
    }

    /// Consumes the first sample without stepping.
    pub fn prime(&mut self, u: &[f64]) {
        if self.spec.init() == FilterInit::MatchFirst {
            self.y.copy_from_slice(u);
        }
        self.started = true;
    }

    pub fn step(&mut self, u: &[f64], dt: f64) -> Result<&[f64]> {
        check_dim(self.y.len(), u.len())?;
        if !self.started {
            self.prime(u);
            return Ok(&self.y);
        }
        let gamma = self.spec.gamma();
        if gamma * dt > MAX_GAMMA_DT {
            return Err(QsaError::StepTooCoarse {
                detail: format!("filter gamma * dt = {} exceeds {MAX_GAMMA_DT}", gamma * dt),
            });
        }
        match self.spec {
            FilterSpec::FirstOrder { .. } => {
                let blend = 1.0 - (-gamma * dt).exp();
                for (y, &x) in self.y.iter_mut().zip(u) {
                    *y += blend * (x - *y);
                }
            }
            FilterSpec::SecondOrder { zeta, .. } => {
                let g2 = gamma * gamma;
                for ((y, v), &x) in self.y.iter_mut().zip(self.v.iter_mut()).zip(u) {
                    *v += dt * (g2 * (x - *y) - 2.0 * zeta * gamma * *v);
                    *y += dt * *v;
                }
            }
        }
        Ok(&self.y)
    }
}

/// Advances `filter` by one sample.
pub fn filter_step<'a>(filter: &'a mut Filter, input: &[f64], dt: f64) -> Result<&'a [f64]> {
    check_positive("dt", dt)?;
    filter.step(input, dt)
}

/// Runs `spec` causally along the states of `traj`.
pub fn filter_states(spec: FilterSpec, traj: &Trajectory) -> Result<Vec<f64>> {
    let mut f = Filter::new(spec, traj.dim)?;
    let mut out = Vec::with_capacity(traj.states().len());
    for i in 0..traj.len() {
        out.extend_from_slice(f.step(traj.state(i), traj.dt)?);
    }
    Ok(out)
}

/// Returns `traj` with a filtered channel tagged `f1` or `f2`.
pub fn filter_trajectory(spec: FilterSpec, traj: &Trajectory) -> Result<Trajectory> {
    let data = filter_states(spec, traj)?;
    let mut out = traj.clone();
    out.add_channel(ChannelKind::Filtered(spec.tag().into()), traj.dim, data)?;
    Ok(out)
}

/// Exact integral of the piecewise-linear interpolant of streamed samples over `[start, end]`.
#[derive(Clone, Debug)]
pub struct WindowIntegral {
    start: f64,
    end: f64,
    acc: Vec<f64>,
    prev: Option<(f64, Vec<f64>)>,
    covered: f64,
}

impl WindowIntegral {
    pub fn new(start: f64, end: f64, dim: usize) -> Self {
        Self { start, end, acc: vec![0.0; dim], prev: None, covered: 0.0 }
    }

    pub fn push(&mut self, t: f64, u: &[f64]) {
        if let Some((tp, up)) = &self.prev {
            let (a, b) = (tp.max(self.start), t.min(self.end));
            if b > a {
                let h = t - tp;
                for i in 0..self.acc.len() {
                    let slope = (u[i] - up[i]) / h;
                    let ua = up[i] + slope * (a - tp);
                    let ub = up[i] + slope * (b - tp);
                    self.acc[i] += 0.5 * (ua + ub) * (b - a);
                }
                self.covered += b - a;
            }
            let prev = self.prev.as_mut().unwrap();
            prev.0 = t;
            prev.1.copy_from_slice(u);
        } else {
            self.prev = Some((t, u.to_vec()));
        }
    }

    pub fn covered(&self) -> f64 {
        self.covered
    }

    pub fn integral(&self) -> &[f64] {
        &self.acc
    }

    /// Window average; fails if the samples never reached into the window.
    pub fn mean(&self) -> Result<Vec<f64>> {
        if !(self.covered > 0.0) {
            return Err(QsaError::WindowEmpty {
                detail: format!("no samples cover [{}, {}]", self.start, self.end),
            });
        }
        Ok(self.acc.iter().map(|a| a / self.covered).collect())
    }
}

/// Polyak-Ruppert average over the final `1/kappa` of a known horizon.
#[derive(Clone, Debug)]
pub struct PrAverager {
    pub kappa: f64,
    pub t0: f64,
    pub horizon: f64,
    window: WindowIntegral,
}

impl PrAverager {
    pub fn new(kappa: f64, t0: f64, horizon: f64, dim: usize) -> Result<Self> {
        if !(kappa > 1.0) {
            return Err(QsaError::InvalidParameter(format!("kappa must exceed 1, got {kappa}")));
        }
        let start = pr_window_start(t0, horizon, kappa);
        Ok(Self { kappa, t0, horizon, window: WindowIntegral::new(start, horizon, dim) })
    }

    pub fn window_start(&self) -> f64 {
        pr_window_start(self.t0, self.horizon, self.kappa)
    }

    pub fn push(&mut self, t: f64, theta: &[f64]) {
        self.window.push(t, theta);
    }

    pub fn average(&self) -> Result<Vec<f64>> {
        self.window.mean()
    }
}

/// `T0 = t0 + (T - t0)(1 - 1/kappa)`.
pub fn pr_window_start(t0: f64, horizon: f64, kappa: f64) -> f64 {
    t0 + (horizon - t0) * (1.0 - 1.0 / kappa)
}

/// Cumulative trapezoid integrals of the states at each grid point.
fn cumulative(traj: &Trajectory) -> Vec<f64> {
    let d = traj.dim;
    let mut c = vec![0.0; traj.states().len()];
    for k in 1..traj.len() {
        for i in 0..d {
            c[k * d + i] = c[(k - 1) * d + i] + 0.5 * traj.dt * (traj.state(k - 1)[i] + traj.state(k)[i]);
        }
    }
    c
}

fn integral_to(traj: &Trajectory, cum: &[f64], x: f64, out: &mut [f64]) {
    let d = traj.dim;
    let s = ((x - traj.t0) / traj.dt).max(0.0);
    let i = (s.floor() as usize).min(traj.len().saturating_sub(2));
    let h = x - traj.time(i);
    for j in 0..d {
        let (u0, u1) = (traj.state(i)[j], traj.state(i + 1)[j]);
        out[j] = cum[i * d + j] + h * u0 + 0.5 * h * h * (u1 - u0) / traj.dt;
    }
}

/// Terminal PR average and the running-average channel (tag `pr`).
pub fn pr_average(traj: &Trajectory, kappa: f64) -> Result<(Vec<f64>, Trajectory)> {
    if !(kappa > 1.0) {
        return Err(QsaError::InvalidParameter(format!("kappa must exceed 1, got {kappa}")));
    }
    if traj.len() < 2 {
        return Err(QsaError::WindowEmpty { detail: "trajectory has fewer than two samples".into() });
    }
    let d = traj.dim;
    let cum = cumulative(traj);
    let mut running = Vec::with_capacity(traj.states().len());
    let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
    for k in 0..traj.len() {
        let t = traj.time(k);
        let start = pr_window_start(traj.t0, t, kappa);
        if t - start <= 0.0 {
            running.extend_from_slice(traj.state(k));
            continue;
        }
        integral_to(traj, &cum, start, &mut a);
        b.copy_from_slice(&cum[k * d..(k + 1) * d]);
        running.extend((0..d).map(|j| (b[j] - a[j]) / (t - start)));
    }
    let terminal = running[(traj.len() - 1) * d..].to_vec();
    let mut out = traj.clone();
    out.add_channel(ChannelKind::Filtered("pr".into()), d, running)?;
    Ok((terminal, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn series(dt: f64, n: usize, f: impl Fn(f64) -> f64) -> Trajectory {
        Trajectory::from_states(0.0, dt, 1, (0..n).map(|k| f(k as f64 * dt)).collect()).unwrap()
    }

    #[test]
    fn bandwidth_from_eta_alpha() {
        let eta = 5.0;
        let alpha = 0.01;
        let spec = FilterSpec::second_order(eta * alpha, 0.8);
        assert_relative_eq!(spec.gamma(), 0.05);
    }

    #[test]
    fn constant_input_fixed_point() {
        for spec in [FilterSpec::first_order(0.3), FilterSpec::second_order(0.3, 0.8)] {
            let out = filter_states(spec, &series(0.1, 2000, |_| 2.5)).unwrap();
            assert!(out.iter().all(|&y| y == 2.5));
        }
    }

    #[test]
    fn step_response_from_zero() {
        let (gamma, zeta) = (0.5, 0.8);
        let dt = 0.01;
        let n = (40.0 / (zeta * gamma) / dt) as usize + 2;
        let spec = FilterSpec::second_order(gamma, zeta).with_init(FilterInit::Zero);
        let mut f = Filter::new(spec, 1).unwrap();
        f.prime(&[0.0]);
        let mut y = 0.0;
        for _ in 0..n {
            y = f.step(&[3.0], dt).unwrap()[0];
        }
        assert!((y - 3.0).abs() < 1e-6 * 3.0);
    }

    #[test]
    fn overshoot_bounds() {
        let dt = 0.01;
        for (zeta, bound) in [(1.0, 1.0 + 1e-9), (0.8, 1.0 + (-std::f64::consts::PI * 0.8 / (1.0 - 0.64f64).sqrt()).exp() + 1e-3)] {
            let spec = FilterSpec::second_order(1.0, zeta).with_init(FilterInit::Zero);
            let mut f = Filter::new(spec, 1).unwrap();
            f.prime(&[0.0]);
            let mut prev: f64 = 0.0;
            let mut peak: f64 = 0.0;
            for _ in 0..5000 {
                let y = f.step(&[1.0], dt).unwrap()[0];
                if zeta == 1.0 {
                    assert!(y >= prev - 1e-15);
                }
                prev = y;
                peak = peak.max(y);
            }
            assert!(peak <= bound, "zeta {zeta}: {peak} > {bound}");
        }
    }

    fn steady_amplitude(spec: FilterSpec, omega: f64, dt: f64) -> f64 {
        let n = (400.0 / spec.gamma() / dt) as usize;
        let traj = series(dt, n, |t| (omega * t).sin());
        let out = filter_states(spec, &traj).unwrap();
        out[n / 2..].iter().fold(0.0f64, |m, y| m.max(y.abs()))
    }

    #[test]
    fn tone_attenuation() {
        let gamma = 0.05;
        let omega = 30.0 * gamma;
        let amp = steady_amplitude(FilterSpec::second_order(gamma, 0.8), omega, 0.01);
        assert!(amp <= (gamma / omega).powi(2) * 2.0, "{amp}");
        assert!(amp >= (gamma / omega).powi(2) / 2.0, "{amp}");
    }

    #[test]
    fn coarse_step_rejected() {
        let mut f = Filter::new(FilterSpec::first_order(10.0), 1).unwrap();
        f.step(&[0.0], 0.1).unwrap();
        assert!(matches!(f.step(&[1.0], 0.1), Err(QsaError::StepTooCoarse { .. })));
        assert!(Filter::new(FilterSpec::second_order(1.0, 1.5), 1).is_err());
    }

    #[test]
    fn zero_trajectory() {
        let out = filter_trajectory(FilterSpec::second_order(0.1, 0.8), &series(0.1, 100, |_| 0.0)).unwrap();
        let ch = out.channel(&ChannelKind::Filtered("f2".into())).unwrap();
        assert!(ch.data.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn pr_examples() {
        let (avg, _) = pr_average(&series(0.1, 1001, |_| 4.0), 5.0).unwrap();
        assert_relative_eq!(avg[0], 4.0, epsilon = 1e-12);
        assert_relative_eq!(pr_window_start(0.0, 100.0, 5.0), 80.0);
        let (avg, traj) = pr_average(&series(0.01, 1001, |t| t), 2.0).unwrap();
        assert_relative_eq!(avg[0], 7.5, epsilon = 1e-10);
        // running channel on the ramp: average over [t/2, t] is 3t/4
        let ch = traj.channel(&ChannelKind::Filtered("pr".into())).unwrap();
        assert_relative_eq!(ch.data[400], 0.75 * 4.0, epsilon = 1e-10);
        // window not aligned with the grid
        let (avg, _) = pr_average(&series(0.3, 35, |t| t), 3.0).unwrap();
        let t = 34.0 * 0.3;
        assert_relative_eq!(avg[0], 0.5 * (t + t * 2.0 / 3.0), epsilon = 1e-10);
        assert!(matches!(pr_average(&series(0.1, 1, |t| t), 5.0), Err(QsaError::WindowEmpty { .. })));
        assert!(pr_average(&series(0.1, 10, |t| t), 1.0).is_err());
    }

    #[test]
    fn streaming_matches_batch() {
        let traj = series(0.25, 401, |t| (0.3 * t).sin() + 0.01 * t);
        let (batch, _) = pr_average(&traj, 5.0).unwrap();
        let mut pr = PrAverager::new(5.0, 0.0, traj.final_time(), 1).unwrap();
        for k in 0..traj.len() {
            pr.push(traj.time(k), traj.state(k));
        }
        assert_relative_eq!(pr.average().unwrap()[0], batch[0], epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn dc_gain_unity(gamma in 0.01..0.5f64, zeta in 0.05..1.0f64, c in -10.0..10.0f64, first in any::<bool>()) {
            let dt = 1.0;
            let spec = if first { FilterSpec::first_order(gamma) } else { FilterSpec::second_order(gamma, zeta) };
            let spec = spec.with_init(FilterInit::Zero);
            let mut f = Filter::new(spec, 1).unwrap();
            f.prime(&[0.0]);
            let n = (200.0 / (zeta * gamma * dt)) as usize + 1000;
            let mut y = 0.0;
            for _ in 0..n {
                y = f.step(&[c], dt).unwrap()[0];
            }
            prop_assert!((y - c).abs() <= 1e-9 * c.abs().max(1.0));
        }

        #[test]
        fn filter_linearity(a in -3.0..3.0f64, b in -3.0..3.0f64, w1 in 0.01..1.0f64, w2 in 0.01..1.0f64) {
            let dt = 0.1;
            let u = series(dt, 500, |t| (w1 * t).sin());
            let v = series(dt, 500, |t| (w2 * t).cos() + 0.3);
            let combo = series(dt, 500, |t| a * (w1 * t).sin() + b * ((w2 * t).cos() + 0.3));
            for spec in [FilterSpec::first_order(0.2), FilterSpec::second_order(0.2, 0.7)] {
                let (fu, fv, fc) = (filter_states(spec, &u).unwrap(), filter_states(spec, &v).unwrap(), filter_states(spec, &combo).unwrap());
                for k in 0..500 {
                    prop_assert!((fc[k] - a * fu[k] - b * fv[k]).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn second_order_attenuates_more(gamma in 0.001..0.005f64, zeta in 0.3..1.0f64) {
            let omega = 100.0 * gamma;
            let dt = 0.5 / omega;
            let a2 = steady_amplitude(FilterSpec::second_order(gamma, zeta), omega, dt);
            let a1 = steady_amplitude(FilterSpec::first_order(gamma), omega, dt);
            prop_assert!(a2 < a1, "{} {}", a2, a1);
        }

        #[test]
        fn pr_shrinkage(c in -5.0..5.0f64, omega in 0.1..3.0f64, horizon in 50.0..500.0f64) {
            let dt = 0.01;
            let n = (horizon / dt) as usize + 1;
            let traj = series(dt, n, |t| c + (omega * t).sin());
            let (avg, _) = pr_average(&traj, 5.0).unwrap();
            let big_t = traj.final_time();
            let width = big_t - pr_window_start(0.0, big_t, 5.0);
            prop_assert!((avg[0] - c).abs() <= 2.0 / (omega * width) + 1e-6);
        }
    }
}
