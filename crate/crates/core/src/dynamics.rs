//! QSA vector fields.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_positive, QsaError, Result};
use crate::integrator::{BoxProjection, ClockedProbe, ProbeSignal};
use crate::objectives::{Cost, Objective};
use crate::probing::{ClockState, ProbeSpec, TrigPolynomial};

/// Step for the central-difference Jacobian fallback.
pub const JACOBIAN_FD_STEP: f64 = 1e-6;

/// State-dependent probing amplitude `eps(theta)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum ProbingGainPolicy {
    Constant {
        epsilon: f64,
    },
    /// `eps sqrt(1 + Obj(theta) - lower_bound)`.
    ObjectiveScaled {
        epsilon: f64,
        lower_bound: f64,
    },
    /// `eps sqrt(1 + |theta - center|^2 / sigma_p^2)`; an empty center means the origin.
    PriorScaled {
        epsilon: f64,
        #[serde(default)]
        center: Vec<f64>,
        #[serde(default = "one")]
        sigma_p: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl ProbingGainPolicy {
    pub fn constant(epsilon: f64) -> Self {
        ProbingGainPolicy::Constant { epsilon }
    }

    pub fn prior_scaled(epsilon: f64) -> Self {
        ProbingGainPolicy::PriorScaled { epsilon, center: Vec::new(), sigma_p: 1.0 }
    }

    pub fn base_epsilon(&self) -> f64 {
        match self {
            ProbingGainPolicy::Constant { epsilon }
            | ProbingGainPolicy::ObjectiveScaled { epsilon, .. }
            | ProbingGainPolicy::PriorScaled { epsilon, .. } => *epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_positive("probing gain epsilon", self.base_epsilon())?;
        if let ProbingGainPolicy::PriorScaled { sigma_p, .. } = self {
            check_positive("sigma_p", *sigma_p)?;
        }
        Ok(())
    }

    /// Gain at `theta`; `objective` is only called by the objective-scaled variant.
    pub fn gain(&self, theta: &[f64], objective: impl FnOnce() -> f64) -> Result<f64> {
        match self {
            ProbingGainPolicy::Constant { epsilon } => Ok(*epsilon),
            ProbingGainPolicy::ObjectiveScaled { epsilon, lower_bound } => {
                let value = objective();
                if value < *lower_bound {
                    return Err(QsaError::NegativeUnderRoot { value, lower_bound: *lower_bound });
                }
                Ok(epsilon * (1.0 + value - lower_bound).sqrt())
            }
            ProbingGainPolicy::PriorScaled { epsilon, center, sigma_p } => {
                let r2: f64 = if center.is_empty() {
                    theta.iter().map(|x| x * x).sum()
                } else {
                    theta.iter().zip(center).map(|(x, c)| (x - c) * (x - c)).sum()
                };
                Ok(epsilon * (1.0 + r2 / (sigma_p * sigma_p)).sqrt())
            }
        }
    }
}

pub fn probing_gain(policy: &ProbingGainPolicy, objective: &Objective, theta: &[f64]) -> Result<f64> {
    policy.gain(theta, || objective.value(theta))
}

/// Normalized observation `Obj(theta + eps(theta) psi) / eps(theta)`.
pub fn normalized_observation(cost: &Cost, policy: &ProbingGainPolicy, theta: &[f64], psi: &[f64], t: f64) -> Result<f64> {
    let eps = policy.gain(theta, || cost.value(theta, t))?;
    let x: Vec<f64> = theta.iter().zip(psi).map(|(a, b)| a + eps * b).collect();
    Ok(cost.value(&x, t) / eps)
}

/// Probe-free vector field `theta -> f(theta)`.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    f: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VectorField(dim = {})", self.dim)
    }
}

impl VectorField {
    pub fn new(dim: usize, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Self { dim, f: Arc::new(f) }
    }

    /// `-grad Obj`.
    pub fn gradient_flow(obj: &Objective) -> Self {
        let o = obj.clone();
        Self::new(obj.dim(), move |th| o.gradient(th).into_iter().map(|g| -g).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, theta: &[f64]) -> Vec<f64> {
        (self.f)(theta)
    }
}

/// The two scalar benchmark systems sharing the mean field `-theta + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinearVariant {
    A,
    B,
}

impl LinearVariant {
    /// `f(theta, t) = a(t) theta + b(t)`.
    pub fn coefficients(self, omega: f64) -> (TrigPolynomial, TrigPolynomial) {
        let a = TrigPolynomial::constant(-1.0).add(&TrigPolynomial::sin(-1.0, omega, 0.0));
        let forcing = match self {
            LinearVariant::A => TrigPolynomial::sin(2.0, omega, 0.0),
            LinearVariant::B => TrigPolynomial::cos(2.0, omega, 0.0),
        };
        (a, forcing.add(&TrigPolynomial::constant(1.0)))
    }

    pub fn eval(self, omega: f64, theta: f64, t: f64) -> f64 {
        let (s, c) = (omega * t).sin_cos();
        let forcing = match self {
            LinearVariant::A => 2.0 * s,
            LinearVariant::B => 2.0 * c,
        };
        -(1.0 + s) * theta + forcing + 1.0
    }
}

pub fn linear_example_field(variant: LinearVariant, omega: f64, theta: f64, t: f64) -> f64 {
    variant.eval(omega, theta, t)
}

/// Closed-form Poisson data for a linear example.
#[derive(Clone, Debug)]
pub struct LinearClosedForms {
    pub variant: LinearVariant,
    pub omega: f64,
    /// `f = a(t) theta + b(t)`.
    pub a: TrigPolynomial,
    pub b: TrigPolynomial,
    pub a_bar: f64,
    pub b_bar: f64,
    /// `f_hat(theta, t) = fhat_slope(t) theta + fhat_intercept(t)`.
    pub fhat_slope: TrigPolynomial,
    pub fhat_intercept: TrigPolynomial,
    /// Mean of `Upsilon = -d_theta f_hat * f`, affine in theta.
    pub upsilon_mean_slope: f64,
    pub upsilon_mean_intercept: f64,
    pub theta_star: f64,
    pub upsilon_bar: f64,
    pub y_star: f64,
}

impl LinearClosedForms {
    pub fn fhat(&self, theta: f64, t: f64) -> f64 {
        self.fhat_slope.eval(t) * theta + self.fhat_intercept.eval(t)
    }

    pub fn fhat_dtheta(&self, t: f64) -> f64 {
        self.fhat_slope.eval(t)
    }

    pub fn field(&self, theta: f64, t: f64) -> f64 {
        self.variant.eval(self.omega, theta, t)
    }

    pub fn mean_field(&self, theta: f64) -> f64 {
        self.a_bar * theta + self.b_bar
    }

    pub fn upsilon(&self, theta: f64, t: f64) -> f64 {
        -self.fhat_dtheta(t) * self.field(theta, t)
    }
}

pub fn linear_example_closed_forms(variant: LinearVariant, omega: f64) -> Result<LinearClosedForms> {
    check_positive("omega", omega)?;
    let (a, b) = variant.coefficients(omega);
    let (a_bar, fhat_slope) = a.poisson_solve();
    let (b_bar, fhat_intercept) = b.poisson_solve();
    let upsilon_mean_slope = -fhat_slope.mul(&a).mean();
    let upsilon_mean_intercept = -fhat_slope.mul(&b).mean();
    let theta_star = -b_bar / a_bar;
    let upsilon_bar = upsilon_mean_slope * theta_star + upsilon_mean_intercept;
    Ok(LinearClosedForms {
        variant,
        omega,
        a_bar,
        b_bar,
        fhat_slope,
        fhat_intercept,
        upsilon_mean_slope,
        upsilon_mean_intercept,
        theta_star,
        upsilon_bar,
        y_star: upsilon_bar / a_bar,
        a,
        b,
    })
}

/// `f(theta, psi) = (A0 + sum_k psi_k A_k) theta + b0 + sum_k psi_k b_k`.
#[derive(Clone, Debug)]
pub struct GeneralLinear {
    pub a0: DMatrix<f64>,
    pub a_k: Vec<DMatrix<f64>>,
    pub b0: DVector<f64>,
    pub b_k: Vec<DVector<f64>>,
}

impl GeneralLinear {
    pub fn new(a0: DMatrix<f64>, a_k: Vec<DMatrix<f64>>, b0: DVector<f64>, b_k: Vec<DVector<f64>>) -> Result<Self> {
        let d = a0.nrows();
        check_dim(d, a0.ncols())?;
        check_dim(d, b0.len())?;
        for a in &a_k {
            check_dim(d, a.nrows())?;
            check_dim(d, a.ncols())?;
        }
        if !b_k.is_empty() {
            check_dim(a_k.len(), b_k.len())?;
        }
        for b in &b_k {
            check_dim(d, b.len())?;
        }
        Ok(Self { a0, a_k, b0, b_k })
    }

    /// Homogeneous system `dtheta/dt = A(psi) theta`.
    pub fn homogeneous(a0: DMatrix<f64>, a_k: Vec<DMatrix<f64>>) -> Result<Self> {
        let d = a0.nrows();
        Self::new(a0, a_k, DVector::zeros(d), Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.a0.nrows()
    }

    pub fn matrix(&self, psi: &[f64]) -> DMatrix<f64> {
        let mut a = self.a0.clone();
        for (ak, &p) in self.a_k.iter().zip(psi) {
            a += ak * p;
        }
        a
    }
}

/// Extremum-seeking controller parameters.
#[derive(Clone, Debug)]
pub struct EscSpec {
    pub sigma: f64,
    pub alpha: f64,
    /// Low-pass center; empty means the origin.
    pub center: Vec<f64>,
    pub f: DMatrix<f64>,
    pub g: DVector<f64>,
    pub h: DVector<f64>,
    pub j: f64,
    pub cost: Cost,
    pub policy: ProbingGainPolicy,
}

impl EscSpec {
    pub fn q(&self) -> usize {
        self.f.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.q();
        check_dim(q, self.f.ncols())?;
        check_dim(q, self.g.len())?;
        check_dim(q, self.h.len())?;
        if !self.center.is_empty() {
            check_dim(self.cost.dim(), self.center.len())?;
        }
        check_positive("alpha", self.alpha)?;
        if self.sigma < 0.0 || (self.sigma > 0.0 && self.sigma >= self.alpha) {
            return Err(QsaError::InvalidParameter(format!(
                "low-pass sigma must satisfy 0 <= sigma < alpha, got sigma = {}, alpha = {}",
                self.sigma, self.alpha
            )));
        }
        self.policy.validate()?;
        if q > 0 {
            let max_real_part = self
                .f
                .complex_eigenvalues()
                .iter()
                .map(|z| z.re)
                .fold(f64::NEG_INFINITY, f64::max);
            if max_real_part >= 0.0 {
                return Err(QsaError::NotHurwitz { max_real_part });
            }
        }
        Ok(())
    }
}

/// ESC as a QSA field on `X = (theta, Z)`, driven by the stacked probe `(psi, psi_check)`.
/// The gain `alpha` lives inside the field, so integrate with a unit gain schedule.
#[derive(Clone, Debug)]
pub struct EscField {
    pub spec: EscSpec,
}

impl EscField {
    pub fn d(&self) -> usize {
        self.spec.cost.dim()
    }

    fn eval_into(&self, x: &[f64], probe: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let d = self.d();
        let q = self.spec.q();
        let (theta, z) = x.split_at(d);
        let (psi, psi_check) = probe.split_at(d);
        let y = normalized_observation(&self.spec.cost, &self.spec.policy, theta, psi, t)?;
        let hz: f64 = self.spec.h.iter().zip(z).map(|(a, b)| a * b).sum();
        let demod = hz + self.spec.j * y;
        for i in 0..d {
            let c = if self.spec.center.is_empty() { 0.0 } else { self.spec.center[i] };
            out[i] = -self.spec.sigma * (theta[i] - c) - self.spec.alpha * psi_check[i] * demod;
        }
        for r in 0..q {
            let fz: f64 = (0..q).map(|c| self.spec.f[(r, c)] * z[c]).sum();
            out[d + r] = fz + self.spec.g[r] * y;
        }
        Ok(())
    }
}

pub fn esc_assemble(spec: EscSpec) -> Result<FieldSpec> {
    spec.validate()?;
    Ok(FieldSpec::Esc(EscField { spec }))
}

/// Probe signal for ESC: the clocked probe stacked with its high-pass filtered copy.
#[derive(Clone, Debug)]
pub struct EscProbe {
    inner: ClockedProbe,
    f: DMatrix<f64>,
    g: DVector<f64>,
    h: DVector<f64>,
    j: f64,
    /// Per-coordinate filter states, `d x q` row-major.
    states: Vec<f64>,
    psi: Vec<f64>,
}

impl EscProbe {
    pub fn new(spec: &EscSpec, probe: ProbeSpec, clock: ClockState) -> Result<Self> {
        check_dim(spec.cost.dim(), probe.dim())?;
        let d = probe.dim();
        let q = spec.q();
        let inner = ClockedProbe::new(probe, clock)?;
        let mut psi = vec![0.0; d];
        inner.value_into(&mut psi);
        Ok(Self {
            inner,
            f: spec.f.clone(),
            g: spec.g.clone(),
            h: spec.h.clone(),
            j: spec.j,
            states: vec![0.0; d * q],
            psi,
        })
    }
}

impl ProbeSignal for EscProbe {
    fn dim(&self) -> usize {
        2 * self.psi.len()
    }

    fn value_into(&self, out: &mut [f64]) {
        let d = self.psi.len();
        let q = self.g.len();
        out[..d].copy_from_slice(&self.psi);
        for i in 0..d {
            let z = &self.states[i * q..(i + 1) * q];
            let hz: f64 = self.h.iter().zip(z).map(|(a, b)| a * b).sum();
            out[d + i] = hz + self.j * self.psi[i];
        }
    }

    fn advance(&mut self, dt: f64) {
        let d = self.psi.len();
        let q = self.g.len();
        let mut next = vec![0.0; q];
        for i in 0..d {
            let z = &self.states[i * q..(i + 1) * q];
            for r in 0..q {
                let fz: f64 = (0..q).map(|c| self.f[(r, c)] * z[c]).sum();
                next[r] = z[r] + dt * (fz + self.g[r] * self.psi[i]);
            }
            self.states[i * q..(i + 1) * q].copy_from_slice(&next);
        }
        self.inner.advance(dt);
        self.inner.value_into(&mut self.psi);
    }

    fn max_omega(&self) -> f64 {
        self.inner.max_omega()
    }
}

type CustomFn = Arc<dyn Fn(&[f64], &[f64], f64) -> Vec<f64> + Send + Sync>;

/// A QSA vector field `f(theta, psi, t)`; the gain is applied by the integrator.
#[derive(Clone)]
pub enum FieldSpec {
    Qsgd1 { cost: Cost, policy: ProbingGainPolicy },
    Qsgd2 { cost: Cost, policy: ProbingGainPolicy },
    LinearExample { variant: LinearVariant, omega: f64 },
    Esc(EscField),
    GeneralLinear(GeneralLinear),
    /// Ignores the probe entirely.
    MeanField(VectorField),
    Custom { dim: usize, probe_dim: usize, f: CustomFn },
}

impl fmt::Debug for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldSpec::Qsgd1 { cost, policy } => write!(f, "Qsgd1({}, {:?})", cost.base().name(), policy),
            FieldSpec::Qsgd2 { cost, policy } => write!(f, "Qsgd2({}, {:?})", cost.base().name(), policy),
            FieldSpec::LinearExample { variant, omega } => write!(f, "LinearExample({variant:?}, {omega})"),
            FieldSpec::Esc(e) => write!(f, "Esc(d = {}, q = {})", e.d(), e.spec.q()),
            FieldSpec::GeneralLinear(g) => write!(f, "GeneralLinear(d = {})", g.dim()),
            FieldSpec::MeanField(v) => write!(f, "MeanField(d = {})", v.dim()),
            FieldSpec::Custom { dim, probe_dim, .. } => write!(f, "Custom({dim}, {probe_dim})"),
        }
    }
}

fn probe_point(theta: &[f64], psi: &[f64], scale: f64, buf: &mut [f64]) {
    for ((b, t), p) in buf.iter_mut().zip(theta).zip(psi) {
        *b = t + scale * p;
    }
}

impl FieldSpec {
    pub fn qsgd1(cost: impl Into<Cost>, policy: ProbingGainPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(FieldSpec::Qsgd1 { cost: cost.into(), policy })
    }

    pub fn qsgd2(cost: impl Into<Cost>, policy: ProbingGainPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(FieldSpec::Qsgd2 { cost: cost.into(), policy })
    }

    pub fn linear_example(variant: LinearVariant, omega: f64) -> Result<Self> {
        check_positive("omega", omega)?;
        Ok(FieldSpec::LinearExample { variant, omega })
    }

    pub fn custom(dim: usize, probe_dim: usize, f: impl Fn(&[f64], &[f64], f64) -> Vec<f64> + Send + Sync + 'static) -> Self {
        FieldSpec::Custom { dim, probe_dim, f: Arc::new(f) }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            FieldSpec::Qsgd1 { cost, .. } | FieldSpec::Qsgd2 { cost, .. } => cost.dim(),
            FieldSpec::LinearExample { .. } => 1,
            FieldSpec::Esc(e) => e.d() + e.spec.q(),
            FieldSpec::GeneralLinear(g) => g.dim(),
            FieldSpec::MeanField(v) => v.dim(),
            FieldSpec::Custom { dim, .. } => *dim,
        }
    }

    pub fn probe_dim(&self) -> usize {
        match self {
            FieldSpec::Qsgd1 { cost, .. } | FieldSpec::Qsgd2 { cost, .. } => cost.dim(),
            FieldSpec::LinearExample { .. } | FieldSpec::MeanField(_) => 0,
            FieldSpec::Esc(e) => 2 * e.d(),
            FieldSpec::GeneralLinear(g) => g.a_k.len(),
            FieldSpec::Custom { probe_dim, .. } => *probe_dim,
        }
    }

    pub fn eval_into(&self, theta: &[f64], psi: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        match self {
            FieldSpec::Qsgd1 { cost, policy } => {
                let eps = policy.gain(theta, || cost.value(theta, t))?;
                let mut buf = [0.0; 16];
                let y = if theta.len() <= 16 {
                    let b = &mut buf[..theta.len()];
                    probe_point(theta, psi, eps, b);
                    cost.value(b, t)
                } else {
                    let mut b = vec![0.0; theta.len()];
                    probe_point(theta, psi, eps, &mut b);
                    cost.value(&b, t)
                };
                for (o, p) in out.iter_mut().zip(psi) {
                    *o = -p * y / eps;
                }
            }
            FieldSpec::Qsgd2 { cost, policy } => {
                let eps = policy.gain(theta, || cost.value(theta, t))?;
                let mut b = vec![0.0; theta.len()];
                probe_point(theta, psi, eps, &mut b);
                let up = cost.value(&b, t);
                probe_point(theta, psi, -eps, &mut b);
                let down = cost.value(&b, t);
                for (o, p) in out.iter_mut().zip(psi) {
                    *o = -p * (up - down) / (2.0 * eps);
                }
            }
            FieldSpec::LinearExample { variant, omega } => {
                out[0] = variant.eval(*omega, theta[0], t);
            }
            FieldSpec::Esc(e) => e.eval_into(theta, psi, t, out)?,
            FieldSpec::GeneralLinear(g) => {
                let d = g.dim();
                for r in 0..d {
                    let mut acc = g.b0[r];
                    for c in 0..d {
                        acc += g.a0[(r, c)] * theta[c];
                    }
                    for (k, &p) in psi.iter().enumerate() {
                        let ak = &g.a_k[k];
                        let mut s = 0.0;
                        for c in 0..d {
                            s += ak[(r, c)] * theta[c];
                        }
                        if let Some(bk) = g.b_k.get(k) {
                            s += bk[r];
                        }
                        acc += p * s;
                    }
                    out[r] = acc;
                }
            }
            FieldSpec::MeanField(v) => out.copy_from_slice(&v.eval(theta)),
            FieldSpec::Custom { f, .. } => out.copy_from_slice(&f(theta, psi, t)),
        }
        Ok(())
    }

    pub fn eval(&self, theta: &[f64], psi: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(self.state_dim(), theta.len())?;
        check_dim(self.probe_dim(), psi.len())?;
        let mut out = vec![0.0; theta.len()];
        self.eval_into(theta, psi, t, &mut out)?;
        Ok(out)
    }

    fn analytic_jacobian(&self, theta: &[f64], psi: &[f64], t: f64) -> Option<DMatrix<f64>> {
        match self {
            FieldSpec::Qsgd1 { cost, policy: ProbingGainPolicy::Constant { epsilon } } if cost.has_gradient() => {
                let x: Vec<f64> = theta.iter().zip(psi).map(|(a, b)| a + epsilon * b).collect();
                let g = cost.gradient(&x, t);
                let d = theta.len();
                Some(DMatrix::from_fn(d, d, |r, c| -psi[r] * g[c] / epsilon))
            }
            FieldSpec::Qsgd2 { cost, policy: ProbingGainPolicy::Constant { epsilon } } if cost.has_gradient() => {
                let up: Vec<f64> = theta.iter().zip(psi).map(|(a, b)| a + epsilon * b).collect();
                let down: Vec<f64> = theta.iter().zip(psi).map(|(a, b)| a - epsilon * b).collect();
                let (gu, gd) = (cost.gradient(&up, t), cost.gradient(&down, t));
                let d = theta.len();
                Some(DMatrix::from_fn(d, d, |r, c| -psi[r] * (gu[c] - gd[c]) / (2.0 * epsilon)))
            }
            FieldSpec::LinearExample { omega, .. } => {
                Some(DMatrix::from_element(1, 1, -(1.0 + (omega * t).sin())))
            }
            FieldSpec::GeneralLinear(g) => Some(g.matrix(psi)),
            _ => None,
        }
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        match self {
            FieldSpec::Qsgd1 { cost, policy: ProbingGainPolicy::Constant { .. } }
            | FieldSpec::Qsgd2 { cost, policy: ProbingGainPolicy::Constant { .. } } => cost.has_gradient(),
            FieldSpec::LinearExample { .. } | FieldSpec::GeneralLinear(_) => true,
            _ => false,
        }
    }

    /// Central-difference Jacobian in theta.
    pub fn fd_jacobian(&self, theta: &[f64], psi: &[f64], t: f64) -> Result<DMatrix<f64>> {
        let d = theta.len();
        let mut jac = DMatrix::zeros(d, d);
        let mut x = theta.to_vec();
        let mut up = vec![0.0; d];
        let mut down = vec![0.0; d];
        for c in 0..d {
            let h = JACOBIAN_FD_STEP * theta[c].abs().max(1.0);
            x[c] = theta[c] + h;
            self.eval_into(&x, psi, t, &mut up)?;
            x[c] = theta[c] - h;
            self.eval_into(&x, psi, t, &mut down)?;
            x[c] = theta[c];
            for r in 0..d {
                jac[(r, c)] = (up[r] - down[r]) / (2.0 * h);
            }
        }
        Ok(jac)
    }
}

pub fn field_jacobian(field: &FieldSpec, theta: &[f64], psi: &[f64], t: f64) -> Result<DMatrix<f64>> {
    check_dim(field.state_dim(), theta.len())?;
    check_dim(field.probe_dim(), psi.len())?;
    match field.analytic_jacobian(theta, psi, t) {
        Some(a) => Ok(a),
        None => field.fd_jacobian(theta, psi, t),
    }
}

/// Jacobian of the projected dynamics; undefined on the projection boundary.
pub fn field_jacobian_within(
    field: &FieldSpec,
    projection: &BoxProjection,
    theta: &[f64],
    psi: &[f64],
    t: f64,
) -> Result<DMatrix<f64>> {
    if projection.on_boundary(theta) {
        return Err(QsaError::NonDifferentiable);
    }
    field_jacobian(field, theta, psi, t)
}

/// Time average of `f(theta, psi_t, t)` by the trapezoid rule, with the
/// half-horizon discrepancy as a convergence diagnostic.
pub fn mean_field_oracle(
    field: &FieldSpec,
    probe: Option<&ProbeSpec>,
    theta: &[f64],
    horizon: f64,
    dt: f64,
) -> Result<(Vec<f64>, f64)> {
    check_positive("dt", dt)?;
    check_positive("horizon", horizon)?;
    let d = field.state_dim();
    check_dim(d, theta.len())?;
    let mut signal: Box<dyn ProbeSignal> = match probe {
        Some(p) => Box::new(ClockedProbe::new(p.clone(), ClockState::zeros(p.basis().len()))?),
        None => Box::new(crate::integrator::NoProbe),
    };
    check_dim(field.probe_dim(), signal.dim())?;
    let n = (horizon / dt).round() as usize;
    let half = n / 2;
    let mut psi = vec![0.0; signal.dim()];
    let mut f = vec![0.0; d];
    let mut acc = vec![0.0; d];
    let mut at_half = vec![0.0; d];
    for k in 0..=n {
        signal.value_into(&mut psi);
        field.eval_into(theta, &psi, k as f64 * dt, &mut f)?;
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        for i in 0..d {
            acc[i] += w * f[i];
        }
        if k == half {
            for i in 0..d {
                at_half[i] = (acc[i] - 0.5 * f[i]) * dt / (half as f64 * dt);
            }
        }
        signal.advance(dt);
    }
    let est: Vec<f64> = acc.iter().map(|a| a * dt / (n as f64 * dt)).collect();
    let diag = est.iter().zip(&at_half).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((est, diag))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpsaVariant {
    One,
    Two,
}

/// Discrete SPSA with symmetric two-point perturbations `{-v, +v}`.
#[derive(Clone, Debug)]
pub struct SpsaSpec {
    pub objective: Objective,
    pub epsilon: f64,
    pub variant: SpsaVariant,
    pub support: f64,
    pub seed: u64,
}

impl SpsaSpec {
    pub fn new(objective: Objective, epsilon: f64, variant: SpsaVariant) -> Self {
        Self { objective, epsilon, variant, support: 1.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        check_positive("epsilon", self.epsilon)?;
        check_positive("perturbation support", self.support)
    }

    /// `f(theta, xi)`.
    pub fn field(&self, theta: &[f64], xi: &[f64]) -> Vec<f64> {
        let up: Vec<f64> = theta.iter().zip(xi).map(|(a, b)| a + self.epsilon * b).collect();
        let scale = match self.variant {
            SpsaVariant::One => self.objective.value(&up) / self.epsilon,
            SpsaVariant::Two => {
                let down: Vec<f64> = theta.iter().zip(xi).map(|(a, b)| a - self.epsilon * b).collect();
                (self.objective.value(&up) - self.objective.value(&down)) / (2.0 * self.epsilon)
            }
        };
        xi.iter().map(|x| -x * scale).collect()
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.objective.dim())
            .map(|_| if rng.random::<bool>() { self.support } else { -self.support })
            .collect()
    }
}

/// `theta + alpha f(theta, xi)` with a fresh perturbation from `rng`.
pub fn spsa_step(spec: &SpsaSpec, theta: &[f64], alpha: f64, rng: &mut impl Rng) -> Vec<f64> {
    let xi = spec.draw(rng);
    spsa_step_with(spec, theta, alpha, &xi)
}

pub fn spsa_step_with(spec: &SpsaSpec, theta: &[f64], alpha: f64, xi: &[f64]) -> Vec<f64> {
    if alpha == 0.0 {
        return theta.to_vec();
    }
    let f = spec.field(theta, xi);
    theta.iter().zip(&f).map(|(t, g)| t + alpha * g).collect()
}

/// An SPSA instance owning its random stream.
#[derive(Clone, Debug)]
pub struct Spsa {
    pub spec: SpsaSpec,
    rng: ChaCha8Rng,
}

impl Spsa {
    pub fn new(spec: SpsaSpec) -> Result<Self> {
        spec.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Ok(Self { spec, rng })
    }

    pub fn step(&mut self, theta: &[f64], alpha: f64) -> Vec<f64> {
        spsa_step(&self.spec, theta, alpha, &mut self.rng)
    }
}
