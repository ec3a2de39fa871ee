//! Benchmark objectives and moving targets.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, QsaError, Result};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Step for the central-difference gradient fallback and consistency checks.
pub const GRADIENT_FD_STEP: f64 = 1e-5;

/// A scalar objective with optional analytic derivatives.
#[derive(Clone)]
pub struct Objective {
    name: String,
    dim: usize,
    value: ScalarFn,
    gradient: Option<VectorFn>,
    hessian: Option<MatrixFn>,
    optimizer: Option<Vec<f64>>,
    optimum: Option<f64>,
    domain: Option<Vec<(f64, f64)>>,
}

impl fmt::Debug for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Objective")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("optimizer", &self.optimizer)
            .field("domain", &self.domain)
            .finish()
    }
}

impl Objective {
    pub fn new(name: impl Into<String>, dim: usize, value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            dim,
            value: Arc::new(value),
            gradient: None,
            hessian: None,
            optimizer: None,
            optimum: None,
            domain: None,
        }
    }

    pub fn with_gradient(mut self, g: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(g));
        self
    }

    pub fn with_hessian(mut self, h: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.hessian = Some(Arc::new(h));
        self
    }

    pub fn with_optimizer(mut self, theta: Vec<f64>, value: f64) -> Self {
        self.optimizer = Some(theta);
        self.optimum = Some(value);
        self
    }

    pub fn with_domain(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.domain = Some(bounds);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        (self.value)(theta)
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    /// Analytic gradient when available, else central differences.
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        match &self.gradient {
            Some(g) => g(theta),
            None => self.fd_gradient(theta, GRADIENT_FD_STEP),
        }
    }

    pub fn fd_gradient(&self, theta: &[f64], h: f64) -> Vec<f64> {
        let mut x = theta.to_vec();
        (0..theta.len())
            .map(|i| {
                x[i] = theta[i] + h;
                let up = self.value(&x);
                x[i] = theta[i] - h;
                let down = self.value(&x);
                x[i] = theta[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    pub fn hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        match &self.hessian {
            Some(h) => h(theta),
            None => {
                let d = theta.len();
                let h = GRADIENT_FD_STEP;
                let mut x = theta.to_vec();
                let mut out = DMatrix::zeros(d, d);
                for j in 0..d {
                    x[j] = theta[j] + h;
                    let up = self.gradient(&x);
                    x[j] = theta[j] - h;
                    let down = self.gradient(&x);
                    x[j] = theta[j];
                    for i in 0..d {
                        out[(i, j)] = (up[i] - down[i]) / (2.0 * h);
                    }
                }
                out
            }
        }
    }

    pub fn optimizer(&self) -> Option<&[f64]> {
        self.optimizer.as_deref()
    }

    pub fn optimum(&self) -> Option<f64> {
        self.optimum
    }

    pub fn domain(&self) -> Option<&[(f64, f64)]> {
        self.domain.as_deref()
    }

    /// Largest relative discrepancy between the analytic and finite-difference gradient.
    pub fn gradient_check(&self, points: &[Vec<f64>]) -> f64 {
        let Some(g) = &self.gradient else { return 0.0 };
        let mut worst = 0.0f64;
        for p in points {
            let a = g(p);
            let n = self.fd_gradient(p, GRADIENT_FD_STEP);
            let scale = a.iter().map(|x| x.abs()).fold(1.0, f64::max);
            for (x, y) in a.iter().zip(&n) {
                worst = worst.max((x - y).abs() / scale);
            }
        }
        worst
    }
}

fn rastrigin_tail(theta: &[f64]) -> f64 {
    theta.iter().map(|&x| x * x - 10.0 * (TAU * x).cos()).sum()
}

/// `10 d + sum_i [theta_i^2 - 10 cos(2 pi theta_i)]`.
pub fn rastrigin_value(theta: &[f64]) -> f64 {
    10.0 * theta.len() as f64 + rastrigin_tail(theta)
}

pub fn rastrigin_gradient(theta: &[f64]) -> Vec<f64> {
    theta.iter().map(|&x| 2.0 * x + 20.0 * PI * (TAU * x).sin()).collect()
}

pub fn rastrigin_hessian(theta: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        theta.len(),
        theta.iter().map(|&x| 2.0 + 40.0 * PI * PI * (TAU * x).cos()),
    ))
}

/// Rastrigin objective in `d` dimensions, evaluation box `[-5.12, 5.12]^d`.
pub fn rastrigin_nd(d: usize) -> Objective {
    Objective::new("rastrigin", d, rastrigin_value)
        .with_gradient(rastrigin_gradient)
        .with_hessian(rastrigin_hessian)
        .with_optimizer(vec![0.0; d], 0.0)
        .with_domain(vec![(-5.12, 5.12); d])
}

pub fn rastrigin() -> Objective {
    rastrigin_nd(2)
}

pub fn camel3_value(theta: &[f64]) -> f64 {
    let (x, y) = (theta[0], theta[1]);
    let x2 = x * x;
    2.0 * x2 + x * y + y * y + x2 * x2 * x2 / 6.0 - 1.05 * x2 * x2
}

pub fn camel3_gradient(theta: &[f64]) -> Vec<f64> {
    let (x, y) = (theta[0], theta[1]);
    let x2 = x * x;
    vec![4.0 * x + y + x2 * x2 * x - 4.2 * x2 * x, x + 2.0 * y]
}

pub fn camel3_hessian(theta: &[f64]) -> DMatrix<f64> {
    let x2 = theta[0] * theta[0];
    DMatrix::from_row_slice(2, 2, &[4.0 + 5.0 * x2 * x2 - 12.6 * x2, 1.0, 1.0, 2.0])
}

/// Three-hump camel, evaluation box `[-5, 5]^2`.
pub fn camel3() -> Objective {
    Objective::new("camel3", 2, camel3_value)
        .with_gradient(camel3_gradient)
        .with_hessian(camel3_hessian)
        .with_optimizer(vec![0.0, 0.0], 0.0)
        .with_domain(vec![(-5.0, 5.0); 2])
}

/// Local minimizers of the camel function other than the origin, found by Newton's method.
pub fn camel3_local_minima() -> [[f64; 2]; 2] {
    let mut x = 1.75f64;
    for _ in 0..50 {
        // stationarity with y = -x/2: 3.5 x - 4.2 x^3 + x^5 = 0
        let g = 3.5 * x - 4.2 * x.powi(3) + x.powi(5);
        let dg = 3.5 - 12.6 * x * x + 5.0 * x.powi(4);
        x -= g / dg;
    }
    [[x, -x / 2.0], [-x, x / 2.0]]
}

/// `0.5 (theta - opt)^T P (theta - opt)` for symmetric positive definite `P`.
pub fn quadratic(p: DMatrix<f64>, opt: Vec<f64>) -> Result<Objective> {
    if p.nrows() != p.ncols() {
        return Err(QsaError::NotSpd);
    }
    check_dim(p.nrows(), opt.len())?;
    let scale = p.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if (&p - p.transpose()).iter().any(|x| x.abs() > 1e-12 * scale.max(1.0)) {
        return Err(QsaError::NotSpd);
    }
    if p.clone().cholesky().is_none() {
        return Err(QsaError::NotSpd);
    }
    let d = opt.len();
    let (p1, o1) = (p.clone(), opt.clone());
    let (p2, o2) = (p.clone(), opt.clone());
    let p3 = p.clone();
    Ok(Objective::new("quadratic", d, move |th| {
        let e = nalgebra::DVector::from_iterator(d, th.iter().zip(&o1).map(|(a, b)| a - b));
        0.5 * e.dot(&(&p1 * &e))
    })
    .with_gradient(move |th| {
        let e = nalgebra::DVector::from_iterator(d, th.iter().zip(&o2).map(|(a, b)| a - b));
        (&p2 * e).iter().cloned().collect()
    })
    .with_hessian(move |_| p3.clone())
    .with_optimizer(opt, 0.0))
}

/// Interpretation of the wave period constant `c / b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WavePeriod {
    /// Period `c / b` seconds.
    Literal,
    /// Frequency `c * b` cycles/s, i.e. period `1 / (c b)` seconds.
    #[default]
    FrequencyScale,
}

/// Time-varying optimizer location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum MovingTarget {
    Lotus { m: f64, h: f64, omega0: f64, b0: f64 },
    /// `direction * g_t`, triangle wave for `t <= switch_time`, square wave after.
    Wave { direction: Vec<f64>, period: f64, switch_time: f64 },
}

impl MovingTarget {
    pub fn lotus_default() -> Self {
        MovingTarget::Lotus { m: 1.6, h: 0.6, omega0: 2e-3, b0: 0.6 }
    }

    /// Wave along `(1, 1)` with period from `c` and `b`, switching at `horizon / 2`.
    pub fn wave(b: f64, c: f64, interpretation: WavePeriod, horizon: f64) -> Self {
        let period = match interpretation {
            WavePeriod::Literal => c / b,
            WavePeriod::FrequencyScale => 1.0 / (c * b),
        };
        MovingTarget::Wave { direction: vec![1.0, 1.0], period, switch_time: horizon / 2.0 }
    }

    pub fn dim(&self) -> usize {
        match self {
            MovingTarget::Lotus { .. } => 2,
            MovingTarget::Wave { direction, .. } => direction.len(),
        }
    }

    pub fn position_into(&self, t: f64, out: &mut [f64]) {
        match self {
            MovingTarget::Lotus { m, h, omega0, b0 } => {
                let slow = omega0 * t;
                let fast = m * omega0 * t / b0;
                out[0] = m * slow.cos() - h * fast.cos();
                out[1] = m * slow.sin() - h * fast.sin();
            }
            MovingTarget::Wave { direction, period, switch_time } => {
                let x = t / period;
                let frac = x - x.floor();
                let g = if t <= *switch_time {
                    1.0 - (2.0 * frac - 1.0).abs()
                } else if frac < 0.5 {
                    1.0
                } else {
                    0.0
                };
                for (o, d) in out.iter_mut().zip(direction) {
                    *o = d * g;
                }
            }
        }
    }

    pub fn position(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.position_into(t, &mut out);
        out
    }
}

pub fn target_position(target: &MovingTarget, t: f64) -> Vec<f64> {
    target.position(t)
}

/// `Obj_t(theta) = Obj(theta - theta_opt(t))`.
#[derive(Clone, Debug)]
pub struct TimeVaryingObjective {
    pub base: Objective,
    pub target: MovingTarget,
}

impl TimeVaryingObjective {
    pub fn new(base: Objective, target: MovingTarget) -> Result<Self> {
        check_dim(base.dim(), target.dim())?;
        Ok(Self { base, target })
    }

    fn shifted(&self, theta: &[f64], t: f64) -> Vec<f64> {
        let mut pos = self.target.position(t);
        for (p, x) in pos.iter_mut().zip(theta) {
            *p = x - *p;
        }
        pos
    }

    pub fn value(&self, theta: &[f64], t: f64) -> f64 {
        self.base.value(&self.shifted(theta, t))
    }

    pub fn gradient(&self, theta: &[f64], t: f64) -> Vec<f64> {
        self.base.gradient(&self.shifted(theta, t))
    }

    pub fn minimizer(&self, t: f64) -> Option<Vec<f64>> {
        let opt = self.base.optimizer()?;
        let mut pos = self.target.position(t);
        for (p, o) in pos.iter_mut().zip(opt) {
            *p += o;
        }
        Some(pos)
    }
}

/// Static or moving objective as seen by a field.
#[derive(Clone, Debug)]
pub enum Cost {
    Static(Objective),
    Moving(TimeVaryingObjective),
}

impl Cost {
    pub fn dim(&self) -> usize {
        match self {
            Cost::Static(o) => o.dim(),
            Cost::Moving(o) => o.base.dim(),
        }
    }

    pub fn value(&self, theta: &[f64], t: f64) -> f64 {
        match self {
            Cost::Static(o) => o.value(theta),
            Cost::Moving(o) => o.value(theta, t),
        }
    }

    pub fn gradient(&self, theta: &[f64], t: f64) -> Vec<f64> {
        match self {
            Cost::Static(o) => o.gradient(theta),
            Cost::Moving(o) => o.gradient(theta, t),
        }
    }

    pub fn has_gradient(&self) -> bool {
        match self {
            Cost::Static(o) => o.has_gradient(),
            Cost::Moving(o) => o.base.has_gradient(),
        }
    }

    pub fn base(&self) -> &Objective {
        match self {
            Cost::Static(o) => o,
            Cost::Moving(o) => &o.base,
        }
    }

    pub fn minimizer(&self, t: f64) -> Option<Vec<f64>> {
        match self {
            Cost::Static(o) => o.optimizer().map(|x| x.to_vec()),
            Cost::Moving(o) => o.minimizer(t),
        }
    }
}

impl From<Objective> for Cost {
    fn from(o: Objective) -> Self {
        Cost::Static(o)
    }
}

impl From<TimeVaryingObjective> for Cost {
    fn from(o: TimeVaryingObjective) -> Self {
        Cost::Moving(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(bounds: &[(f64, f64)], n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| bounds.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect())
            .collect()
    }

    #[test]
    fn rastrigin_values() {
        assert_eq!(rastrigin_value(&[0.0, 0.0]), 0.0);
        assert_relative_eq!(rastrigin_value(&[1.0, 1.0]), 2.0, epsilon = 1e-12);
        assert_relative_eq!(rastrigin_value(&[0.25, 0.0]), 10.0625, epsilon = 1e-12);
    }

    #[test]
    fn camel_values() {
        assert_eq!(camel3_value(&[0.0, 0.0]), 0.0);
        assert_relative_eq!(camel3_value(&[1.0, 1.0]), 2.0 + 1.0 + 1.0 + 1.0 / 6.0 - 1.05, epsilon = 1e-14);
        assert_eq!(camel3_gradient(&[0.0, 0.0]), vec![0.0, 0.0]);
        let [a, b] = camel3_local_minima();
        assert_relative_eq!(a[0], 1.7476, epsilon = 1e-4);
        assert_relative_eq!(b[1], 0.8738, epsilon = 1e-4);
        let g = camel3_gradient(&a);
        assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
        assert!(camel3_hessian(&a).cholesky().is_some());
    }

    #[test]
    fn quadratic_values() {
        let q = quadratic(DMatrix::identity(2, 2), vec![1.0, -1.0]).unwrap();
        assert_eq!(q.value(&[1.0, -1.0]), 0.0);
        assert_relative_eq!(q.value(&[4.0, 3.0]), 12.5);
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let q = quadratic(p, vec![0.3, 0.1]).unwrap();
        assert!(q.gradient_check(&random_points(&[(-3.0, 3.0); 2], 50, 1)) < 1e-4);
        assert_eq!(
            quadratic(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), vec![0.0; 2]).unwrap_err(),
            QsaError::NotSpd
        );
        assert_eq!(
            quadratic(DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]), vec![0.0; 2]).unwrap_err(),
            QsaError::NotSpd
        );
    }

    #[test]
    fn derivative_consistency() {
        for obj in [rastrigin(), camel3()] {
            let pts = random_points(obj.domain().unwrap(), 50, 7);
            assert!(obj.gradient_check(&pts) < 1e-4, "{}", obj.name());
            let h = obj.hessian.clone().unwrap();
            for p in &pts {
                let a = h(p);
                let mut x = p.clone();
                for j in 0..2 {
                    x[j] = p[j] + 1e-5;
                    let up = obj.gradient(&x);
                    x[j] = p[j] - 1e-5;
                    let down = obj.gradient(&x);
                    x[j] = p[j];
                    for i in 0..2 {
                        let fd = (up[i] - down[i]) / 2e-5;
                        assert!((fd - a[(i, j)]).abs() <= 1e-4 * a.amax().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn global_minimum_certificates() {
        for obj in [rastrigin(), camel3()] {
            let (lo, hi) = obj.domain().unwrap()[0];
            let n = 401;
            let step = (hi - lo) / (n - 1) as f64;
            let mut zeros = 0;
            for i in 0..n {
                for j in 0..n {
                    let th = [lo + i as f64 * step, lo + j as f64 * step];
                    let v = obj.value(&th);
                    assert!(v >= -1e-12);
                    if v.abs() <= 1e-12 {
                        zeros += 1;
                        assert!(th[0].abs() < 1e-9 && th[1].abs() < 1e-9);
                    }
                }
            }
            assert_eq!(zeros, 1);
        }
    }

    #[test]
    fn rastrigin_scaled_limit() {
        let r = 1e3;
        for k in 0..16 {
            let a = k as f64 * TAU / 16.0;
            let th = [r * a.cos(), r * a.sin()];
            assert!((rastrigin_value(&th) / (r * r) - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn lotus_and_wave() {
        let lotus = MovingTarget::lotus_default();
        let p = target_position(&lotus, 0.0);
        assert_relative_eq!(p[0], 1.0, epsilon = 1e-12);
        assert_eq!(p[1], 0.0);
        let w = MovingTarget::wave(1.0, 5e-3, WavePeriod::FrequencyScale, 1e4);
        let MovingTarget::Wave { period, .. } = &w else { unreachable!() };
        assert_relative_eq!(*period, 200.0);
        assert_eq!(target_position(&w, 100.0), vec![1.0, 1.0]);
        assert_eq!(target_position(&w, 0.0), vec![0.0, 0.0]);
        for k in 0..500 {
            let t = 5000.0 + 10.0 * k as f64 + 0.3;
            let v = target_position(&w, t)[0];
            assert!(v == 0.0 || v == 1.0);
        }
        let lit = MovingTarget::wave(5.0, 5e-3, WavePeriod::Literal, 10.0);
        let MovingTarget::Wave { period, .. } = &lit else { unreachable!() };
        assert_relative_eq!(*period, 1e-3);
    }

    #[test]
    fn time_varying_minimizer() {
        let tv = TimeVaryingObjective::new(camel3(), MovingTarget::lotus_default()).unwrap();
        for &t in &[0.0, 123.0, 4567.0] {
            let m = tv.minimizer(t).unwrap();
            assert_eq!(m, target_position(&tv.target, t));
            assert_eq!(tv.value(&m, t), 0.0);
        }
    }
}
