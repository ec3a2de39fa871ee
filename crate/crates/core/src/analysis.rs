//! Bias metrics, covariance, Lyapunov exponents, Poisson-identity residuals and Markov SA.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{LinearClosedForms, VectorField};
use crate::error::{check_dim, check_positive, QsaError, Result};
use crate::filters::WindowIntegral;
use crate::integrator::{ChannelKind, Trajectory};
use crate::probing::{probe_poisson, ClockState, ProbeSpec, TrigPolynomial};

/// Default fraction of the run used for steady-state measurements.
pub const DEFAULT_WINDOW: f64 = 0.2;
/// Number of batches for batch-means standard errors.
pub const BATCHES: usize = 20;
/// Default burn-in fraction for Markov SA runs.
pub const BURN_IN: f64 = 0.2;

fn check_window(window: f64) -> Result<()> {
    if !(window > 0.0 && window < 1.0) {
        return Err(QsaError::InvalidParameter(format!("window fraction must lie in (0, 1), got {window}")));
    }
    Ok(())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Time average of `|Theta_t - theta*|` over the final `window` fraction of the run.
pub fn steady_state_bias(traj: &Trajectory, theta_star: &[f64], window: f64) -> Result<f64> {
    check_window(window)?;
    check_dim(traj.dim, theta_star.len())?;
    if traj.len() < 2 {
        return Err(QsaError::WindowEmpty { detail: "trajectory has fewer than two samples".into() });
    }
    let end = traj.final_time();
    let start = traj.t0 + (1.0 - window) * (end - traj.t0);
    let mut w = WindowIntegral::new(start, end, 1);
    for k in 0..traj.len() {
        w.push(traj.time(k), &[euclid(traj.state(k), theta_star)]);
    }
    Ok(w.mean()?[0])
}

/// Same metric on an arbitrary channel, e.g. a filtered state.
pub fn steady_state_bias_of(traj: &Trajectory, kind: &ChannelKind, theta_star: &[f64], window: f64) -> Result<f64> {
    let t = traj
        .channel_as_trajectory(kind)
        .ok_or_else(|| QsaError::InvalidParameter(format!("trajectory has no channel {kind:?}")))?;
    steady_state_bias(&t, theta_star, window)
}

/// `Sigma = (1/M) sum theta theta^T - mean mean^T` and `sigma_hat = sqrt(tr Sigma)`.
pub fn empirical_covariance(finals: &[Vec<f64>]) -> Result<(DMatrix<f64>, f64)> {
    let m = finals.len();
    if m < 2 {
        return Err(QsaError::TooFewSamples { needed: 2, got: m });
    }
    let d = finals[0].len();
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for x in finals {
        check_dim(d, x.len())?;
        let v = DVector::from_column_slice(x);
        second += &v * v.transpose();
        mean += v;
    }
    mean /= m as f64;
    second /= m as f64;
    let cov = second - &mean * mean.transpose();
    let tr = cov.trace().max(0.0);
    Ok((cov, tr.sqrt()))
}

/// `(1/T) int_0^T fbar(Theta_t) dt` and the same over the first half of the run.
pub fn mean_target_bias(traj: &Trajectory, fbar: &VectorField) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim(fbar.dim(), traj.dim)?;
    if traj.len() < 3 {
        return Err(QsaError::WindowEmpty { detail: "trajectory too short".into() });
    }
    let end = traj.final_time();
    let mid = traj.t0 + 0.5 * (end - traj.t0);
    let mut full = WindowIntegral::new(traj.t0, end, fbar.dim());
    let mut half = WindowIntegral::new(traj.t0, mid, fbar.dim());
    for k in 0..traj.len() {
        let v = fbar.eval(traj.state(k));
        full.push(traj.time(k), &v);
        half.push(traj.time(k), &v);
    }
    Ok((full.mean()?, half.mean()?))
}

/// Least-squares line `y = slope x + intercept`.
fn least_squares(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if !(sxx > 0.0) {
        return Err(QsaError::DegenerateFit { detail: "abscissae are all equal".into() });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok((slope, intercept, r2))
}

/// Slope of `log |S_t|` against `t` over the final half of the run.
pub fn lyapunov_exponent(traj: &Trajectory) -> Result<f64> {
    let ch = traj
        .channel(&ChannelKind::LogSensitivityNorm)
        .ok_or_else(|| QsaError::DegenerateFit { detail: "no sensitivity channel recorded".into() })?;
    let n = ch.data.len();
    if n < 4 {
        return Err(QsaError::DegenerateFit { detail: format!("only {n} sensitivity samples") });
    }
    let start = n / 2;
    let x: Vec<f64> = (start..n).map(|k| traj.time(k)).collect();
    let (slope, _, _) = least_squares(&x, &ch.data[start..])?;
    Ok(slope)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Log-log least squares on `(alpha, bias)` pairs.
pub fn slope_fit(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 4 {
        return Err(QsaError::TooFewSamples { needed: 4, got: points.len() });
    }
    for &(a, b) in points {
        check_positive("slope-fit abscissa", a)?;
        check_positive("slope-fit ordinate", b)?;
    }
    let x: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept, r2) = least_squares(&x, &y)?;
    Ok(SlopeFit { slope, intercept, r2 })
}

/// Closed-form Poisson data for a field along which the Step-1 identity can be audited.
pub trait PmfClosedForm {
    fn dim(&self) -> usize;
    fn field(&self, theta: &[f64], t: f64) -> Vec<f64>;
    fn mean_field(&self, theta: &[f64]) -> Vec<f64>;
    fn fhat(&self, theta: &[f64], t: f64) -> Vec<f64>;
    fn fhat_jacobian(&self, theta: &[f64], t: f64) -> DMatrix<f64>;
}

impl PmfClosedForm for LinearClosedForms {
    fn dim(&self) -> usize {
        1
    }
    fn field(&self, theta: &[f64], t: f64) -> Vec<f64> {
        vec![LinearClosedForms::field(self, theta[0], t)]
    }
    fn mean_field(&self, theta: &[f64]) -> Vec<f64> {
        vec![LinearClosedForms::mean_field(self, theta[0])]
    }
    fn fhat(&self, theta: &[f64], t: f64) -> Vec<f64> {
        vec![LinearClosedForms::fhat(self, theta[0], t)]
    }
    fn fhat_jacobian(&self, _theta: &[f64], t: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.fhat_dtheta(t))
    }
}

/// 2qSGD on `0.5 (theta - opt)^T P (theta - opt)`: `f = -psi psi^T P (theta - opt)` exactly,
/// so `f_hat = -Sigma_hat(t) P (theta - opt)`.
#[derive(Clone, Debug)]
pub struct QuadraticQsgd2ClosedForm {
    pub p: DMatrix<f64>,
    pub opt: DVector<f64>,
    pub probe: Vec<TrigPolynomial>,
    pub sigma: DMatrix<f64>,
    pub sigma_hat: Vec<Vec<TrigPolynomial>>,
}

impl QuadraticQsgd2ClosedForm {
    pub fn new(p: DMatrix<f64>, opt: &[f64], probe: &ProbeSpec, clock0: &ClockState) -> Result<Self> {
        check_dim(p.nrows(), probe.dim())?;
        check_dim(p.nrows(), opt.len())?;
        let probe = probe.polynomials_from(clock0);
        let m = probe.len();
        let mut sigma = DMatrix::zeros(m, m);
        let mut sigma_hat = vec![vec![TrigPolynomial::zero(); m]; m];
        for i in 0..m {
            for j in 0..m {
                let (mean, sol) = probe[i].mul(&probe[j]).poisson_solve();
                sigma[(i, j)] = mean;
                sigma_hat[i][j] = sol;
            }
        }
        Ok(Self { p, opt: DVector::from_column_slice(opt), probe, sigma, sigma_hat })
    }

    /// Probe covariance from the symbolic Poisson machinery.
    pub fn sigma_from_spec(spec: &ProbeSpec) -> DMatrix<f64> {
        probe_poisson(spec).sigma
    }

    fn sigma_hat_at(&self, t: f64) -> DMatrix<f64> {
        let m = self.probe.len();
        DMatrix::from_fn(m, m, |i, j| self.sigma_hat[i][j].eval(t))
    }

    fn err(&self, theta: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(theta) - &self.opt
    }
}

impl PmfClosedForm for QuadraticQsgd2ClosedForm {
    fn dim(&self) -> usize {
        self.p.nrows()
    }
    fn field(&self, theta: &[f64], t: f64) -> Vec<f64> {
        let psi = DVector::from_iterator(self.probe.len(), self.probe.iter().map(|p| p.eval(t)));
        let v = -(&psi * psi.transpose()) * &self.p * self.err(theta);
        v.iter().cloned().collect()
    }
    fn mean_field(&self, theta: &[f64]) -> Vec<f64> {
        (-(&self.sigma) * &self.p * self.err(theta)).iter().cloned().collect()
    }
    fn fhat(&self, theta: &[f64], t: f64) -> Vec<f64> {
        (-(self.sigma_hat_at(t)) * &self.p * self.err(theta)).iter().cloned().collect()
    }
    fn fhat_jacobian(&self, _theta: &[f64], t: f64) -> DMatrix<f64> {
        -(self.sigma_hat_at(t)) * &self.p
    }
}

/// Residual of `Xi_t + d/dt f_hat(Theta_t, Phi_t) + alpha Upsilon_t` along a trajectory.
#[derive(Clone, Debug)]
pub struct PmfResidual {
    pub times: Vec<f64>,
    /// Max-norm of the residual vector at each interior grid point.
    pub residual: Vec<f64>,
}

impl PmfResidual {
    pub fn sup(&self) -> f64 {
        self.residual.iter().cloned().fold(0.0, f64::max)
    }
}

/// Audits the Step-1 identity on a trajectory recorded at every step with constant gain `alpha`.
pub fn pmf_residual(traj: &Trajectory, closed: &dyn PmfClosedForm, alpha: f64) -> Result<PmfResidual> {
    check_dim(closed.dim(), traj.dim)?;
    if traj.len() < 3 {
        return Err(QsaError::TooFewSamples { needed: 3, got: traj.len() });
    }
    let d = traj.dim;
    let dt = traj.dt;
    let mut times = Vec::with_capacity(traj.len() - 2);
    let mut residual = Vec::with_capacity(traj.len() - 2);
    let mut fhat_prev = closed.fhat(traj.state(0), traj.time(0));
    let mut fhat_cur = closed.fhat(traj.state(1), traj.time(1));
    for k in 1..traj.len() - 1 {
        let (th, t) = (traj.state(k), traj.time(k));
        let fhat_next = closed.fhat(traj.state(k + 1), traj.time(k + 1));
        let f = closed.field(th, t);
        let fbar = closed.mean_field(th);
        let jac = closed.fhat_jacobian(th, t);
        let fv = DVector::from_column_slice(&f);
        let upsilon = -(jac * fv);
        let mut worst = 0.0f64;
        for i in 0..d {
            let deriv = (fhat_next[i] - fhat_prev[i]) / (2.0 * dt);
            let r = f[i] - fbar[i] + deriv + alpha * upsilon[i];
            worst = worst.max(r.abs());
        }
        times.push(t);
        residual.push(worst);
        fhat_prev = std::mem::replace(&mut fhat_cur, fhat_next);
    }
    Ok(PmfResidual { times, residual })
}

/// Standard error of the mean by non-overlapping batch means.
pub fn batch_means_se(values: &[f64], batches: usize) -> Result<f64> {
    if batches < 2 || values.len() < batches {
        return Err(QsaError::TooFewSamples { needed: batches.max(2), got: values.len() });
    }
    let size = values.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| values[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (batches - 1) as f64;
    Ok((var / batches as f64).sqrt())
}

/// Streaming batch-means accumulator for long runs.
#[derive(Clone, Debug)]
struct BatchMeans {
    size: usize,
    count: usize,
    current: f64,
    means: Vec<f64>,
}

impl BatchMeans {
    fn new(total: usize, batches: usize) -> Self {
        Self { size: (total / batches).max(1), count: 0, current: 0.0, means: Vec::with_capacity(batches) }
    }

    fn push(&mut self, x: f64, batches: usize) {
        if self.means.len() == batches {
            return;
        }
        self.current += x;
        self.count += 1;
        if self.count == self.size {
            self.means.push(self.current / self.size as f64);
            self.current = 0.0;
            self.count = 0;
        }
    }

    fn mean_and_se(&self) -> (f64, f64) {
        let b = self.means.len() as f64;
        let m = self.means.iter().sum::<f64>() / b;
        let var = self.means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (b - 1.0);
        (m, (var / b).sqrt())
    }
}

/// Finite-state Markov chain driving a scalar linear SA recursion
/// `theta <- theta + alpha (-a(x) theta + g(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovChainSpec {
    /// Row-stochastic transition matrix, row-major.
    pub transition: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    /// Multiplicative coefficient per state; empty means `a = 1`.
    #[serde(default)]
    pub a: Vec<f64>,
}

impl MarkovChainSpec {
    pub fn additive(transition: Vec<Vec<f64>>, g: Vec<f64>) -> Self {
        Self { transition, g, a: Vec::new() }
    }

    pub fn n(&self) -> usize {
        self.transition.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| self.transition[i][j])
    }

    pub fn a_vec(&self) -> Vec<f64> {
        if self.a.is_empty() {
            vec![1.0; self.n()]
        } else {
            self.a.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(QsaError::InvalidParameter("empty transition matrix".into()));
        }
        check_dim(n, self.g.len())?;
        if !self.a.is_empty() {
            check_dim(n, self.a.len())?;
        }
        for row in &self.transition {
            check_dim(n, row.len())?;
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(QsaError::InvalidParameter("transition probabilities must lie in [0, 1]".into()));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(QsaError::InvalidParameter(format!("transition row sums to {s}")));
            }
        }
        // single communicating class: every state reaches every other
        for start in 0..n {
            let mut seen = vec![false; n];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    if self.transition[i][j] > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(QsaError::Reducible);
            }
        }
        Ok(())
    }

    pub fn stationary(&self) -> Result<DVector<f64>> {
        self.validate()?;
        let n = self.n();
        let mut a = (DMatrix::identity(n, n) - self.matrix()).transpose();
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = DVector::zeros(n);
        b[n - 1] = 1.0;
        a.lu().solve(&b).ok_or(QsaError::Reducible)
    }

    /// Solves `(I - P) h = h_tilde` with `pi^T h = 0` for forcing `h` minus its `pi`-mean.
    pub fn poisson(&self, h: &[f64]) -> Result<DVector<f64>> {
        let n = self.n();
        check_dim(n, h.len())?;
        let pi = self.stationary()?;
        let hv = DVector::from_column_slice(h);
        let mean = pi.dot(&hv);
        let tilde = hv.map(|x| x - mean);
        let ones = DVector::from_element(n, 1.0);
        let a = DMatrix::identity(n, n) - self.matrix() + ones * pi.transpose();
        a.lu().solve(&tilde).ok_or(QsaError::Reducible)
    }

    /// Stationary `E[theta_n]` of the SA recursion, by linear algebra.
    pub fn stationary_mean_theta(&self, alpha: f64) -> Result<f64> {
        let n = self.n();
        let pi = self.stationary()?;
        let a = self.a_vec();
        let p = self.matrix();
        // m_y = (1 - alpha a_y) sum_x m_x P(x, y) + alpha g_y pi_y
        let mut lhs = DMatrix::identity(n, n);
        for y in 0..n {
            for x in 0..n {
                lhs[(y, x)] -= (1.0 - alpha * a[y]) * p[(x, y)];
            }
        }
        let rhs = DVector::from_fn(n, |y, _| alpha * self.g[y] * pi[y]);
        let m = lhs.lu().solve(&rhs).ok_or_else(|| QsaError::InvalidParameter("singular stationary system".into()))?;
        Ok(m.sum())
    }

    /// `(a_bar, g_bar)` so that `fbar(theta) = -a_bar theta + g_bar`.
    pub fn mean_coefficients(&self) -> Result<(f64, f64)> {
        let pi = self.stationary()?;
        let a = DVector::from_vec(self.a_vec());
        Ok((pi.dot(&a), pi.dot(&DVector::from_column_slice(&self.g))))
    }
}

/// Outcome of a Markov SA bias run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovSaRecord {
    pub alpha: f64,
    pub steps: usize,
    pub mean_fbar: f64,
    pub neg_mean_xi: f64,
    pub alpha_mean_upsilon: f64,
    /// Batch-means standard error of `fbar(theta_n) - alpha Upsilon_n`.
    pub se_identity: f64,
    pub se_fbar: f64,
    /// `E fbar + E Xi`, zero up to the telescoping boundary term.
    pub closure: f64,
    /// Stationary `E fbar(theta)` from the linear-algebra oracle.
    pub oracle_fbar: f64,
}

impl MarkovSaRecord {
    pub fn identity_gap(&self) -> f64 {
        (self.mean_fbar - self.alpha_mean_upsilon).abs()
    }
}

/// Simulates the Markov SA recursion and compares `E[fbar]` with `alpha E[Upsilon]`.
pub fn markov_sa_bias(spec: &MarkovChainSpec, alpha: f64, steps: usize, seed: u64) -> Result<MarkovSaRecord> {
    check_positive("alpha", alpha)?;
    let pi = spec.stationary()?;
    let n = spec.n();
    let a = spec.a_vec();
    let (a_bar, g_bar) = spec.mean_coefficients()?;
    if a_bar <= 0.0 {
        return Err(QsaError::InvalidParameter("mean field must be stable (a_bar > 0)".into()));
    }
    // h_hat(theta, x) = -a_hat(x) theta + g_hat(x)
    let a_hat = spec.poisson(&a)?;
    let cumulative: Vec<Vec<f64>> = spec
        .transition
        .iter()
        .map(|row| {
            let mut acc = 0.0;
            row.iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |x: usize, rng: &mut ChaCha8Rng| -> usize {
        let u: f64 = rng.random();
        cumulative[x].iter().position(|&c| u < c).unwrap_or(n - 1)
    };
    let mut x_next = {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        (0..n)
            .find(|&i| {
                acc += pi[i];
                u < acc
            })
            .unwrap_or(n - 1)
    };
    let mut x_after = sample(x_next, &mut rng);
    let mut theta = g_bar / a_bar;
    let burn = (BURN_IN * steps as f64) as usize;
    let kept = steps - burn;
    if kept < BATCHES {
        return Err(QsaError::TooFewSamples { needed: BATCHES, got: kept });
    }
    let mut diff = BatchMeans::new(kept, BATCHES);
    let mut fb = BatchMeans::new(kept, BATCHES);
    let (mut sum_fbar, mut sum_xi, mut sum_ups) = (0.0, 0.0, 0.0);
    let mut count = 0usize;
    for k in 0..steps {
        // theta_{k+1} = theta_k + alpha f(theta_k, Phi_{k+1}); Phi_{k+2} enters Upsilon_k
        let fbar = -a_bar * theta + g_bar;
        let f = -a[x_next] * theta + spec.g[x_next];
        let upsilon = a_hat[x_after] * f;
        if k >= burn {
            sum_fbar += fbar;
            sum_xi += f - fbar;
            sum_ups += upsilon;
            count += 1;
            diff.push(fbar - alpha * upsilon, BATCHES);
            fb.push(fbar, BATCHES);
        }
        theta += alpha * f;
        if !theta.is_finite() || theta.abs() > crate::integrator::DIVERGENCE_BOUND {
            return Err(QsaError::Diverged { t: (k + 1) as f64, norm: theta.abs() });
        }
        x_next = x_after;
        x_after = sample(x_next, &mut rng);
    }
    let c = count as f64;
    let oracle_theta = spec.stationary_mean_theta(alpha)?;
    Ok(MarkovSaRecord {
        alpha,
        steps,
        mean_fbar: sum_fbar / c,
        neg_mean_xi: -sum_xi / c,
        alpha_mean_upsilon: alpha * sum_ups / c,
        se_identity: diff.mean_and_se().1,
        se_fbar: fb.mean_and_se().1,
        closure: (sum_fbar + sum_xi) / c,
        oracle_fbar: -a_bar * oracle_theta + g_bar,
    })
}

/// Terminal norms of the scaled flows `d theta/dt = fbar(r theta)/r` started on the unit sphere.
pub fn ode_at_infinity_stability(
    fbar: &VectorField,
    radii: &[f64],
    horizon: f64,
    dt: f64,
    direction: &[f64],
) -> Result<Vec<(f64, f64)>> {
    check_dim(fbar.dim(), direction.len())?;
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(QsaError::InvalidParameter("radii must be increasing".into()));
    }
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    check_positive("initial direction norm", norm)?;
    let theta0: Vec<f64> = direction.iter().map(|x| x / norm).collect();
    radii
        .iter()
        .map(|&r| {
            let scaled = crate::integrator::scaled_field(fbar, r)?;
            let traj = crate::integrator::integrate_mean_flow(&scaled, &theta0, dt, horizon)?;
            let end = traj.final_state();
            Ok((r, end.iter().map(|x| x * x).sum::<f64>().sqrt()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRecord {
    pub alpha: f64,
    pub bias_raw: f64,
    pub bias_f1: f64,
    pub bias_f2: f64,
    pub bias_pr: f64,
}

/// Per-alpha bias table with run metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub records: Vec<BiasRecord>,
    pub window: f64,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl BiasReport {
    pub fn points(&self, f: impl Fn(&BiasRecord) -> f64) -> Vec<(f64, f64)> {
        self.records.iter().map(|r| (r.alpha, f(r))).collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "alpha,bias_raw,bias_f1,bias_f2,bias_pr")?;
        for r in &self.records {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.alpha, r.bias_raw, r.bias_f1, r.bias_f2, r.bias_pr
            )?;
        }
        Ok(())
    }

    pub fn save(&self, csv_path: &Path, metadata_path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(csv_path)?))?;
        let mut meta = self.metadata.clone();
        meta.insert("window".into(), serde_json::json!(self.window));
        meta.insert("error_norm".into(), serde_json::json!("euclidean"));
        let s = serde_json::to_string_pretty(&meta).map_err(|e| QsaError::Io(e.to_string()))?;
        std::fs::write(metadata_path, s)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{linear_example_closed_forms, FieldSpec, LinearVariant};
    use crate::integrator::{integrate_qsa, BoxProjection, Channels, GainSchedule};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn series(dt: f64, n: usize, d: usize, f: impl Fn(f64) -> Vec<f64>) -> Trajectory {
        Trajectory::from_states(0.0, dt, d, (0..n).flat_map(|k| f(k as f64 * dt)).collect()).unwrap()
    }

    #[test]
    fn steady_state_examples() {
        let traj = series(0.1, 1001, 2, |_| vec![3.0, 4.0]);
        assert_relative_eq!(steady_state_bias(&traj, &[0.0, 0.0], 0.2).unwrap(), 5.0, epsilon = 1e-12);
        let w = 0.5;
        let period = 2.0 * std::f64::consts::PI / w;
        let horizon = 50.0 * period;
        let n = (horizon / 0.01).round() as usize + 1;
        let traj = Trajectory::from_states(0.0, horizon / (n - 1) as f64, 1, (0..n).map(|k| (w * k as f64 * horizon / (n - 1) as f64).sin()).collect()).unwrap();
        let b = steady_state_bias(&traj, &[0.0], 0.2).unwrap();
        assert!((b - 2.0 / std::f64::consts::PI).abs() < 1e-3, "{b}");
        let traj = series(0.1, 100, 1, |_| vec![1.0]);
        assert_eq!(steady_state_bias(&traj, &[1.0], 0.2).unwrap(), 0.0);
        assert!(steady_state_bias(&traj, &[1.0], 1.0).is_err());
        assert!(matches!(steady_state_bias(&series(0.1, 1, 1, |_| vec![1.0]), &[1.0], 0.2), Err(QsaError::WindowEmpty { .. })));
    }

    #[test]
    fn covariance_examples() {
        let (c, s) = empirical_covariance(&vec![vec![1.0, 2.0]; 5]).unwrap();
        assert!(c.amax() < 1e-15 && s < 1e-7);
        let (c, s) = empirical_covariance(&[vec![0.0], vec![2.0]]).unwrap();
        assert_relative_eq!(c[(0, 0)], 1.0);
        assert_relative_eq!(s, 1.0);
        assert_eq!(empirical_covariance(&[vec![1.0]]).unwrap_err(), QsaError::TooFewSamples { needed: 2, got: 1 });
    }

    proptest! {
        #[test]
        fn covariance_matches_two_pass(pts in prop::collection::vec(prop::array::uniform2(-5.0..5.0f64), 2..60)) {
            let finals: Vec<Vec<f64>> = pts.iter().map(|p| p.to_vec()).collect();
            let (c, s) = empirical_covariance(&finals).unwrap();
            let m = finals.len() as f64;
            let mean = [finals.iter().map(|p| p[0]).sum::<f64>() / m, finals.iter().map(|p| p[1]).sum::<f64>() / m];
            for i in 0..2 {
                for j in 0..2 {
                    let two_pass = finals.iter().map(|p| (p[i] - mean[i]) * (p[j] - mean[j])).sum::<f64>() / m;
                    prop_assert!((c[(i, j)] - two_pass).abs() < 1e-10);
                }
            }
            let eig = c.clone().symmetric_eigen().eigenvalues;
            prop_assert!(eig.iter().all(|&e| e >= -1e-10));
            prop_assert!((s * s - c.trace().max(0.0)).abs() < 1e-10);
        }

        #[test]
        fn slope_fit_noisy(k in 0.1..10.0f64, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(f64, f64)> = (0..12)
                .map(|i| {
                    let a = 1e-3 * 10f64.powf(i as f64 / 4.0);
                    (a, k * a.powf(1.5) * (1.0 + 0.05 * (rng.random::<f64>() - 0.5)))
                })
                .collect();
            let fit = slope_fit(&pts).unwrap();
            prop_assert!((fit.slope - 1.5).abs() < 0.1);
        }
    }

    #[test]
    fn slope_fit_examples() {
        let alphas = [1e-3, 3e-3, 1e-2, 3e-2, 0.1];
        let fit = slope_fit(&alphas.iter().map(|&a| (a, 3.0 * a)).collect::<Vec<_>>()).unwrap();
        assert_relative_eq!(fit.slope, 1.0, epsilon = 1e-12);
        assert_relative_eq!(fit.r2, 1.0, epsilon = 1e-12);
        let fit = slope_fit(&alphas.iter().map(|&a| (a, 0.2 * a * a)).collect::<Vec<_>>()).unwrap();
        assert_relative_eq!(fit.slope, 2.0, epsilon = 1e-12);
        assert!(matches!(slope_fit(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0), (4.0, 1.0)]), Err(QsaError::NonPositive { .. })));
        assert!(matches!(slope_fit(&[(1.0, 1.0); 3]), Err(QsaError::TooFewSamples { .. })));
        assert!(matches!(slope_fit(&[(1.0, 1.0); 4]), Err(QsaError::DegenerateFit { .. })));
    }

    #[test]
    fn mean_target_bias_frozen() {
        let fbar = VectorField::new(1, |th| vec![1.0 - th[0]]);
        let traj = series(0.1, 100, 1, |_| vec![1.0]);
        let (full, half) = mean_target_bias(&traj, &fbar).unwrap();
        assert_eq!(full, vec![0.0]);
        assert_eq!(half, vec![0.0]);
    }

    #[test]
    fn lyapunov_constant_decay() {
        let traj = {
            let mut t = series(0.1, 1001, 1, |_| vec![0.0]);
            t.add_channel(ChannelKind::LogSensitivityNorm, 1, (0..1001).map(|k| -0.1 * k as f64 * 0.1).collect()).unwrap();
            t
        };
        assert_relative_eq!(lyapunov_exponent(&traj).unwrap(), -0.1, epsilon = 1e-12);
        assert!(matches!(lyapunov_exponent(&series(0.1, 10, 1, |_| vec![0.0])), Err(QsaError::DegenerateFit { .. })));
    }

    #[test]
    fn pmf_residual_frozen_state() {
        // alpha = 0: the state is frozen and only the Poisson identity remains
        let c = linear_example_closed_forms(LinearVariant::B, 0.1).unwrap();
        let traj = series(0.1, 2001, 1, |_| vec![0.4]);
        let r1 = pmf_residual(&traj, &c, 0.0).unwrap().sup();
        let traj = series(0.05, 4001, 1, |_| vec![0.4]);
        let r2 = pmf_residual(&traj, &c, 0.0).unwrap().sup();
        assert!(r1 < 0.1 * 0.1 && r2 < r1 / 3.0, "{r1} {r2}");
    }

    #[test]
    fn pmf_residual_quadratic_qsgd2() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let opt = [0.5, -0.5];
        let q = crate::objectives::quadratic(p.clone(), opt.to_vec()).unwrap();
        let probe = ProbeSpec::standard_2d(2.0, 0.3);
        let field = FieldSpec::qsgd2(q, crate::dynamics::ProbingGainPolicy::constant(0.3)).unwrap();
        let alpha = 0.05;
        let sup = |dt: f64| {
            let traj = integrate_qsa(&field, &GainSchedule::constant(alpha), Some(&probe), &[2.0, 1.0], None, dt, 200.0, BoxProjection::disabled(), Channels::default()).unwrap();
            let cf = QuadraticQsgd2ClosedForm::new(p.clone(), &opt, &probe, &ClockState::zeros(2)).unwrap();
            pmf_residual(&traj, &cf, alpha).unwrap().sup()
        };
        let (a, b) = (sup(0.1), sup(0.05));
        assert!((1.7..=2.3).contains(&(a / b)), "{a} {b}");
        let cf = QuadraticQsgd2ClosedForm::new(p, &opt, &probe, &ClockState::zeros(2)).unwrap();
        let direct = QuadraticQsgd2ClosedForm::sigma_from_spec(&probe);
        assert!((cf.sigma - direct).amax() < 1e-12);
    }

    fn sticky(p: f64) -> Vec<Vec<f64>> {
        vec![vec![p, 1.0 - p], vec![1.0 - p, p]]
    }

    #[test]
    fn markov_chain_validation() {
        let bad = MarkovChainSpec::additive(vec![vec![1.0, 0.0], vec![0.5, 0.5]], vec![-1.0, 1.0]);
        assert_eq!(bad.validate().unwrap_err(), QsaError::Reducible);
        let bad = MarkovChainSpec::additive(vec![vec![0.9, 0.2], vec![0.1, 0.9]], vec![-1.0, 1.0]);
        assert!(bad.validate().is_err());
        let ok = MarkovChainSpec::additive(sticky(0.9), vec![-1.0, 1.0]);
        let pi = ok.stationary().unwrap();
        assert_relative_eq!(pi[0], 0.5, epsilon = 1e-14);
        let h = ok.poisson(&[-1.0, 1.0]).unwrap();
        assert!(pi.dot(&h).abs() < 1e-14);
        // (I - P) h = g - mean
        let p = ok.matrix();
        let resid = (DMatrix::identity(2, 2) - p) * &h - DVector::from_column_slice(&[-1.0, 1.0]);
        assert!(resid.amax() < 1e-12);
    }

    #[test]
    fn additive_chain_has_no_bias() {
        let spec = MarkovChainSpec::additive(sticky(0.9), vec![-1.0, 1.0]);
        let (a, g) = spec.mean_coefficients().unwrap();
        assert!((-a * spec.stationary_mean_theta(0.1).unwrap() + g).abs() < 1e-14);
        let r = markov_sa_bias(&spec, 0.1, 200_000, 1).unwrap();
        assert!(r.identity_gap() <= 3.0 * r.se_identity + 1e-12, "{r:?}");
        assert!(r.closure.abs() < 1e-3);
    }

    #[test]
    fn multiplicative_chain_identity() {
        let spec = MarkovChainSpec {
            transition: sticky(0.9),
            g: vec![0.0, 0.2],
            a: vec![0.01, 0.19],
        };
        let r = markov_sa_bias(&spec, 0.1, 2_000_000, 5).unwrap();
        assert!(r.identity_gap() <= 3.0 * r.se_identity, "{r:?}");
        assert!((r.mean_fbar - r.oracle_fbar).abs() <= 4.0 * r.se_fbar, "{r:?}");
        assert!((r.mean_fbar - r.neg_mean_xi).abs() < 1e-3);
    }

    #[test]
    fn ode_at_infinity_examples() {
        let affine = VectorField::new(2, |th| th.iter().map(|x| 1.0 - x).collect());
        let res = ode_at_infinity_stability(&affine, &[1e2, 1e4], 5.0, 1e-3, &[1.0, 1.0]).unwrap();
        for (r, n) in res {
            assert!((n - (-5.0f64).exp()).abs() < 2e-3 + 2.0 / r);
        }
        let unstable = VectorField::new(2, |th| th.to_vec());
        let res = ode_at_infinity_stability(&unstable, &[1e2, 1e6], 5.0, 1e-3, &[1.0, 0.0]).unwrap();
        assert!(res.iter().all(|(_, n)| *n > 100.0));
        assert!(ode_at_infinity_stability(&affine, &[1e4, 1e2], 5.0, 1e-3, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn bias_report_csv() {
        let report = BiasReport {
            records: vec![BiasRecord { alpha: 0.1, bias_raw: 1.0, bias_f1: 0.5, bias_f2: 0.25, bias_pr: 0.125 }],
            window: 0.2,
            metadata: BTreeMap::new(),
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("alpha,bias_raw,bias_f1,bias_f2,bias_pr\n"));
        assert_eq!(s.lines().count(), 2);
    }

    #[test]
    fn batch_means() {
        let v: Vec<f64> = (0..2000).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(batch_means_se(&v, 20).unwrap() < 1e-12);
        assert!(batch_means_se(&v[..5], 20).is_err());
    }
}
