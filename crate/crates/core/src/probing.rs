//! Probing signals, the clock process and closed-form Poisson solutions.
//!
//! All frequencies are angular (rad/s) internally and every sinusoid is stored
//! in cosine form `amplitude * cos(omega * t + phase)`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_positive, QsaError, Result};

/// Depth of the rational-independence screen.
pub const SCREEN_DEPTH: i64 = 6;
/// Tolerance below which an integer combination of frequencies counts as zero.
pub const SCREEN_TOL: f64 = 1e-9;

const MERGE_TOL: f64 = 1e-12;

/// Where a basis frequency came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    LogRatio { a: u64, b: u64 },
    Periodic { multiplier: u64 },
    Raw,
}

/// A set of base frequencies driving the clock process.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyBasis {
    omegas: Vec<f64>,
    provenance: Vec<Provenance>,
}

impl FrequencyBasis {
    /// `omega_i = ln(a_i / b_i)` for integer pairs with `a_i > b_i >= 1`.
    pub fn log_ratio(pairs: &[(u64, u64)]) -> Result<Self> {
        for (i, &(a, b)) in pairs.iter().enumerate() {
            if b < 1 || a <= b {
                return Err(QsaError::NonPositive {
                    what: "log-ratio frequency ln(a/b)",
                    value: (a as f64 / b.max(1) as f64).ln(),
                });
            }
            for &(c, d) in &pairs[..i] {
                if (a as u128) * (d as u128) == (c as u128) * (b as u128) {
                    return Err(QsaError::DuplicateRatio {
                        numerator: a as f64,
                        denominator: b as f64,
                    });
                }
            }
        }
        let omegas: Vec<f64> = pairs.iter().map(|&(a, b)| (a as f64 / b as f64).ln()).collect();
        independence_screen(&omegas, SCREEN_DEPTH, SCREEN_TOL)?;
        Ok(Self {
            omegas,
            provenance: pairs.iter().map(|&(a, b)| Provenance::LogRatio { a, b }).collect(),
        })
    }

    /// `{omega1, n_1 omega1, n_2 omega1, ...}`. Harmonic bases are periodic, so no screen applies.
    pub fn periodic(omega1: f64, multipliers: &[u64]) -> Result<Self> {
        check_positive("omega1", omega1)?;
        let mut prev = 1u64;
        for &n in multipliers {
            if n <= prev {
                return Err(QsaError::NonIncreasingMultipliers);
            }
            prev = n;
        }
        let mut omegas = vec![omega1];
        let mut provenance = vec![Provenance::Periodic { multiplier: 1 }];
        for &n in multipliers {
            omegas.push(n as f64 * omega1);
            provenance.push(Provenance::Periodic { multiplier: n });
        }
        Ok(Self { omegas, provenance })
    }

    /// Arbitrary positive, distinct frequencies that pass the independence screen.
    pub fn raw(omegas: &[f64]) -> Result<Self> {
        for &w in omegas {
            check_positive("frequency", w)?;
        }
        independence_screen(omegas, SCREEN_DEPTH, SCREEN_TOL)?;
        Ok(Self {
            omegas: omegas.to_vec(),
            provenance: vec![Provenance::Raw; omegas.len()],
        })
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }

    pub fn max_omega(&self) -> f64 {
        self.omegas.iter().cloned().fold(0.0, f64::max)
    }

    pub fn min_omega(&self) -> f64 {
        self.omegas.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    fn index_of(&self, omega: f64) -> Option<usize> {
        self.omegas
            .iter()
            .position(|&w| (w - omega).abs() <= MERGE_TOL * w.max(1.0))
    }
}

pub fn make_log_frequencies(pairs: &[(u64, u64)]) -> Result<FrequencyBasis> {
    FrequencyBasis::log_ratio(pairs)
}

pub fn make_periodic_frequencies(omega1: f64, multipliers: &[u64]) -> Result<FrequencyBasis> {
    FrequencyBasis::periodic(omega1, multipliers)
}

/// Searches all integer vectors with `0 < max|n_i| <= depth` for a vanishing combination.
pub fn independence_screen(omegas: &[f64], depth: i64, tol: f64) -> Result<()> {
    let k = omegas.len();
    if k == 0 {
        return Ok(());
    }
    let mut n = vec![-depth; k];
    // Only vectors whose first nonzero entry is positive; the rest are negations.
    loop {
        let first = n.iter().find(|&&x| x != 0);
        if let Some(&f) = first {
            if f > 0 {
                let s: f64 = n.iter().zip(omegas).map(|(&ni, &w)| ni as f64 * w).sum();
                if s.abs() <= tol {
                    return Err(QsaError::DependentFrequencies { combination: n.clone() });
                }
            }
        }
        let mut i = 0;
        loop {
            if i == k {
                return Ok(());
            }
            if n[i] < depth {
                n[i] += 1;
                break;
            }
            n[i] = -depth;
            i += 1;
        }
    }
}

/// Clock phases in cycles, each a residue in `[0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClockState {
    phases: Vec<f64>,
}

fn wrap_unit(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

impl ClockState {
    pub fn zeros(k: usize) -> Self {
        Self { phases: vec![0.0; k] }
    }

    pub fn from_phases(phases: &[f64]) -> Self {
        Self { phases: phases.iter().map(|&p| wrap_unit(p)).collect() }
    }

    /// Clock at absolute time `t` starting from `initial`, computed by phase arithmetic.
    pub fn at_time(basis: &FrequencyBasis, initial: &ClockState, t: f64) -> Self {
        let phases = initial
            .phases
            .iter()
            .zip(basis.omegas())
            .map(|(&p, &w)| {
                let cycles = w / TAU * t;
                wrap_unit(p + (cycles - cycles.floor()))
            })
            .collect();
        Self { phases }
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    /// Unit phasor `exp(2 pi j phase_i)` as `(re, im)`.
    pub fn phasor(&self, i: usize) -> (f64, f64) {
        let a = TAU * self.phases[i];
        (a.cos(), a.sin())
    }

    pub fn advance(&mut self, basis: &FrequencyBasis, dt: f64) {
        for (p, &w) in self.phases.iter_mut().zip(basis.omegas()) {
            *p = wrap_unit(*p + w * dt / TAU);
        }
    }
}

pub fn advance_clock(state: &ClockState, basis: &FrequencyBasis, dt: f64) -> ClockState {
    let mut s = state.clone();
    s.advance(basis, dt);
    s
}

/// `amplitude * cos(omega * t + phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

impl TrigTerm {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude * (self.omega * t + self.phase).cos()
    }
}

/// Finite sum of sinusoids in canonical form: one term per distinct frequency,
/// non-negative amplitudes for `omega > 0`, a single signed constant for `omega = 0`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrigPolynomial {
    terms: Vec<TrigTerm>,
}

impl TrigPolynomial {
    pub fn new(terms: Vec<TrigTerm>) -> Self {
        let mut p = Self { terms };
        p.canonicalize();
        p
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self::new(vec![TrigTerm { amplitude: c, omega: 0.0, phase: 0.0 }])
    }

    pub fn cos(amplitude: f64, omega: f64, phase: f64) -> Self {
        Self::new(vec![TrigTerm { amplitude, omega, phase }])
    }

    pub fn sin(amplitude: f64, omega: f64, phase: f64) -> Self {
        Self::cos(amplitude, omega, phase - FRAC_PI_2)
    }

    pub fn terms(&self) -> &[TrigTerm] {
        &self.terms
    }

    fn canonicalize(&mut self) {
        let scale = self.terms.iter().map(|t| t.amplitude.abs()).fold(0.0, f64::max);
        let mut phasors: Vec<(f64, f64, f64)> = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let (mut w, mut ph) = (t.omega, t.phase);
            if w < 0.0 {
                w = -w;
                ph = -ph;
            }
            let (re, im) = if w == 0.0 {
                (t.amplitude * ph.cos(), 0.0)
            } else {
                (t.amplitude * ph.cos(), t.amplitude * ph.sin())
            };
            phasors.push((w, re, im));
        }
        phasors.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64, f64)> = Vec::new();
        for (w, re, im) in phasors {
            match merged.last_mut() {
                Some(last) if (last.0 - w).abs() <= MERGE_TOL * w.max(1.0) => {
                    last.1 += re;
                    last.2 += im;
                }
                _ => merged.push((w, re, im)),
            }
        }
        self.terms = merged
            .into_iter()
            .filter_map(|(w, re, im)| {
                let amp = re.hypot(im);
                if amp == 0.0 || amp <= 1e-15 * scale {
                    return None;
                }
                if w == 0.0 {
                    Some(TrigTerm { amplitude: re, omega: 0.0, phase: 0.0 })
                } else {
                    Some(TrigTerm { amplitude: amp, omega: w, phase: im.atan2(re) })
                }
            })
            .collect();
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.terms.iter().map(|term| term.eval(t)).sum()
    }

    /// Time average: the zero-frequency part.
    pub fn mean(&self) -> f64 {
        self.terms.iter().filter(|t| t.omega == 0.0).map(|t| t.amplitude).sum()
    }

    /// Upper bound on the sup norm.
    pub fn sup_bound(&self) -> f64 {
        self.terms.iter().map(|t| t.amplitude.abs()).sum()
    }

    pub fn max_omega(&self) -> f64 {
        self.terms.iter().map(|t| t.omega).fold(0.0, f64::max)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::new(
            self.terms
                .iter()
                .map(|t| TrigTerm { amplitude: c * t.amplitude, ..*t })
                .collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        Self::new(terms)
    }

    /// Product via `cos A cos B = (cos(A - B) + cos(A + B)) / 2`.
    pub fn mul(&self, other: &Self) -> Self {
        let mut terms = Vec::with_capacity(2 * self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                let c = 0.5 * a.amplitude * b.amplitude;
                terms.push(TrigTerm { amplitude: c, omega: a.omega - b.omega, phase: a.phase - b.phase });
                terms.push(TrigTerm { amplitude: c, omega: a.omega + b.omega, phase: a.phase + b.phase });
            }
        }
        Self::new(terms)
    }

    pub fn derivative(&self) -> Self {
        Self::new(
            self.terms
                .iter()
                .filter(|t| t.omega != 0.0)
                .map(|t| TrigTerm {
                    amplitude: t.amplitude * t.omega,
                    omega: t.omega,
                    phase: t.phase + FRAC_PI_2,
                })
                .collect(),
        )
    }

    /// Mean and zero-mean solution of `d/dt h_hat = -(h - mean)`.
    pub fn poisson_solve(&self) -> (f64, TrigPolynomial) {
        let solution = self
            .terms
            .iter()
            .filter(|t| t.omega != 0.0)
            // -(c / w) sin(x) = (c / w) cos(x + pi / 2)
            .map(|t| TrigTerm {
                amplitude: t.amplitude / t.omega,
                omega: t.omega,
                phase: t.phase + FRAC_PI_2,
            })
            .collect();
        (self.mean(), Self::new(solution))
    }
}

pub fn poisson_solve(forcing: &TrigPolynomial) -> (f64, TrigPolynomial) {
    forcing.poisson_solve()
}

/// How user-supplied `(amplitude, omega, phase)` triples are read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// `amplitude * cos(2 pi [omega t + phase])`, omega in cycles/s and phase in cycles.
    TwoPiCycles,
    /// `amplitude * sin(omega t + phase)`, omega in rad/s and phase in radians.
    RawRadian,
}

impl Convention {
    /// Canonical `(omega rad/s, phase rad)` in cosine form.
    pub fn to_canonical(self, omega: f64, phase: f64) -> (f64, f64) {
        match self {
            Convention::TwoPiCycles => (TAU * omega, TAU * phase),
            Convention::RawRadian => (omega, phase - FRAC_PI_2),
        }
    }

    pub fn from_canonical(self, omega: f64, phase: f64) -> (f64, f64) {
        match self {
            Convention::TwoPiCycles => (omega / TAU, phase / TAU),
            Convention::RawRadian => (omega, phase + FRAC_PI_2),
        }
    }
}

/// Serialized probe term: contributes to coordinate `dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTermConfig {
    pub dim: usize,
    pub amplitude: f64,
    pub omega: f64,
    #[serde(default)]
    pub phase: f64,
    pub convention: Convention,
}

/// `amplitude * cos(2 pi sum_k n_k phase_k + phase)` on the clock, i.e.
/// frequency `sum_k n_k omega_k` in the time domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTerm {
    pub amplitude: f64,
    pub harmonics: Vec<i64>,
    pub phase: f64,
}

/// Vector probing signal over a shared basis.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSpec {
    basis: FrequencyBasis,
    coords: Vec<Vec<ProbeTerm>>,
}

impl ProbeSpec {
    pub fn new(basis: FrequencyBasis, coords: Vec<Vec<ProbeTerm>>) -> Result<Self> {
        for c in &coords {
            for term in c {
                crate::error::check_dim(basis.len(), term.harmonics.len())?;
            }
        }
        Ok(Self { basis, coords })
    }

    /// One pure sinusoid per basis frequency: coordinate `i` uses `omega_i`.
    pub fn sinusoids(basis: FrequencyBasis, amplitudes: &[f64], phases: &[f64], convention: Convention) -> Result<Self> {
        crate::error::check_dim(basis.len(), amplitudes.len())?;
        crate::error::check_dim(basis.len(), phases.len())?;
        let k = basis.len();
        let coords = (0..k)
            .map(|i| {
                let phase = match convention {
                    Convention::TwoPiCycles => TAU * phases[i],
                    Convention::RawRadian => phases[i] - FRAC_PI_2,
                };
                let mut harmonics = vec![0; k];
                harmonics[i] = 1;
                vec![ProbeTerm { amplitude: amplitudes[i], harmonics, phase }]
            })
            .collect();
        Self::new(basis, coords)
    }

    /// Builds a probe from serialized terms. Without an explicit basis, the
    /// distinct frequencies themselves form a raw basis.
    pub fn from_terms(terms: &[ProbeTermConfig], basis: Option<FrequencyBasis>) -> Result<Self> {
        if terms.is_empty() {
            return Err(QsaError::InvalidParameter("probe has no terms".into()));
        }
        let canon: Vec<(usize, f64, f64, f64)> = terms
            .iter()
            .map(|t| {
                let (w, p) = t.convention.to_canonical(t.omega, t.phase);
                (t.dim, t.amplitude, w, p)
            })
            .collect();
        let basis = match basis {
            Some(b) => b,
            None => {
                let mut distinct: Vec<f64> = Vec::new();
                for &(_, _, w, _) in &canon {
                    if !distinct.iter().any(|&d| (d - w).abs() <= MERGE_TOL * w.max(1.0)) {
                        distinct.push(w);
                    }
                }
                FrequencyBasis::raw(&distinct)?
            }
        };
        let m = canon.iter().map(|c| c.0).max().unwrap_or(0) + 1;
        let mut coords = vec![Vec::new(); m];
        for (dim, amp, w, p) in canon {
            let idx = basis.index_of(w).ok_or_else(|| {
                QsaError::InvalidParameter(format!("probe frequency {w} is not in the basis"))
            })?;
            let mut harmonics = vec![0; basis.len()];
            harmonics[idx] = 1;
            coords[dim].push(ProbeTerm { amplitude: amp, harmonics, phase: p });
        }
        Self::new(basis, coords)
    }

    /// Serializes pure-harmonic terms; combination terms are written with their time-domain frequency.
    pub fn to_terms(&self, convention: Convention) -> Vec<ProbeTermConfig> {
        let mut out = Vec::new();
        for (dim, c) in self.coords.iter().enumerate() {
            for term in c {
                let (omega, phase) = convention.from_canonical(self.term_omega(term), term.phase);
                out.push(ProbeTermConfig { dim, amplitude: term.amplitude, omega, phase, convention });
            }
        }
        out
    }

    /// `psi = V psi0`: each output coordinate mixes the input coordinates.
    pub fn mixed(&self, v: &DMatrix<f64>) -> Result<Self> {
        crate::error::check_dim(self.dim(), v.ncols())?;
        let coords = (0..v.nrows())
            .map(|i| {
                let mut terms = Vec::new();
                for j in 0..v.ncols() {
                    let vij = v[(i, j)];
                    if vij == 0.0 {
                        continue;
                    }
                    for term in &self.coords[j] {
                        terms.push(ProbeTerm { amplitude: vij * term.amplitude, ..term.clone() });
                    }
                }
                terms
            })
            .collect();
        Self::new(self.basis.clone(), coords)
    }

    /// `2 [sin(t/4 + phi), sin(t/e^2 + phi)]`.
    pub fn standard_2d(amplitude: f64, phase: f64) -> Self {
        let basis = FrequencyBasis::raw(&[0.25, (-2.0f64).exp()]).expect("independent");
        Self::sinusoids(basis, &[amplitude, amplitude], &[phase, phase], Convention::RawRadian).expect("dims")
    }

    pub fn basis(&self) -> &FrequencyBasis {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coordinate_terms(&self, i: usize) -> &[ProbeTerm] {
        &self.coords[i]
    }

    fn term_omega(&self, term: &ProbeTerm) -> f64 {
        term.harmonics.iter().zip(self.basis.omegas()).map(|(&n, &w)| n as f64 * w).sum()
    }

    /// Largest time-domain frequency present.
    pub fn max_omega(&self) -> f64 {
        self.coords
            .iter()
            .flatten()
            .map(|t| self.term_omega(t).abs())
            .fold(0.0, f64::max)
    }

    pub fn value_into(&self, clock: &ClockState, out: &mut [f64]) {
        let phases = clock.phases();
        for (o, c) in out.iter_mut().zip(&self.coords) {
            *o = c
                .iter()
                .map(|term| {
                    let cycles: f64 = term.harmonics.iter().zip(phases).map(|(&n, &p)| n as f64 * p).sum();
                    term.amplitude * (TAU * (cycles - cycles.floor()) + term.phase).cos()
                })
                .sum();
        }
    }

    pub fn value(&self, clock: &ClockState) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.value_into(clock, &mut out);
        out
    }

    /// Value at absolute time `t` with the clock started at zero phase.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let clock = ClockState::at_time(&self.basis, &ClockState::zeros(self.basis.len()), t);
        self.value(&clock)
    }

    /// Coordinate `i` as a time-domain trig polynomial (clock at zero phase at t = 0).
    pub fn coordinate_polynomial(&self, i: usize) -> TrigPolynomial {
        TrigPolynomial::new(
            self.coords[i]
                .iter()
                .map(|t| TrigTerm { amplitude: t.amplitude, omega: self.term_omega(t), phase: t.phase })
                .collect(),
        )
    }

    /// Time-domain polynomials with the clock started at `initial`.
    pub fn polynomials_from(&self, initial: &ClockState) -> Vec<TrigPolynomial> {
        (0..self.dim())
            .map(|i| {
                TrigPolynomial::new(
                    self.coords[i]
                        .iter()
                        .map(|t| {
                            let offset: f64 =
                                t.harmonics.iter().zip(initial.phases()).map(|(&n, &p)| n as f64 * p).sum();
                            TrigTerm { amplitude: t.amplitude, omega: self.term_omega(t), phase: t.phase + TAU * offset }
                        })
                        .collect(),
                )
            })
            .collect()
    }

    pub fn polynomials(&self) -> Vec<TrigPolynomial> {
        self.polynomials_from(&ClockState::zeros(self.basis.len()))
    }
}

pub fn probe_value(spec: &ProbeSpec, clock: &ClockState) -> Vec<f64> {
    spec.value(clock)
}

/// Poisson solutions associated with a probe.
#[derive(Clone, Debug)]
pub struct ProbePoisson {
    /// Solves the Poisson equation with forcing `psi`.
    pub psi_hat: ProbeSpec,
    /// Steady-state mean of `psi`.
    pub psi_mean: Vec<f64>,
    /// `E[psi psi^T]`.
    pub sigma: DMatrix<f64>,
    /// Solves the Poisson equation with forcing `psi psi^T - sigma`, time domain.
    pub sigma_hat: Vec<Vec<TrigPolynomial>>,
}

/// First- and second-order Poisson solutions, with products expanded
/// symbolically so shared frequencies across coordinates are handled exactly.
pub fn probe_poisson(spec: &ProbeSpec) -> ProbePoisson {
    let m = spec.dim();
    let mut psi_mean = vec![0.0; m];
    let coords = (0..m)
        .map(|i| {
            let mut terms = Vec::new();
            for t in spec.coordinate_terms(i) {
                let w = spec.term_omega(t);
                if w == 0.0 {
                    psi_mean[i] += t.amplitude * t.phase.cos();
                    continue;
                }
                let (amplitude, sign) = (t.amplitude / w.abs(), w.signum());
                // cos(wt + p) integrates to sin(wt + p)/w, so -sin/w = cos(. + pi/2)/w.
                let phase = t.phase + FRAC_PI_2;
                if sign > 0.0 {
                    terms.push(ProbeTerm { amplitude, harmonics: t.harmonics.clone(), phase });
                } else {
                    terms.push(ProbeTerm { amplitude: -amplitude, harmonics: t.harmonics.clone(), phase });
                }
            }
            terms
        })
        .collect();
    let psi_hat = ProbeSpec { basis: spec.basis.clone(), coords };
    let polys = spec.polynomials();
    let mut sigma = DMatrix::zeros(m, m);
    let mut sigma_hat = vec![vec![TrigPolynomial::zero(); m]; m];
    for i in 0..m {
        for j in i..m {
            let (mean, sol) = polys[i].mul(&polys[j]).poisson_solve();
            sigma[(i, j)] = mean;
            sigma[(j, i)] = mean;
            sigma_hat[j][i] = sol.clone();
            sigma_hat[i][j] = sol;
        }
    }
    ProbePoisson { psi_hat, psi_mean, sigma, sigma_hat }
}

/// Random phase offset in `[-pi/2, pi/2]` scaled from a unit sample.
pub fn phase_from_unit(u: f64) -> f64 {
    PI * (u - 0.5)
}
