//! The nine experiment families. Each parameter block has desk-scale defaults, a `run`
//! that returns typed results, and a `report` that writes CSVs and derives checks.

use std::collections::BTreeMap;
use std::f64::consts::{E, PI};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{seed_fanout, Check, Outcome, RunContext, Table};
use crate::analysis::{
    empirical_covariance, markov_sa_bias, ode_at_infinity_stability, pmf_residual, slope_fit, BiasRecord, BiasReport,
    MarkovChainSpec, MarkovSaRecord, SlopeFit,
};
use crate::dynamics::{
    linear_example_closed_forms, FieldSpec, GeneralLinear, LinearVariant, ProbingGainPolicy, Spsa, SpsaSpec,
    SpsaVariant, VectorField,
};
use crate::error::{QsaError, Result};
use crate::filters::{Filter, FilterSpec, PrAverager, WindowIntegral};
use crate::integrator::{
    integrate_qsa, integrate_sensitivity, simulate, solidarity_gap, BoxProjection, Channels, ClockedProbe, GainSchedule,
    IntegrationSettings, NoProbe,
};
use crate::objectives::{camel3, camel3_local_minima, rastrigin, MovingTarget, Objective, TimeVaryingObjective};
use crate::probing::{phase_from_unit, ClockState, Convention, FrequencyBasis, ProbeSpec};

fn invalid(field: &str, why: impl std::fmt::Display) -> QsaError {
    QsaError::ConfigInvalid(format!("{field}: {why}"))
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive, got {v}")))
    }
}

fn all_positive(field: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(invalid(field, "must be non-empty"));
    }
    v.iter().try_for_each(|&x| positive(field, x))
}

fn check_fraction(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must lie in (0, 1), got {v}")))
    }
}

/// Horizon rounded up to a whole number of steps.
fn grid_horizon(horizon: f64, dt: f64) -> f64 {
    (horizon / dt).ceil().max(1.0) * dt
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn variant_tag(v: LinearVariant) -> &'static str {
    match v {
        LinearVariant::A => "A",
        LinearVariant::B => "B",
    }
}

impl super::Experiment {
    pub fn validate(&self) -> Result<()> {
        match self {
            super::Experiment::LinearBiasSweep(p) => p.validate(),
            super::Experiment::RastriginQsgd(p) => p.validate(),
            super::Experiment::RastriginVanishingVsFixed(p) => p.validate(),
            super::Experiment::CamelTracking(p) => p.validate(),
            super::Experiment::LyapunovSweep(p) => p.validate(),
            super::Experiment::MarkovSaBias(p) => p.validate(),
            super::Experiment::PmfVerify(p) => p.validate(),
            super::Experiment::Solidarity(p) => p.validate(),
            super::Experiment::OdeAtInfinity(p) => p.validate(),
        }
    }
}

// ---------------------------------------------------------------------------
// linear-bias-sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearBiasSweep {
    pub variants: Vec<LinearVariant>,
    pub omega: f64,
    pub dt: f64,
    pub alphas: Vec<f64>,
    /// Each run lasts `alpha_horizon / alpha` seconds.
    pub alpha_horizon: f64,
    pub theta0: f64,
    pub zeta: f64,
    /// Filter bandwidth is `gamma_factor * alpha`.
    pub gamma_factor: f64,
    pub kappa: f64,
    pub window: f64,
    /// Slopes are fitted over alphas up to this value.
    pub fit_max_alpha: f64,
    pub mean_target_alpha: f64,
    /// Horizons at which the running mean of `fbar(Theta)` is reported; empty skips it.
    pub mean_target_horizons: Vec<f64>,
}

impl Default for LinearBiasSweep {
    fn default() -> Self {
        Self {
            variants: vec![LinearVariant::A, LinearVariant::B],
            omega: 0.1,
            dt: 0.1,
            alphas: vec![1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 0.6, 0.9],
            alpha_horizon: 500.0,
            theta0: 0.0,
            zeta: 0.8,
            gamma_factor: 1.0,
            kappa: 5.0,
            window: 0.2,
            fit_max_alpha: 0.1,
            mean_target_alpha: 0.01,
            mean_target_horizons: vec![1e4, 1e5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanTargetPoint {
    pub horizon: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearVariantResult {
    pub variant: LinearVariant,
    pub report: BiasReport,
    pub slopes: BTreeMap<String, SlopeFit>,
    pub upsilon_bar: f64,
    pub y_star: f64,
    pub mean_target: Vec<MeanTargetPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBiasSweepResult {
    pub params: LinearBiasSweep,
    pub variants: Vec<LinearVariantResult>,
}

impl LinearBiasSweep {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(invalid("variants", "must be non-empty"));
        }
        all_positive("alphas", &self.alphas)?;
        positive("omega", self.omega)?;
        positive("dt", self.dt)?;
        positive("alpha_horizon", self.alpha_horizon)?;
        positive("zeta", self.zeta)?;
        positive("gamma_factor", self.gamma_factor)?;
        check_fraction("window", self.window)?;
        if !(self.kappa > 1.0) {
            return Err(invalid("kappa", "must exceed 1"));
        }
        positive("mean_target_alpha", self.mean_target_alpha)?;
        self.mean_target_horizons.iter().try_for_each(|&h| positive("mean_target_horizons", h))
    }

    /// One `(variant, alpha)` cell: windowed errors of the raw, filtered and PR estimates.
    pub fn cell(&self, variant: LinearVariant, alpha: f64) -> Result<BiasRecord> {
        let closed = linear_example_closed_forms(variant, self.omega)?;
        let star = closed.theta_star;
        let field = FieldSpec::linear_example(variant, self.omega)?;
        let dt = self.dt;
        let horizon = grid_horizon(self.alpha_horizon / alpha, dt);
        let settings = IntegrationSettings::new(dt, horizon);
        let start = horizon * (1.0 - self.window);
        let gamma = self.gamma_factor * alpha;
        let mut f1 = Filter::new(FilterSpec::first_order(gamma), 1)?;
        let mut f2 = Filter::new(FilterSpec::second_order(gamma, self.zeta), 1)?;
        let mut w = WindowIntegral::new(start, horizon, 3);
        let mut pr = PrAverager::new(self.kappa, 0.0, horizon, 1)?;
        simulate(&field, &GainSchedule::constant(alpha), &mut NoProbe, &[self.theta0], &settings, |s| {
            let y1 = f1.step(s.theta, dt)?[0];
            let y2 = f2.step(s.theta, dt)?[0];
            w.push(s.t, &[(s.theta[0] - star).abs(), (y1 - star).abs(), (y2 - star).abs()]);
            pr.push(s.t, s.theta);
            Ok(())
        })?;
        let m = w.mean()?;
        let pr_est = pr.average()?[0];
        Ok(BiasRecord { alpha, bias_raw: m[0], bias_f1: m[1], bias_f2: m[2], bias_pr: (pr_est - star).abs() })
    }

    /// Running `(1/T) int_0^T fbar(Theta_t) dt` at each configured horizon.
    pub fn mean_target(&self, variant: LinearVariant) -> Result<Vec<MeanTargetPoint>> {
        if self.mean_target_horizons.is_empty() {
            return Ok(Vec::new());
        }
        let closed = linear_example_closed_forms(variant, self.omega)?;
        let field = FieldSpec::linear_example(variant, self.omega)?;
        let dt = self.dt;
        let mut marks: Vec<usize> = self.mean_target_horizons.iter().map(|h| (h / dt).round() as usize).collect();
        marks.sort_unstable();
        let horizon = *marks.last().unwrap() as f64 * dt;
        let settings = IntegrationSettings::new(dt, horizon);
        let (mut acc, mut prev) = (0.0, None::<f64>);
        let mut out = Vec::new();
        let mut next = 0;
        simulate(&field, &GainSchedule::constant(self.mean_target_alpha), &mut NoProbe, &[self.theta0], &settings, |s| {
            let v = closed.mean_field(s.theta[0]);
            if let Some(p) = prev {
                acc += 0.5 * dt * (p + v);
            }
            prev = Some(v);
            while next < marks.len() && marks[next] == s.k {
                out.push(MeanTargetPoint { horizon: s.t, value: if s.k == 0 { v } else { acc / s.t } });
                next += 1;
            }
            Ok(())
        })?;
        Ok(out)
    }

    pub fn run(&self, _ctx: &RunContext) -> Result<LinearBiasSweepResult> {
        self.validate()?;
        let cells: Vec<(LinearVariant, f64)> =
            self.variants.iter().flat_map(|&v| self.alphas.iter().map(move |&a| (v, a))).collect();
        let records: Vec<BiasRecord> = cells.par_iter().map(|&(v, a)| self.cell(v, a)).collect::<Result<_>>()?;
        let mut variants = Vec::new();
        for (i, &variant) in self.variants.iter().enumerate() {
            let closed = linear_example_closed_forms(variant, self.omega)?;
            let recs = records[i * self.alphas.len()..(i + 1) * self.alphas.len()].to_vec();
            let mut metadata = BTreeMap::new();
            metadata.insert("variant".into(), json!(variant_tag(variant)));
            metadata.insert("omega".into(), json!(self.omega));
            metadata.insert("dt".into(), json!(self.dt));
            metadata.insert("horizon_rule".into(), json!(format!("T = {} / alpha", self.alpha_horizon)));
            metadata.insert("filters".into(), json!({"gamma": format!("{} * alpha", self.gamma_factor), "zeta": self.zeta}));
            metadata.insert("kappa".into(), json!(self.kappa));
            metadata.insert("theta0".into(), json!(self.theta0));
            let report = BiasReport { records: recs, window: self.window, metadata };
            let mut slopes = BTreeMap::new();
            let fit_set: Vec<&BiasRecord> = report.records.iter().filter(|r| r.alpha <= self.fit_max_alpha).collect();
            for (name, pick) in [
                ("raw", (|r: &BiasRecord| r.bias_raw) as fn(&BiasRecord) -> f64),
                ("f1", |r| r.bias_f1),
                ("f2", |r| r.bias_f2),
                ("pr", |r| r.bias_pr),
            ] {
                let pts: Vec<(f64, f64)> = fit_set.iter().map(|r| (r.alpha, pick(r))).collect();
                if let Ok(fit) = slope_fit(&pts) {
                    slopes.insert(name.to_string(), fit);
                }
            }
            variants.push(LinearVariantResult {
                variant,
                report,
                slopes,
                upsilon_bar: closed.upsilon_bar,
                y_star: closed.y_star,
                mean_target: self.mean_target(variant)?,
            });
        }
        Ok(LinearBiasSweepResult { params: self.clone(), variants })
    }
}

impl LinearVariantResult {
    pub fn checks(&self, params: &LinearBiasSweep) -> Vec<Check> {
        let tag = variant_tag(self.variant);
        let mut checks = Vec::new();
        let slope = |k: &str| self.slopes.get(k).map(|s| s.slope).unwrap_or(f64::NAN);
        match self.variant {
            LinearVariant::A => {
                checks.push(Check::within(format!("{tag}:raw-slope"), slope("raw"), 0.8, 1.2));
                checks.push(Check::at_least(format!("{tag}:f2-slope"), slope("f2"), 1.7));
            }
            LinearVariant::B => {
                let target = self.y_star.abs();
                let worst = self
                    .report
                    .records
                    .iter()
                    .filter(|r| r.alpha <= 1e-2)
                    .map(|r| (r.bias_f2 / r.alpha - target).abs() / target)
                    .fold(f64::NAN, f64::max);
                checks.push(Check::at_most(format!("{tag}:f2-over-alpha-rel-err"), worst, 0.2));
                checks.push(Check::within(format!("{tag}:f2-slope"), slope("f2"), 0.8, 1.2));
            }
        }
        if let (Some(first), Some(last)) = (self.mean_target.first(), self.mean_target.last()) {
            match self.variant {
                LinearVariant::A => {
                    checks.push(Check::at_most(format!("{tag}:mean-target-final"), last.value.abs(), 5e-3));
                    if self.mean_target.len() > 1 {
                        checks.push(Check::at_least(
                            format!("{tag}:mean-target-decay"),
                            first.value.abs() / last.value.abs(),
                            3.0,
                        ));
                    }
                }
                LinearVariant::B => {
                    let expected = params.mean_target_alpha * self.upsilon_bar;
                    checks.push(Check::at_most(
                        format!("{tag}:mean-target-vs-alpha-upsilon"),
                        (last.value - expected).abs() / expected.abs(),
                        0.2,
                    ));
                }
            }
        }
        checks
    }
}

impl LinearBiasSweepResult {
    pub fn report(&self, dir: &Path) -> Result<Outcome> {
        let mut out = Outcome::default();
        let mut summary = serde_json::Map::new();
        for v in &self.variants {
            let tag = variant_tag(v.variant);
            let (csv, meta) = (format!("bias_{tag}.csv"), format!("bias_{tag}.json"));
            v.report.save(&dir.join(&csv), &dir.join(&meta))?;
            out.file("bias-report", &csv);
            out.file("bias-metadata", &meta);
            for s in ["raw", "f1", "f2", "pr"] {
                out.series(format!("{tag}:{s}"), &csv, "alpha", &format!("bias_{s}"));
            }
            // reference lines k1 alpha and k2 alpha^2 anchored at the smallest alpha
            if let Some(r0) = v.report.records.iter().min_by(|a, b| a.alpha.total_cmp(&b.alpha)) {
                let (k1, k2) = (r0.bias_raw / r0.alpha, r0.bias_f2 / (r0.alpha * r0.alpha));
                let mut t = Table::new(&["alpha", "ref_k1_alpha", "ref_k2_alpha2"]);
                for r in &v.report.records {
                    t.push(vec![r.alpha, k1 * r.alpha, k2 * r.alpha * r.alpha]);
                }
                let f = format!("reference_{tag}.csv");
                t.save(&dir.join(&f))?;
                out.file("reference-lines", &f);
                out.series(format!("{tag}:ref_k1_alpha"), &f, "alpha", "ref_k1_alpha");
                out.series(format!("{tag}:ref_k2_alpha2"), &f, "alpha", "ref_k2_alpha2");
            }
            if !v.mean_target.is_empty() {
                let mut t = Table::new(&["horizon", "mean_fbar"]);
                for p in &v.mean_target {
                    t.push(vec![p.horizon, p.value]);
                }
                let f = format!("mean_target_{tag}.csv");
                t.save(&dir.join(&f))?;
                out.file("mean-target-bias", &f);
                out.series(format!("{tag}:mean_fbar"), &f, "horizon", "mean_fbar");
            }
            out.checks.extend(v.checks(&self.params));
            summary.insert(tag.into(), json!({"slopes": v.slopes, "upsilon_bar": v.upsilon_bar, "y_star": v.y_star}));
        }
        out.summary = serde_json::Value::Object(summary);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// pmf-verify

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PmfVerify {
    pub variants: Vec<LinearVariant>,
    pub omega: f64,
    pub alphas: Vec<f64>,
    /// Coarse step; the fine run uses half of it.
    pub dt: f64,
    pub horizon: f64,
    pub theta0: f64,
}

impl Default for PmfVerify {
    fn default() -> Self {
        Self { variants: vec![LinearVariant::A, LinearVariant::B], omega: 0.1, alphas: vec![0.1, 0.01], dt: 0.1, horizon: 1e3, theta0: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmfRecord {
    pub variant: LinearVariant,
    pub alpha: f64,
    pub dt: f64,
    pub sup_coarse: f64,
    pub sup_fine: f64,
}

impl PmfRecord {
    pub fn ratio(&self) -> f64 {
        self.sup_coarse / self.sup_fine
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmfVerifyResult {
    pub records: Vec<PmfRecord>,
}

impl PmfVerify {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(invalid("variants", "must be non-empty"));
        }
        all_positive("alphas", &self.alphas)?;
        positive("omega", self.omega)?;
        positive("dt", self.dt)?;
        positive("horizon", self.horizon)
    }

    pub fn sup_residual(&self, variant: LinearVariant, alpha: f64, dt: f64) -> Result<f64> {
        let closed = linear_example_closed_forms(variant, self.omega)?;
        let field = FieldSpec::linear_example(variant, self.omega)?;
        let horizon = grid_horizon(self.horizon, dt);
        let traj = integrate_qsa(
            &field,
            &GainSchedule::constant(alpha),
            None,
            &[self.theta0],
            None,
            dt,
            horizon,
            BoxProjection::disabled(),
            Channels::default(),
        )?;
        Ok(pmf_residual(&traj, &closed, alpha)?.sup())
    }

    pub fn run(&self, _ctx: &RunContext) -> Result<PmfVerifyResult> {
        self.validate()?;
        let cells: Vec<(LinearVariant, f64)> =
            self.variants.iter().flat_map(|&v| self.alphas.iter().map(move |&a| (v, a))).collect();
        let records = cells
            .par_iter()
            .map(|&(variant, alpha)| {
                Ok(PmfRecord {
                    variant,
                    alpha,
                    dt: self.dt,
                    sup_coarse: self.sup_residual(variant, alpha, self.dt)?,
                    sup_fine: self.sup_residual(variant, alpha, self.dt / 2.0)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(PmfVerifyResult { records })
    }
}

impl PmfVerifyResult {
    pub fn report(&self, dir: &Path) -> Result<Outcome> {
        let mut out = Outcome::default();
        let mut by_variant: BTreeMap<&str, Table> = BTreeMap::new();
        for r in &self.records {
            let tag = variant_tag(r.variant);
            by_variant
                .entry(tag)
                .or_insert_with(|| Table::new(&["alpha", "dt", "sup_coarse", "sup_fine", "ratio"]))
                .push(vec![r.alpha, r.dt, r.sup_coarse, r.sup_fine, r.ratio()]);
            out.checks.push(Check::within(format!("{tag}:alpha={}:halving-ratio", r.alpha), r.ratio(), 1.7, 2.3));
        }
        for (tag, t) in by_variant {
            let f = format!("pmf_{tag}.csv");
            t.save(&dir.join(&f))?;
            out.file("pmf-residual", &f);
            out.series(format!("{tag}:sup_coarse"), &f, "alpha", "sup_coarse");
            out.series(format!("{tag}:ratio"), &f, "alpha", "ratio");
        }
        out.summary = json!({"records": self.records});
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// lyapunov-sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LyapunovSweep {
    pub omega: f64,
    pub dt: f64,
    pub alphas: Vec<f64>,
    /// Each run lasts `alpha_horizon / alpha` seconds.
    pub alpha_horizon: f64,
    /// `A_t = a0 + sin(omega t) a1` for the matrix example, row-major.
    pub a0: Vec<Vec<f64>>,
    pub a1: Vec<Vec<f64>>,
}

impl Default for LyapunovSweep {
    fn default() -> Self {
        Self {
            omega: 1.0,
            dt: 0.1,
            alphas: vec![0.1, 0.03, 0.01],
            alpha_horizon: 200.0,
            a0: vec![vec![-1.0, 2.0], vec![0.0, -3.0]],
            a1: vec![vec![0.5, 0.0], vec![1.0, -0.5]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovRecord {
    pub alpha: f64,
    /// `Lambda / alpha` for `A_t = -(1 + sin omega t)`.
    pub scalar_ratio: f64,
    pub matrix_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSweepResult {
    pub records: Vec<LyapunovRecord>,
    pub scalar_target: f64,
    /// Largest real part of the eigenvalues of `a0`.
    pub matrix_target: f64,
}

fn rows_to_matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(invalid(field, "must be a non-empty square matrix"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl LyapunovSweep {
    pub fn validate(&self) -> Result<()> {
        all_positive("alphas", &self.alphas)?;
        positive("omega", self.omega)?;
        positive("dt", self.dt)?;
        positive("alpha_horizon", self.alpha_horizon)?;
        let (a0, a1) = (rows_to_matrix("a0", &self.a0)?, rows_to_matrix("a1", &self.a1)?);
        if a0.shape() != a1.shape() {
            return Err(invalid("a1", "must match the shape of a0"));
        }
        Ok(())
    }

    fn probe(&self) -> Result<ProbeSpec> {
        ProbeSpec::sinusoids(FrequencyBasis::raw(&[self.omega])?, &[1.0], &[0.0], Convention::RawRadian)
    }

    /// `Lambda / alpha` for the QSA `dtheta/dt = alpha (a0 + psi_t a1) theta`.
    pub fn exponent_ratio(&self, a0: DMatrix<f64>, a1: DMatrix<f64>, alpha: f64) -> Result<f64> {
        let d = a0.nrows();
        let field = FieldSpec::GeneralLinear(GeneralLinear::homogeneous(a0, vec![a1])?);
        let probe = self.probe()?;
        let horizon = grid_horizon(self.alpha_horizon / alpha, self.dt);
        let (traj, _) = integrate_sensitivity(
            &field,
            &GainSchedule::constant(alpha),
            Some(&probe),
            &vec![1.0; d],
            None,
            self.dt,
            horizon,
            false,
        )?;
        Ok(crate::analysis::lyapunov_exponent(&traj)? / alpha)
    }

    pub fn run(&self, _ctx: &RunContext) -> Result<LyapunovSweepResult> {
        self.validate()?;
        let a0 = rows_to_matrix("a0", &self.a0)?;
        let a1 = rows_to_matrix("a1", &self.a1)?;
        let matrix_target = a0.complex_eigenvalues().iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max);
        let records = self
            .alphas
            .par_iter()
            .map(|&alpha| {
                let scalar = self.exponent_ratio(DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, -1.0), alpha)?;
                let matrix = self.exponent_ratio(a0.clone(), a1.clone(), alpha)?;
                Ok(LyapunovRecord { alpha, scalar_ratio: scalar, matrix_ratio: matrix })
            })
            .collect::<Result<_>>()?;
        Ok(LyapunovSweepResult { records, scalar_target: -1.0, matrix_target })
    }
}

impl LyapunovSweepResult {
    /// Records ordered by decreasing alpha.
    pub fn descending(&self) -> Vec<LyapunovRecord> {
        let mut r = self.records.clone();
        r.sort_by(|a, b| b.alpha.total_cmp(&a.alpha));
        r
    }

    /// Whether `|ratio - target|` shrinks at every step down the alpha grid.
    pub fn monotone(&self, pick: impl Fn(&LyapunovRecord) -> f64, target: f64) -> bool {
        self.descending().windows(2).all(|w| (pick(&w[1]) - target).abs() < (pick(&w[0]) - target).abs())
    }

    pub fn checks(&self) -> Vec<Check> {
        let desc = self.descending();
        let smallest = desc.last().expect("non-empty grid");
        vec![
            Check::within("scalar:ratio-at-smallest-alpha", smallest.scalar_ratio, -1.15, -0.85),
            Check::flag("scalar:monotone-toward-target", self.monotone(|r| r.scalar_ratio, self.scalar_target)),
            Check::at_most(
                "matrix:rel-err-at-smallest-alpha",
                (smallest.matrix_ratio - self.matrix_target).abs() / self.matrix_target.abs(),
                0.15,
            ),
            Check::flag("matrix:monotone-toward-target", self.monotone(|r| r.matrix_ratio, self.matrix_target)),
        ]
    }

    pub fn report(&self, dir: &Path) -> Result<Outcome> {
        let mut out = Outcome::default();
        let mut t = Table::new(&["alpha", "scalar_ratio", "matrix_ratio"]);
        for r in &self.records {
            t.push(vec![r.alpha, r.scalar_ratio, r.matrix_ratio]);
        }
        t.save(&dir.join("lyapunov.csv"))?;
        out.file("lyapunov", "lyapunov.csv");
        out.series("scalar", "lyapunov.csv", "alpha", "scalar_ratio");
        out.series("matrix", "lyapunov.csv", "alpha", "matrix_ratio");
        out.checks = self.checks();
        out.summary = json!({"scalar_target": self.scalar_target, "matrix_target": self.matrix_target});
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// markov-sa-bias

fn sticky_chain() -> MarkovChainSpec {
    MarkovChainSpec { transition: vec![vec![0.9, 0.1], vec![0.1, 0.9]], g: vec![0.0, 0.2], a: vec![0.01, 0.19] }
}

fn iid_chain() -> MarkovChainSpec {
    MarkovChainSpec { transition: vec![vec![0.5, 0.5], vec![0.5, 0.5]], ..sticky_chain() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkovSaBias {
    pub chain: MarkovChainSpec,
    /// Chain expected to show no bias; skipped when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<MarkovChainSpec>,
    pub alphas: Vec<f64>,
    pub steps: usize,
}

impl Default for MarkovSaBias {
    fn default() -> Self {
        Self { chain: sticky_chain(), control: Some(iid_chain()), alphas: vec![0.2, 0.1, 0.05, 0.02], steps: 100_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovSaBiasResult {
    pub records: Vec<MarkovSaRecord>,
    pub control: Vec<MarkovSaRecord>,
    pub slope: Option<SlopeFit>,
}

impl MarkovSaBias {
    pub fn validate(&self) -> Result<()> {
        all_positive("alphas", &self.alphas)?;
        self.chain.validate().map_err(|e| invalid("chain", e))?;
        if let Some(c) = &self.control {
            c.validate().map_err(|e| invalid("control", e))?;
        }
        if self.steps < 100 {
            return Err(invalid("steps", "must be at least 100"));
        }
        Ok(())
    }

    pub fn run(&self, ctx: &RunContext) -> Result<MarkovSaBiasResult> {
        self.validate()?;
        let mut jobs: Vec<(bool, usize, f64)> = self.alphas.iter().enumerate().map(|(i, &a)| (false, i, a)).collect();
        if self.control.is_some() {
            jobs.extend(self.alphas.iter().enumerate().map(|(i, &a)| (true, i, a)));
        }
        let results: Vec<MarkovSaRecord> = jobs
            .par_iter()
            .map(|&(ctrl, i, alpha)| {
                let spec = if ctrl { self.control.as_ref().unwrap() } else { &self.chain };
                let seed = seed_fanout(ctx.seed, i as u64 + if ctrl { 1 << 32 } else { 0 });
                markov_sa_bias(spec, alpha, self.steps, seed)
            })
            .collect::<Result<_>>()?;
        let n = self.alphas.len();
        let records = results[..n].to_vec();
        let control = results[n..].to_vec();
        let slope = slope_fit(&records.iter().map(|r| (r.alpha, r.mean_fbar.abs())).collect::<Vec<_>>()).ok();
        Ok(MarkovSaBiasResult { records, control, slope })
    }
}

impl MarkovSaBiasResult {
    pub fn checks(&self) -> Vec<Check> {
        let mut c = Vec::new();
        for r in &self.records {
            c.push(Check::at_most(format!("alpha={}:identity-gap-in-se", r.alpha), r.identity_gap() / r.se_identity, 3.0));
        }
        c.push(Check::within("bias-slope", self.slope.map(|s| s.slope).unwrap_or(f64::NAN), 0.9, 1.1));
        for r in &self.control {
            c.push(Check::at_most(format!("control:alpha={}:bias-in-se", r.alpha), r.mean_fbar.abs() / r.se_fbar, 3.0));
        }
        c
    }

    pub fn report(&self, dir: &Path) -> Result<Outcome> {
        let mut out = Outcome::default();
        let header = [
            "alpha",
            "mean_fbar",
            "alpha_mean_upsilon",
            "neg_mean_xi",
            "se_identity",
            "se_fbar",
            "oracle_fbar",
        ];
        for (file, recs) in [("markov_sa.csv", &self.records), ("markov_sa_control.csv", &self.control)] {
            if recs.is_empty() {
                continue;
            }
            let mut t = Table::new(&header);
            for r in recs.iter() {
                t.push(vec![r.alpha, r.mean_fbar, r.alpha_mean_upsilon, r.neg_mean_xi, r.se_identity, r.se_fbar, r.oracle_fbar]);
            }
            t.save(&dir.join(file))?;
            out.file("markov-sa", file);
            let prefix = if file.contains("control") { "control:" } else { "" };
            out.series(format!("{prefix}mean_fbar"), file, "alpha", "mean_fbar");
            out.series(format!("{prefix}alpha_mean_upsilon"), file, "alpha", "alpha_mean_upsilon");
            out.series(format!("{prefix}oracle_fbar"), file, "alpha", "oracle_fbar");
        }
        out.checks = self.checks();
        out.summary = json!({"slope": self.slope});
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// solidarity

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Solidarity {
    pub variant: LinearVariant,
    pub omega: f64,
    pub horizon: f64,
    pub theta0: f64,
    pub alphas: Vec<f64>,
    pub dt: f64,
}

impl Default for Solidarity {
    fn default() -> Self {
        Self { variant: LinearVariant::A, omega: 1.0, horizon: 10.0, theta0: 0.0, alphas: vec![1.0, 0.1, 0.01, 1e-3], dt: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolidarityResult {
    pub gaps: Vec<(f64, f64)>,
}

impl Solidarity {
    pub fn validate(&self) -> Result<()> {
        all_positive("alphas", &self.alphas)?;
        positive("omega", self.omega)?;
        positive("horizon", self.horizon)?;
        positive("dt", self.dt)
    }

    pub fn run(&self, _ctx: &RunContext) -> Result<SolidarityResult> {
        self.validate()?;
        let field = FieldSpec::linear_example(self.variant, self.omega)?;
        let fbar = VectorField::new(1, |th| vec![1.0 - th[0]]);
        let gaps = self
            .alphas
            .par_iter()
            .map(|&a| Ok(solidarity_gap(&field, None, &fbar, &[self.theta0], self.horizon, &[a], self.dt)?[0]))
            .collect::<Result<_>>()?;
        Ok(SolidarityResult { gaps })
    }
}

impl SolidarityResult {
    pub fn checks(&self) -> Vec<Check> {
        let by = |f: fn(f64, f64) -> bool| {
            self.gaps.iter().cloned().reduce(|a, b| if f(b.0, a.0) { b } else { a }).unwrap()
        };
        let (big, small) = (by(|x, y| x > y), by(|x, y| x < y));
        vec![Check::at_most("gap-smallest-over-largest-alpha", small.1 / big.1, 0.1)]
    }

    pub fn report(&self, dir: &Path) -> Result<Outcome> {
        let mut out = Outcome::default();
        let mut t = Table::new(&["alpha", "gap"]);
        for &(a, g) in &self.gaps {
            t.push(vec![a, g]);
        }
        t.save(&dir.join("solidarity.csv"))?;
        out.file("solidarity", "solidarity.csv");
        out.series("gap", "solidarity.csv", "alpha", "gap");
        out.checks = self.checks();
        out.summary = json!({"gaps": self.gaps});
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// ode-at-infinity

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedObjective {
    Rastrigin,
    Camel3,
}

impl NamedObjective {
    pub fn build(self) -> Objective {
        match self {
            NamedObjective::Rastrigin => rastrigin(),
            NamedObjective::Camel3 => camel3(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdeAtInfinity {
    pub objective: NamedObjective,
    pub radii: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub direction: Vec<f64>,
    /// Terminal norm below which the scaled flow counts as stable.
    pub tolerance: f64,
}

impl Default for OdeAtInfinity {
    fn default() -> Self {
        Self {
            objective: NamedObjective::Rastrigin,
            radii: vec![1e2, 1e4, 1e6],
            horizon: 5.0,
            dt: 1e-4,
            direction: vec![0.6, 0.8],
            tolerance: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeAtInfinityResult {
    pub tolerance: f64,
    pub terminal_norms: Vec<(f64, f64)>,
}

impl OdeAtInfinity {
    pub fn validate(&self) -> Result<()> {
        all_positive("radii", &self.radii)?;
        positive("horizon", self.horizon)?;
        positive("dt", self.dt)?;
        positive("tolerance", self.tolerance)?;
        if self.direction.len() != self.objective.build().dim() {
            return Err(invalid("direction", "length must match the objective dimension"));
        }
        Ok(())
    }

    pub fn run(&self, _ctx: &RunContext) -> Result<OdeAtInfinityResult> {
        self.validate()?;
        let flow = VectorField::gradient_flow(&self.objective.build());
        let mut radii = self.radii.clone();
        radii.sort_by(f64::total_cmp);
        radii.dedup();
        let terminal_norms = radii
            .par_iter()
            .map(|&r| Ok(ode_at_infinity_stability(&flow, &[r], self.horizon, self.dt, &self.direction)?[0]))
            .collect::<Result<_>>()?;
        Ok(OdeAtInfinityResult { tolerance: self.tolerance, terminal_norms })
    }
}

impl OdeAtInfinityResult {
    pub fn checks(&self) -> Vec<Check> {
        self.terminal_norms
            .iter()
            .map(|&(r, n)| Check { name: format!("r={r:e}:terminal-norm"), passed: n < self.tolerance, value: n, threshold: format!("< {}", self.tolerance) })
            .collect()
    }

    pub fn report(&self, dir: &Path) -> Result<Outcome> {
        let mut out = Outcome::default();
        let mut t = Table::new(&["r", "terminal_norm"]);
        for &(r, n) in &self.terminal_norms {
            t.push(vec![r, n]);
        }
        t.save(&dir.join("ode_at_infinity.csv"))?;
        out.file("ode-at-infinity", "ode_at_infinity.csv");
        out.series("terminal_norm", "ode_at_infinity.csv", "r", "terminal_norm");
        out.checks = self.checks();
        out.summary = json!({"terminal_norms": self.terminal_norms});
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// rastrigin-vanishing-vs-fixed

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VanishingVsFixed {
    /// Base amplitude of the prior-scaled probing gain.
    pub epsilon: f64,
    pub sigma_p: f64,
    pub amplitude: f64,
    pub gains: Vec<GainSchedule>,
    pub initial_norm: f64,
    pub replicates: usize,
    pub steps: usize,
    pub dt: f64,
    pub box_half_width: f64,
    pub record_stride: usize,
}

impl Default for VanishingVsFixed {
    fn default() -> Self {
        Self {
            epsilon: 0.6,
            sigma_p: 1.0,
            amplitude: 2.0,
            gains: vec![GainSchedule::PowerLaw { alpha: 0.1, rho: 0.65, t_e: 1.0 }, GainSchedule::constant(3e-3)],
            initial_norm: 1e10,
            replicates: 5,
            steps: 100_000,
            dt: 1.0,
            box_half_width: 10.0,
            record_stride: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundednessRecord {
    pub gain_index: usize,
    pub replicate: usize,
    pub phase: f64,
    pub theta0: Vec<f64>,
    /// First grid index from which the state never leaves the box again.
    pub inside_from: Option<usize>,
    pub max_norm: f64,
    pub final_theta: Vec<f64>,
    #[serde(skip)]
    pub samples: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanishingVsFixedResult {
    pub records: Vec<BoundednessRecord>,
    pub steps: usize,
}

impl VanishingVsFixed {
    pub fn validate(&self) -> Result<()> {
        positive("epsilon", self.epsilon)?;
        positive("sigma_p", self.sigma_p)?;
        positive("amplitude", self.amplitude)?;
        positive("initial_norm", self.initial_norm)?;
        positive("dt", self.dt)?;
        positive("box_half_width", self.box_half_width)?;
        if self.gains.is_empty() {
            return Err(invalid("gains", "must be non-empty"));
        }
        for g in &self.gains {
            g.validate().map_err(|e| invalid("gains", e))?;
        }
        if self.replicates == 0 || self.steps == 0 || self.record_stride == 0 {
            return Err(invalid("replicates/steps/record_stride", "must be positive"));
        }
        Ok(())
    }

    pub fn replicate(&self, gain_index: usize, replicate: usize, seed: u64) -> Result<BoundednessRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_fanout(seed, replicate as u64));
        let angle = 2.0 * PI * rng.random::<f64>();
        let theta0 = vec![self.initial_norm * angle.cos(), self.initial_norm * angle.sin()];
        let phase = phase_from_unit(rng.random());
        let policy = ProbingGainPolicy::PriorScaled { epsilon: self.epsilon, center: Vec::new(), sigma_p: self.sigma_p };
        let field = FieldSpec::qsgd1(rastrigin(), policy)?;
        let mut probe = ClockedProbe::new(ProbeSpec::standard_2d(self.amplitude, phase), ClockState::zeros(2))?;
        let settings = IntegrationSettings::new(self.dt, self.steps as f64 * self.dt);
        let (mut last_out, mut max_norm) = (None, 0.0f64);
        let mut samples = Vec::new();
        let b = self.box_half_width;
        simulate(&field, &self.gains[gain_index], &mut probe, &theta0, &settings, |s| {
            if s.theta.iter().any(|x| x.abs() > b) {
                last_out = Some(s.k);
            }
            max_norm = max_norm.max(norm(s.theta));
            if s.k % self.record_stride == 0 {
                samples.push([s.t, s.theta[0], s.theta[1]]);
            }
            Ok(())
        })
        .and_then(|final_theta| {
            let inside_from = match last_out {
                None => Some(0),
                Some(k) if k < self.steps => Some(k + 1),
                Some(_) => None,
            };
            Ok(BoundednessRecord { gain_index, replicate, phase, theta0: theta0.clone(), inside_from, max_norm, final_theta, samples })
        })
    }

    pub fn run(&self, ctx: &RunContext) -> Result<VanishingVsFixedResult> {
        self.validate()?;
        let jobs: Vec<(usize, usize)> =
            (0..self.gains.len()).flat_map(|g| (0..self.replicates).map(move |m| (g, m))).collect();
        let records = jobs.par_iter().map(|&(g, m)| self.replicate(g, m, ctx.seed)).collect::<Result<_>>()?;
        Ok(VanishingVsFixedResult { records, steps: self.steps })
    }
}

impl VanishingVsFixedResult {
    pub fn checks(&self) -> Vec<Check> {
        self.records
            .iter()
            .map(|r| Check::flag(format!("gain={}:replicate={}:enters-and-stays", r.gain_index, r.replicate), r.inside_from.is_some()))
            .collect()
    }

    pub fn report(&self, dir: &Path) -> Result<Outcome> {
        let mut out = Outcome::default();
        let mut summary = Table::new(&["gain_index", "replicate", "phase", "inside_from", "max_norm", "final_0", "final_1"]);
        for r in &self.records {
            let f = format!("bounded_g{}_r{}.csv", r.gain_index, r.replicate);
            let mut t = Table::new(&["t", "theta_0", "theta_1", "norm"]);
            for s in &r.samples {
                t.push(vec![s[0], s[1], s[2], (s[1] * s[1] + s[2] * s[2]).sqrt()]);
            }
            t.save(&dir.join(&f))?;
            out.file("trajectory", &f);
            out.series(format!("g{}:r{}:norm", r.gain_index, r.replicate), &f, "t", "norm");
            summary.push(vec![
                r.gain_index as f64,
                r.replicate as f64,
                r.phase,
                r.inside_from.map(|k| k as f64).unwrap_or(f64::NAN),
                r.max_norm,
                r.final_theta[0],
                r.final_theta[1],
            ]);
        }
        summary.save(&dir.join("boundedness.csv"))?;
        out.file("boundedness-summary", "boundedness.csv");
        out.checks = self.checks();
        out.summary = json!({"steps": self.steps});
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// rastrigin-qsgd

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RastriginQsgd {
    pub replicates: usize,
    /// Replicate count used with `full = true`.
    pub full_replicates: usize,
    pub steps: usize,
    pub dt: f64,
    pub epsilon: f64,
    pub amplitude: f64,
    pub gain: GainSchedule,
    pub domain: f64,
    pub kappa: f64,
    /// Horizons (in seconds) at which PR estimates are formed.
    pub checkpoints: Vec<f64>,
    pub spsa: bool,
    pub spsa_support: f64,
    pub record_stride: usize,
}

impl Default for RastriginQsgd {
    fn default() -> Self {
        Self {
            replicates: 50,
            full_replicates: 200,
            steps: 100_000,
            dt: 1.0,
            epsilon: 0.25,
            amplitude: 2.0,
            gain: GainSchedule::ClippedPowerLaw { c: 0.5, rho: 0.85 },
            domain: 5.12,
            kappa: 5.0,
            checkpoints: vec![1e4, 2e4, 5e4, 1e5],
            spsa: true,
            spsa_support: std::f64::consts::SQRT_2,
            record_stride: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariancePoint {
    pub horizon: f64,
    pub gain: f64,
    pub sigma2: f64,
    /// `sigma2 / a_T^2`.
    pub scaled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    /// `[checkpoint][replicate]` PR estimates.
    pub pr_estimates: Vec<Vec<Vec<f64>>>,
    pub terminal: Vec<Vec<f64>>,
    pub covariance: Vec<CovariancePoint>,
    #[serde(skip)]
    pub samples: Vec<Vec<[f64; 3]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RastriginQsgdResult {
    pub replicates: usize,
    pub qsgd: AlgorithmSummary,
    pub spsa: Option<AlgorithmSummary>,
}

struct ReplicateOut {
    pr: Vec<Vec<f64>>,
    terminal: Vec<f64>,
    samples: Vec<[f64; 3]>,
}

impl RastriginQsgd {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 || self.full_replicates < 2 {
            return Err(invalid("replicates", "need at least 2 replicates"));
        }
        positive("dt", self.dt)?;
        positive("epsilon", self.epsilon)?;
        positive("amplitude", self.amplitude)?;
        positive("domain", self.domain)?;
        positive("spsa_support", self.spsa_support)?;
        self.gain.validate().map_err(|e| invalid("gain", e))?;
        if !(self.kappa > 1.0) {
            return Err(invalid("kappa", "must exceed 1"));
        }
        all_positive("checkpoints", &self.checkpoints)?;
        let horizon = self.steps as f64 * self.dt;
        if self.checkpoints.iter().any(|&c| c > horizon * (1.0 + 1e-12)) {
            return Err(invalid("checkpoints", format!("must not exceed the horizon {horizon}")));
        }
        if self.record_stride == 0 {
            return Err(invalid("record_stride", "must be positive"));
        }
        Ok(())
    }

    pub fn replicate_count(&self, full: bool) -> usize {
        if full {
            self.full_replicates
        } else {
            self.replicates
        }
    }

    fn initial(&self, seed: u64, m: usize) -> (Vec<f64>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_fanout(seed, m as u64));
        let theta0 = (0..2).map(|_| rng.random_range(-self.domain..=self.domain)).collect();
        (theta0, phase_from_unit(rng.random()))
    }

    fn averagers(&self) -> Result<Vec<PrAverager>> {
        self.checkpoints.iter().map(|&h| PrAverager::new(self.kappa, 0.0, h, 2)).collect()
    }

    fn run_qsgd(&self, seed: u64, m: usize) -> Result<ReplicateOut> {
        let (theta0, phase) = self.initial(seed, m);
        let field = FieldSpec::qsgd1(rastrigin(), ProbingGainPolicy::constant(self.epsilon))?;
        let mut probe = ClockedProbe::new(ProbeSpec::standard_2d(self.amplitude, phase), ClockState::zeros(2))?;
        let settings = IntegrationSettings::new(self.dt, self.steps as f64 * self.dt)
            .with_projection(BoxProjection::uniform(2, -self.domain, self.domain)?);
        let mut avg = self.averagers()?;
        let mut samples = Vec::new();
        let terminal = simulate(&field, &self.gain, &mut probe, &theta0, &settings, |s| {
            for a in avg.iter_mut() {
                a.push(s.t, s.theta);
            }
            if s.k % self.record_stride == 0 {
                samples.push([s.t, s.theta[0], s.theta[1]]);
            }
            Ok(())
        })?;
        let pr = avg.iter().map(|a| a.average()).collect::<Result<_>>()?;
        Ok(ReplicateOut { pr, terminal, samples })
    }

    fn run_spsa(&self, seed: u64, m: usize) -> Result<ReplicateOut> {
        let (mut theta, _) = self.initial(seed, m);
        let projection = BoxProjection::uniform(2, -self.domain, self.domain)?;
        projection.project(&mut theta);
        let mut spec = SpsaSpec::new(rastrigin(), self.epsilon, SpsaVariant::One);
        spec.support = self.spsa_support;
        spec.seed = seed_fanout(seed, (m as u64) | (1 << 40));
        let mut spsa = Spsa::new(spec)?;
        let mut avg = self.averagers()?;
        let mut samples = Vec::new();
        for k in 0..=self.steps {
            let t = k as f64 * self.dt;
            for a in avg.iter_mut() {
                a.push(t, &theta);
            }
            if k % self.record_stride == 0 {
                samples.push([t, theta[0], theta[1]]);
            }
            if k == self.steps {
                break;
            }
            theta = spsa.step(&theta, self.dt * self.gain.at(t));
            projection.project(&mut theta);
            if !theta.iter().all(|x| x.is_finite()) {
                return Err(QsaError::NonFinite { context: format!("SPSA state at step {k}") });
            }
        }
        let pr = avg.iter().map(|a| a.average()).collect::<Result<_>>()?;
        Ok(ReplicateOut { pr, terminal: theta, samples })
    }

    fn summarize(&self, outs: Vec<ReplicateOut>) -> Result<AlgorithmSummary> {
        let nc = self.checkpoints.len();
        let pr_estimates: Vec<Vec<Vec<f64>>> = (0..nc).map(|c| outs.iter().map(|o| o.pr[c].clone()).collect()).collect();
        let covariance = self
            .checkpoints
            .iter()
            .zip(&pr_estimates)
            .map(|(&h, ests)| {
                let (_, sigma) = empirical_covariance(ests)?;
                // the gain in force at the end of the window
                let gain = self.gain.at(h - self.dt);
                Ok(CovariancePoint { horizon: h, gain, sigma2: sigma * sigma, scaled: sigma * sigma / (gain * gain) })
            })
            .collect::<Result<_>>()?;
        let terminal = outs.iter().map(|o| o.terminal.clone()).collect();
        let samples = outs.into_iter().map(|o| o.samples).collect();
        Ok(AlgorithmSummary { pr_estimates, terminal, covariance, samples })
    }

    pub fn run(&self, ctx: &RunContext) -> Result<RastriginQsgdResult> {
        self.validate()?;
        let m = self.replicate_count(ctx.full);
        let qsgd = (0..m).into_par_iter().map(|i| self.run_qsgd(ctx.seed, i)).collect::<Result<Vec<_>>>()?;
        let qsgd = self.summarize(qsgd)?;
        let spsa = if self.spsa {
            let outs = (0..m).into_par_iter().map(|i| self.run_spsa(ctx.seed, i)).collect::<Result<Vec<_>>>()?;
            Some(self.summarize(outs)?)
        } else {
            None
        };
        Ok(RastriginQsgdResult { replicates: m, qsgd, spsa })
    }
}

impl RastriginQsgdResult {
    /// `sigma2_qsgd / sigma2_spsa` at the final checkpoint.
    pub fn variance_ratio(&self) -> Option<f64> {
        let s = self.spsa.as_ref()?;
        Some(self.qsgd.covariance.last()?.sigma2 / s.covariance.last()?.sigma2)
    }

    /// Scaled covariance at the final checkpoint over its value at the first.
    pub fn scaled_growth(&self) -> f64 {
        let c = &self.qsgd.covariance;
        c.last().unwrap().scaled / c.first().unwrap().scaled
    }

    pub fn checks(&self) -> Vec<Check> {
        let mut c = vec![Check::at_most("qsgd:scaled-covariance-growth", self.scaled_growth(), 1.5)];
        if let Some(r) = self.variance_ratio() {
            c.push(Check::at_most("qsgd-over-spsa-variance", r, 0.1));
        }
        c
    }

    pub fn report(&self, dir: &Path) -> Result<Outcome> {
        let mut out = Outcome::default();
        let mut cov = Table::new(&["horizon", "gain", "sigma2_qsgd", "scaled_qsgd", "sigma2_spsa", "scaled_spsa"]);
        for (i, p) in self.qsgd.covariance.iter().enumerate() {
            let (s2, sc) = self
                .spsa
                .as_ref()
                .map(|s| (s.covariance[i].sigma2, s.covariance[i].scaled))
                .unwrap_or((f64::NAN, f64::NAN));
            cov.push(vec![p.horizon, p.gain, p.sigma2, p.scaled, s2, sc]);
        }
        cov.save(&dir.join("covariance.csv"))?;
        out.file("covariance-summary", "covariance.csv");
        out.series("qsgd:scaled", "covariance.csv", "horizon", "scaled_qsgd");
        if self.spsa.is_some() {
            out.series("spsa:scaled", "covariance.csv", "horizon", "scaled_spsa");
        }
        let mut est = Table::new(&["replicate", "qsgd_pr_0", "qsgd_pr_1", "spsa_pr_0", "spsa_pr_1"]);
        let last = self.qsgd.pr_estimates.len() - 1;
        for (m, q) in self.qsgd.pr_estimates[last].iter().enumerate() {
            let s = self.spsa.as_ref().map(|s| s.pr_estimates[last][m].clone()).unwrap_or(vec![f64::NAN; 2]);
            est.push(vec![m as f64, q[0], q[1], s[0], s[1]]);
        }
        est.save(&dir.join("pr_estimates.csv"))?;
        out.file("pr-estimates", "pr_estimates.csv");
        for (algo, summary) in [("qsgd", Some(&self.qsgd)), ("spsa", self.spsa.as_ref())] {
            let Some(summary) = summary else { continue };
            for (m, samples) in summary.samples.iter().enumerate() {
                let f = format!("traj_{algo}_r{m}.csv");
                let mut t = Table::new(&["t", "theta_0", "theta_1"]);
                for s in samples {
                    t.push(s.to_vec());
                }
                t.save(&dir.join(&f))?;
                out.file("trajectory", &f);
            }
        }
        out.checks = self.checks();
        out.summary = json!({
            "replicates": self.replicates,
            "variance_ratio": self.variance_ratio(),
            "scaled_growth": self.scaled_growth(),
        });
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// camel-tracking

/// Probing signals used by the tracking experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedProbe {
    /// `2 [sin(t/9), sin(t/e^3)]`
    CamelA,
    /// `2 [sin(t/4), sin(t/e^2)]`
    CamelB,
    /// `2 [sin(sqrt(20) t/10), sin(pi t/10)]`
    CamelC,
}

impl NamedProbe {
    pub fn tag(self) -> &'static str {
        match self {
            NamedProbe::CamelA => "a",
            NamedProbe::CamelB => "b",
            NamedProbe::CamelC => "c",
        }
    }

    pub fn omegas(self) -> [f64; 2] {
        match self {
            NamedProbe::CamelA => [1.0 / 9.0, E.powi(-3)],
            NamedProbe::CamelB => [0.25, E.powi(-2)],
            NamedProbe::CamelC => [20f64.sqrt() / 10.0, PI / 10.0],
        }
    }

    pub fn spec(self, amplitude: f64) -> Result<ProbeSpec> {
        let basis = FrequencyBasis::raw(&self.omegas())?;
        ProbeSpec::sinusoids(basis, &[amplitude; 2], &[0.0; 2], Convention::RawRadian)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamelTracking {
    pub target: MovingTarget,
    pub epsilon: f64,
    pub alpha: f64,
    pub amplitude: f64,
    pub probes: Vec<NamedProbe>,
    /// Filter bandwidth is `eta * alpha`.
    pub eta: f64,
    pub zeta: f64,
    pub dt: f64,
    pub horizon: f64,
    pub box_half_width: f64,
    pub theta0: Vec<f64>,
    pub window: f64,
    pub record_stride: usize,
}

impl Default for CamelTracking {
    fn default() -> Self {
        let [lm, _] = camel3_local_minima();
        Self {
            target: MovingTarget::lotus_default(),
            epsilon: 0.2,
            alpha: 6e-3,
            amplitude: 2.0,
            probes: vec![NamedProbe::CamelA, NamedProbe::CamelB, NamedProbe::CamelC],
            eta: 5.0,
            zeta: 0.8,
            dt: 1.0,
            horizon: 5e4,
            box_half_width: 5.0,
            theta0: lm.to_vec(),
            window: 0.2,
            record_stride: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingRecord {
    pub probe: NamedProbe,
    pub err_raw: f64,
    pub err_f1: f64,
    pub err_f2: f64,
    #[serde(skip)]
    pub samples: Vec<[f64; 9]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamelTrackingResult {
    pub records: Vec<TrackingRecord>,
}

impl CamelTracking {
    pub fn validate(&self) -> Result<()> {
        positive("epsilon", self.epsilon)?;
        positive("alpha", self.alpha)?;
        positive("amplitude", self.amplitude)?;
        positive("eta", self.eta)?;
        positive("zeta", self.zeta)?;
        positive("dt", self.dt)?;
        positive("horizon", self.horizon)?;
        positive("box_half_width", self.box_half_width)?;
        check_fraction("window", self.window)?;
        if self.probes.is_empty() {
            return Err(invalid("probes", "must be non-empty"));
        }
        if self.target.dim() != 2 || self.theta0.len() != 2 {
            return Err(invalid("target/theta0", "tracking runs are two-dimensional"));
        }
        if self.record_stride == 0 {
            return Err(invalid("record_stride", "must be positive"));
        }
        Ok(())
    }

    pub fn track(&self, probe: NamedProbe) -> Result<TrackingRecord> {
        let cost = TimeVaryingObjective::new(camel3(), self.target.clone())?;
        let field = FieldSpec::qsgd1(cost, ProbingGainPolicy::constant(self.epsilon))?;
        let mut signal = ClockedProbe::new(probe.spec(self.amplitude)?, ClockState::zeros(2))?;
        let horizon = grid_horizon(self.horizon, self.dt);
        let settings = IntegrationSettings::new(self.dt, horizon)
            .with_projection(BoxProjection::uniform(2, -self.box_half_width, self.box_half_width)?);
        let gamma = self.eta * self.alpha;
        let mut f1 = Filter::new(FilterSpec::first_order(gamma), 2)?;
        let mut f2 = Filter::new(FilterSpec::second_order(gamma, self.zeta), 2)?;
        let mut w = WindowIntegral::new(horizon * (1.0 - self.window), horizon, 3);
        let mut samples = Vec::new();
        let mut opt = [0.0; 2];
        simulate(&field, &GainSchedule::constant(self.alpha), &mut signal, &self.theta0, &settings, |s| {
            self.target.position_into(s.t, &mut opt);
            let y1: [f64; 2] = f1.step(s.theta, self.dt)?.try_into().unwrap();
            let y2: [f64; 2] = f2.step(s.theta, self.dt)?.try_into().unwrap();
            w.push(s.t, &[dist(s.theta, &opt), dist(&y1, &opt), dist(&y2, &opt)]);
            if s.k % self.record_stride == 0 {
                samples.push([s.t, s.theta[0], s.theta[1], y1[0], y1[1], y2[0], y2[1], opt[0], opt[1]]);
            }
            Ok(())
        })?;
        let m = w.mean()?;
        Ok(TrackingRecord { probe, err_raw: m[0], err_f1: m[1], err_f2: m[2], samples })
    }

    pub fn run(&self, _ctx: &RunContext) -> Result<CamelTrackingResult> {
        self.validate()?;
        let records = self.probes.par_iter().map(|&p| self.track(p)).collect::<Result<_>>()?;
        Ok(CamelTrackingResult { records })
    }
}

impl CamelTrackingResult {
    pub fn get(&self, probe: NamedProbe) -> Option<&TrackingRecord> {
        self.records.iter().find(|r| r.probe == probe)
    }

    pub fn checks(&self) -> Vec<Check> {
        let mut c: Vec<Check> = self
            .records
            .iter()
            .map(|r| Check::at_most(format!("{}:f1-over-raw", r.probe.tag()), r.err_f1 / r.err_raw, 0.5))
            .collect();
        if let (Some(a), Some(cc)) = (self.get(NamedProbe::CamelA), self.get(NamedProbe::CamelC)) {
            c.push(Check::at_most("c-over-a-raw-error", cc.err_raw / a.err_raw, 1.0));
        }
        c
    }

    pub fn report(&self, dir: &Path) -> Result<Outcome> {
        let mut out = Outcome::default();
        let mut summary = Table::new(&["probe", "err_raw", "err_f1", "err_f2"]);
        let cols = ["t", "theta_0", "theta_1", "f1_0", "f1_1", "f2_0", "f2_1", "opt_0", "opt_1"];
        for (i, r) in self.records.iter().enumerate() {
            summary.push(vec![i as f64, r.err_raw, r.err_f1, r.err_f2]);
            let f = format!("tracking_{}.csv", r.probe.tag());
            let mut t = Table::new(&cols);
            for s in &r.samples {
                t.push(s.to_vec());
            }
            t.save(&dir.join(&f))?;
            out.file("trajectory", &f);
            for c in &cols[1..] {
                out.series(format!("{}:{c}", r.probe.tag()), &f, "t", c);
            }
        }
        summary.save(&dir.join("tracking_errors.csv"))?;
        out.file("tracking-errors", "tracking_errors.csv");
        out.checks = self.checks();
        out.summary = json!({"records": self.records});
        Ok(out)
    }
}
