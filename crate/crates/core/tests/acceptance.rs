//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits nonzero if any fail.
//! Tolerances are pinned here; nothing is read from the environment.

use std::process::ExitCode;
use std::time::Instant;

use qsa_core::dynamics::LinearVariant;
use qsa_core::experiments::{
    CamelTracking, LinearBiasSweep, LyapunovSweep, MarkovSaBias, NamedProbe, OdeAtInfinity, PmfVerify,
    RastriginQsgd, RunContext, VanishingVsFixed,
};
use qsa_core::filters::{Filter, FilterSpec};
use qsa_core::Result;

const SEED: u64 = 20_240_601;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn ctx() -> RunContext {
    RunContext { seed: SEED, full: false }
}

fn bias_grid(variant: LinearVariant) -> LinearBiasSweep {
    LinearBiasSweep {
        variants: vec![variant],
        alphas: vec![1e-3, 3e-3, 1e-2, 3e-2, 0.1],
        mean_target_horizons: Vec::new(),
        ..LinearBiasSweep::default()
    }
}

fn bias_slopes_a() -> Result<Verdict> {
    let start = Instant::now();
    let r = bias_grid(LinearVariant::A).run(&ctx())?;
    let v = &r.variants[0];
    let (raw, f2) = (v.slopes["raw"].slope, v.slopes["f2"].slope);
    let secs = start.elapsed().as_secs_f64();
    let ok = (0.8..=1.2).contains(&raw) && f2 >= 1.7 && secs <= 120.0;
    Ok(verdict(ok, format!("raw slope {raw:.3} in [0.8, 1.2]; f2 slope {f2:.3} >= 1.7; {secs:.1}s <= 120s")))
}

fn bias_upsilon_dominated() -> Result<Verdict> {
    let p = bias_grid(LinearVariant::B);
    let r = p.run(&ctx())?;
    let v = &r.variants[0];
    let target = 1.0 / p.omega;
    let worst = v
        .report
        .records
        .iter()
        .filter(|r| r.alpha <= 1e-2)
        .map(|r| (r.bias_f2 / r.alpha - target).abs() / target)
        .fold(0.0, f64::max);
    let f2 = v.slopes["f2"].slope;
    let ok = worst <= 0.2 && (0.8..=1.2).contains(&f2);
    Ok(verdict(ok, format!("max |f2/alpha - 1/omega| / (1/omega) = {worst:.3} <= 0.2; f2 slope {f2:.3} in [0.8, 1.2]")))
}

fn mean_target() -> Result<Verdict> {
    let p = LinearBiasSweep {
        variants: vec![LinearVariant::A, LinearVariant::B],
        mean_target_alpha: 0.01,
        mean_target_horizons: vec![1e4, 1e5],
        ..LinearBiasSweep::default()
    };
    let a = p.mean_target(LinearVariant::A)?;
    let b = p.mean_target(LinearVariant::B)?;
    let (a4, a5) = (a[0].value.abs(), a[1].value.abs());
    let expected_b = p.mean_target_alpha / p.omega;
    let rel_b = (b[1].value - expected_b).abs() / expected_b;
    let ok = a5 <= 5e-3 && a4 / a5 >= 3.0 && rel_b <= 0.2;
    Ok(verdict(
        ok,
        format!(
            "A: |mtb(1e5)| = {a5:.3e} <= 5e-3, decay {:.2}x >= 3x; B: mtb(1e5) = {:.4e} vs alpha/omega = {expected_b:.1e}, rel err {rel_b:.3} <= 0.2",
            a4 / a5,
            b[1].value
        ),
    ))
}

fn pmf_identity() -> Result<Verdict> {
    let r = PmfVerify::default().run(&ctx())?;
    let ratios: Vec<String> =
        r.records.iter().map(|x| format!("{:?}@{}={:.3}", x.variant, x.alpha, x.ratio())).collect();
    let ok = r.records.len() == 4 && r.records.iter().all(|x| (1.7..=2.3).contains(&x.ratio()));
    Ok(verdict(ok, format!("halving ratios in [1.7, 2.3]: {}", ratios.join(", "))))
}

fn lyapunov() -> Result<Verdict> {
    let r = LyapunovSweep::default().run(&ctx())?;
    let desc = r.descending();
    let small = desc.last().unwrap();
    let scalar_ok = (-1.15..=-0.85).contains(&small.scalar_ratio) && r.monotone(|x| x.scalar_ratio, -1.0);
    let rel = (small.matrix_ratio - r.matrix_target).abs() / r.matrix_target.abs();
    let matrix_ok = rel <= 0.15 && r.monotone(|x| x.matrix_ratio, r.matrix_target);
    let scalar: Vec<String> = desc.iter().map(|x| format!("{:.4}", x.scalar_ratio)).collect();
    let matrix: Vec<String> = desc.iter().map(|x| format!("{:.4}", x.matrix_ratio)).collect();
    Ok(verdict(
        scalar_ok && matrix_ok,
        format!(
            "scalar Lambda/alpha [{}] -> -1 monotone, last in [-1.15, -0.85]; matrix [{}] -> {:.3} monotone, rel err {rel:.3} <= 0.15",
            scalar.join(", "),
            matrix.join(", "),
            r.matrix_target
        ),
    ))
}

fn rastrigin_rate_and_variance() -> Result<(Verdict, Verdict)> {
    let start = Instant::now();
    let p = RastriginQsgd::default();
    let r = p.run(&ctx())?;
    let secs = start.elapsed().as_secs_f64();
    let growth = r.scaled_growth();
    let ratio = r.variance_ratio().unwrap_or(f64::NAN);
    Ok((
        verdict(
            r.replicates == 50 && growth <= 1.5 && secs <= 600.0,
            format!("M = {}; scaled covariance final / at T/10 = {growth:.3e} <= 1.5; {secs:.1}s <= 600s", r.replicates),
        ),
        verdict(ratio <= 0.1, format!("PR variance qSGD / SPSA = {ratio:.3e} <= 0.1")),
    ))
}

fn filter_sanity() -> Result<Verdict> {
    let (gamma, dt) = (0.01, 0.01);
    let mut worst_dc = 0.0f64;
    for spec in [FilterSpec::first_order(gamma), FilterSpec::second_order(gamma, 0.8)] {
        worst_dc = worst_dc.max((spec.magnitude(0.0) - 1.0).abs());
        let mut f = Filter::new(spec, 1)?;
        let mut y = 0.0;
        for _ in 0..200_000 {
            y = f.step(&[2.5], dt)?[0];
        }
        worst_dc = worst_dc.max((y / 2.5 - 1.0).abs());
    }
    // steady-state amplitude of a tone at 100 gamma through each filter
    let omega = 100.0 * gamma;
    let amp = |spec: FilterSpec| -> Result<f64> {
        let mut f = Filter::new(spec, 1)?;
        let n = (40.0 / gamma / dt) as usize;
        let mut peak = 0.0f64;
        for k in 0..n {
            let t = k as f64 * dt;
            let y = f.step(&[(omega * t).sin()], dt)?[0];
            if k > n / 2 {
                peak = peak.max(y.abs());
            }
        }
        Ok(peak)
    };
    let (a1, a2) = (amp(FilterSpec::first_order(gamma))?, amp(FilterSpec::second_order(gamma, 0.8))?);
    let ok = worst_dc <= 1e-9 && a2 < a1;
    Ok(verdict(ok, format!("DC gain error {worst_dc:.1e} <= 1e-9; tone at 100 gamma: f2 {a2:.3e} < f1 {a1:.3e}")))
}

fn markov() -> Result<Verdict> {
    let start = Instant::now();
    let r = MarkovSaBias::default().run(&ctx())?;
    let secs = start.elapsed().as_secs_f64();
    let gaps: Vec<f64> = r.records.iter().map(|x| x.identity_gap() / x.se_identity).collect();
    let ctrl: Vec<f64> = r.control.iter().map(|x| x.mean_fbar.abs() / x.se_fbar).collect();
    let slope = r.slope.map(|s| s.slope).unwrap_or(f64::NAN);
    let ok = gaps.iter().all(|&g| g <= 3.0)
        && (0.9..=1.1).contains(&slope)
        && ctrl.len() == 4
        && ctrl.iter().all(|&c| c <= 3.0)
        && secs <= 60.0;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ");
    Ok(verdict(
        ok,
        format!(
            "identity gaps [{}] se <= 3; slope {slope:.3} in [0.9, 1.1]; iid control [{}] se <= 3; {secs:.1}s <= 60s",
            fmt(&gaps),
            fmt(&ctrl)
        ),
    ))
}

fn boundedness() -> Result<Verdict> {
    let p = VanishingVsFixed { gains: vec![VanishingVsFixed::default().gains[0].clone()], ..VanishingVsFixed::default() };
    let r = p.run(&ctx())?;
    let entered = r.records.iter().filter(|x| x.inside_from.is_some()).count();
    let ode = OdeAtInfinity { radii: vec![1e2, 1e6], ..OdeAtInfinity::default() }.run(&ctx())?;
    let norms: Vec<String> = ode.terminal_norms.iter().map(|&(r, n)| format!("r={r:e}: {n:.3e}")).collect();
    let ok = r.records.len() == 5 && entered == 5 && ode.terminal_norms.iter().all(|&(_, n)| n < 0.1);
    Ok(verdict(
        ok,
        format!("{entered}/5 runs from |theta0| = 1e10 enter and stay in [-10, 10]^2; ODE@inf terminal norms {} < 0.1", norms.join(", ")),
    ))
}

fn tracking() -> Result<Verdict> {
    let r = CamelTracking::default().run(&ctx())?;
    let per: Vec<String> =
        r.records.iter().map(|x| format!("{}: f1/raw = {:.3}", x.probe.tag(), x.err_f1 / x.err_raw)).collect();
    let filter_ok = r.records.iter().all(|x| x.err_f1 <= 0.5 * x.err_raw);
    let (a, c) = (r.get(NamedProbe::CamelA).unwrap(), r.get(NamedProbe::CamelC).unwrap());
    let ok = filter_ok && c.err_raw <= a.err_raw;
    Ok(verdict(
        ok,
        format!("{} (each <= 0.5); raw error c {:.3e} <= a {:.3e}", per.join(", "), c.err_raw, a.err_raw),
    ))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Result<Verdict>)> = vec![
        ("1 bias slopes, zero apparent-noise mean", bias_slopes_a()),
        ("2 bias dominated by alpha Y*", bias_upsilon_dominated()),
        ("3 mean target bias", mean_target()),
        ("4 PMF first-step identity", pmf_identity()),
        ("5 Lyapunov exponent asymptotics", lyapunov()),
    ];
    match rastrigin_rate_and_variance() {
        Ok((a, b)) => {
            results.push(("6 Rastrigin vanishing-gain rate", Ok(a)));
            results.push(("7 qSGD vs SPSA variance", Ok(b)));
        }
        Err(e) => {
            results.push(("6 Rastrigin vanishing-gain rate", Err(e.clone())));
            results.push(("7 qSGD vs SPSA variance", Err(e)));
        }
    }
    results.push(("8 filter sanity", filter_sanity()));
    results.push(("9 Markov SA bias identity", markov()));
    results.push(("10 ultimate boundedness and ODE at infinity", boundedness()));
    results.push(("11 tracking", tracking()));

    let mut failed = 0;
    for (name, r) in &results {
        let (passed, detail) = match r {
            Ok(v) => (v.passed, v.detail.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failed += 1;
        }
        println!("{} [{name}] {detail}", if passed { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {}/{} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
