"""Smoke test for the `qsa` extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/python`,
or copy target/release/libqsa.so to qsa.so somewhere on PYTHONPATH.
"""

import csv
import io
import json
import math
import pathlib
import sys
import tempfile

import qsa


def check(cond, msg):
    if not cond:
        print(f"FAIL {msg}")
        sys.exit(1)
    print(f"ok   {msg}")


def main():
    rast = qsa.Objective.rastrigin()
    check(rast.dim == 2 and abs(rast.value([0.0, 0.0])) < 1e-12, "rastrigin vanishes at the origin")
    g = rast.gradient([0.1, -0.2])
    check(abs(g[0] - (0.2 + 20 * math.pi * math.sin(0.2 * math.pi))) < 1e-9, "rastrigin gradient matches closed form")

    probe = qsa.Probe.standard_2d(2.0, 0.0)
    v = probe.value_at(1.0)
    check(abs(v[0] - 2 * math.sin(0.25)) < 1e-12 and abs(v[1] - 2 * math.sin(math.exp(-2))) < 1e-12, "standard probe values")
    cov = probe.covariance()
    check(abs(cov[0][0] - 2.0) < 1e-12 and abs(cov[0][1]) < 1e-12, "probe covariance is diag(a^2/2)")

    gain = qsa.Gain.clipped_power_law(0.5, 0.85)
    check(gain.at(0.0) == 0.5 and abs(gain.at(99.0) - 100 ** -0.85) < 1e-15, "clipped power-law gain")
    try:
        qsa.Gain.constant(-1.0)
        check(False, "negative gain rejected")
    except qsa.QsaError:
        check(True, "negative gain rejected")

    f = qsa.Filter.second_order(0.01, 0.8)
    y = [f.step([3.0], 0.1)[0] for _ in range(5)]
    check(all(abs(x - 3.0) < 1e-12 for x in y), "filter holds a constant input")
    check(f.magnitude(1.0) < qsa.Filter.first_order(0.01).magnitude(1.0), "second-order filter attenuates more")

    quad = qsa.Objective.quadratic([[1.0, 0.0], [0.0, 1.0]], [0.5, -0.25])
    t, x = qsa.qsgd(quad, 0.5, qsa.Gain.constant(0.01), probe, [1.0, 0.5], 0.1, 5000.0)
    tail = x[-len(x) // 5:]
    mean = [sum(v[i] for v in tail) / len(tail) for i in range(2)]
    err = math.hypot(mean[0] - 0.5, mean[1] + 0.25)
    check(len(t) == len(x) == 50001 and err < 0.05, f"1qSGD reaches the quadratic minimizer (err {err:.2e})")

    cf = qsa.linear_closed_forms("B", 0.1)
    check(abs(cf["upsilon_bar"] - 10.0) < 1e-9, "linear example B closed form")
    _, th = qsa.linear_example("A", 0.1, 0.01, 0.0, 0.1, 10000.0)
    tail = th[-len(th) // 5:]
    check(abs(sum(tail) / len(tail) - 1.0) < 0.02, "linear example A averages near 1")

    slope, _, r2 = qsa.slope_fit([(a, 3 * a * a) for a in (0.01, 0.02, 0.05, 0.1)])
    check(abs(slope - 2.0) < 1e-12 and r2 > 0.999999, "slope fit recovers a power law")

    rec = qsa.markov_sa_bias([[0.9, 0.1], [0.1, 0.9]], [0.0, 0.2], [0.01, 0.19], 0.1, 200_000, 3)
    check(rec["identity_gap"] < 5 * rec["se_identity"], "Markov SA bias identity holds")
    check(len({qsa.seed_fanout(7, i) for i in range(50)}) == 50, "seed fanout gives distinct seeds")

    with tempfile.TemporaryDirectory() as d:
        out = pathlib.Path(d) / "solidarity"
        toml = 'name = "py-smoke"\nseed = 1\n[experiment]\nkind = "solidarity"\ndt = 1e-3\n'
        manifest = qsa.run_config(toml, str(out))
        check(manifest["experiment"] == "solidarity" and all(c["passed"] for c in manifest["checks"]), "solidarity run passes")
        mpath = out / "manifest.json"
        check(json.loads(mpath.read_text())["name"] == "py-smoke", "manifest written")
        checks = qsa.verify(str(mpath))
        check(all(c["passed"] for c in checks), "verify reproduces outputs")
        rows = list(csv.reader(io.StringIO(qsa.plotdata(str(mpath)))))
        check(rows[0] == ["experiment", "series", "x", "y"] and len(rows) == 5, "plotdata is long-format")
        try:
            qsa.run_config('name = "x"\n[experiment]\nkind = "solidarity"\nbogus = 1\n', str(out))
            check(False, "unknown field rejected")
        except qsa.QsaError as e:
            check("bogus" in str(e), "unknown field rejected")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
