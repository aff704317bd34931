"""Acceptance criteria 1-10, each at its stated tolerance and path count.

Every test records a one-line verdict that is printed in the terminal summary.
"""

import csv
import io
import math
import os
import subprocess
import sys
import time

import numpy as np
from scipy import integrate, stats

from helpers import BUILTIN, MERTON_JUMP, VEGA_PARAMS, additive_ts, geometric_bs, geometric_merton
from jdgreeks.coeff_models import NonlinearTest, ParamVector
from jdgreeks.levy_models import (
    CompoundPoissonGaussian,
    LevyMeasureSpec,
    TemperedStable,
    effective_density,
    order_exponent_estimate,
)
from jdgreeks.mc_estimator import (
    PayoffSpec,
    black_scholes,
    convergence_study,
    estimate_greeks_fd_problem,
    estimate_greeks_weighted,
    estimate_inverse_moment,
    gaussian_band_moment,
    merton_series,
)
from jdgreeks.path_engine import Bump, GridSpec, resimulate_bumped, simulate
from jdgreeks.weight_engine import boundary_flux, jump_integrand

MILLION = 1_000_000


def _z(a, sa, b, sb=0.0):
    return (a - b) / math.hypot(sa, sb)


def test_criterion_1_black_scholes_delta(criterion):
    pr = geometric_bs(n_steps=256)
    t0 = time.perf_counter()
    rep = estimate_greeks_weighted(pr, ("delta",), MILLION, 101, "geometric")["delta"]
    elapsed = time.perf_counter() - t0
    exact = stats.norm.cdf(0.1)
    ok = rep.ci_lo <= exact <= rep.ci_hi and elapsed < 120.0
    criterion(1, ok, f"delta {rep.estimate:.5f} CI [{rep.ci_lo:.5f}, {rep.ci_hi:.5f}] "
                     f"vs Phi(0.1) {exact:.5f}; {elapsed:.1f}s")
    assert ok


def test_criterion_2_black_scholes_gamma(criterion):
    pr = geometric_bs(n_steps=256)
    rep = estimate_greeks_weighted(pr, ("gamma",), MILLION, 102, "diffusion-only")["gamma"]
    exact = black_scholes(100.0, 100.0, 1.0, 0.2).gamma
    z = rep.zscore(exact)
    ok = abs(z) <= 3.0
    criterion(2, ok, f"gamma {rep.estimate:.6f} +- {rep.se:.6f} vs {exact:.6f} (z={z:+.2f})")
    assert ok


def test_criterion_3_merton(criterion):
    pr = geometric_merton()
    lam, mu, sd = MERTON_JUMP
    # the simulated log-drift omits the band compensator of the marks
    drift = pr.eps["gamma"] - gaussian_band_moment(lam, mu, sd)
    exact = merton_series(100.0, 100.0, 1.0, 0.2, drift, lam, mu, sd)
    reps = estimate_greeks_weighted(pr, ("delta", "gamma", "vega:sigma1"), MILLION, 103, "geometric")
    zs = {
        "delta": reps["delta"].zscore(exact.delta),
        "gamma": reps["gamma"].zscore(exact.gamma),
        "vega:sigma1": reps["vega:sigma1"].zscore(exact.vega),
    }
    ok = all(abs(z) <= 3.0 for z in zs.values())
    criterion(3, ok, "z-scores vs series " + ", ".join(f"{k}={v:+.2f}" for k, v in zs.items()))
    assert ok


def test_criterion_4_oracle_triangle(criterion):
    pr = additive_ts(n_steps=50)
    qs = ("delta", "gamma", "vega:gamma", "vega:sigma1", "vega:sigma2")
    w = estimate_greeks_weighted(pr, qs, MILLION, 104, variants=True)
    f = estimate_greeks_fd_problem(pr, qs[:], MILLION, 204, bumps={"gamma": 0.05})
    zs = {q: _z(w[q].estimate, w[q].se, f[q].estimate, f[q].se) for q in qs}
    ok = all(abs(z) <= 3.0 for z in zs.values())
    variants = {
        "delta_example_K": "delta",
        "gamma_printed": "gamma",
        "vega_sigma2_example": "vega:sigma2",
    }
    vz = {
        k: _z(w[f"variant:{k}"].estimate, w[f"variant:{k}"].se, f[q].estimate, f[q].se)
        for k, q in variants.items()
    }
    detail = ", ".join(f"{q}={z:+.2f}" for q, z in zs.items())
    detail += " | example forms: " + ", ".join(f"{k}={z:+.1f}" for k, z in vz.items())
    criterion(4, ok, "weighted vs FD z: " + detail)
    assert ok


def test_criterion_5_mean_zero(criterion):
    worst = (0.0, "")
    ok = True
    for name, build in BUILTIN.items():
        pr = build(payoff=PayoffSpec("constant", value=1.0))
        qs = ("delta", "gamma") + tuple(f"vega:{p}" for p in VEGA_PARAMS[name])
        reps = estimate_greeks_weighted(pr, qs, 100_000, 105)
        for q, r in reps.items():
            z = abs(r.estimate) / r.se
            if z > worst[0]:
                worst = (z, f"{name}/{q}")
            ok &= z <= 3.0
    criterion(5, ok, f"{len(BUILTIN)} configurations; largest |mean|/SE = {worst[0]:.2f} ({worst[1]})")
    assert ok


def test_criterion_6_flow(criterion):
    model = NonlinearTest()
    eps = ParamVector(gamma=0.3, sigma1=0.4, sigma2=0.5, eta=0.15, eta_tilde=0.15)
    levy = LevyMeasureSpec(TemperedStable(1.0, 1.2, 2.0, 4.0), 0.05)
    grid = GridSpec(1.0, 100)
    tol = max(5e-3, 5 * grid.dt)
    h = 1e-4
    worst = {}
    zu = 0.0
    for seed in range(100):
        base = simulate(model, levy, grid, eps, 0.3, seed)
        zu = max(zu, float(np.max(np.abs(base.Z * base.U - 1.0))))
        up = resimulate_bumped(model, levy, grid, eps, 0.3, seed, Bump("x0", h))
        dn = resimulate_bumped(model, levy, grid, eps, 0.3, seed, Bump("x0", -h))
        pairs = {"Z": ((up.x - dn.x) / (2 * h), base.Z), "DZ": ((up.Z - dn.Z) / (2 * h), base.DZ)}
        for p in model.param_names:
            pu = resimulate_bumped(model, levy, grid, eps, 0.3, seed, Bump(p, h))
            pd = resimulate_bumped(model, levy, grid, eps, 0.3, seed, Bump(p, -h))
            pairs[f"H[{p}]"] = ((pu.x - pd.x) / (2 * h), base.H[p])
        for k, (fd, exact) in pairs.items():
            nz = np.abs(exact) > 0.0
            rel = float(np.max(np.abs(fd[nz] - exact[nz]) / np.abs(exact[nz]))) if nz.any() else 0.0
            assert np.all(fd[~nz] == 0.0)
            worst[k] = max(worst.get(k, 0.0), rel)
    ulp = np.finfo(float).eps
    ok = max(worst.values()) <= tol and zu <= 4 * ulp
    criterion(6, ok, f"max rel error {max(worst.values()):.1e} (tol {tol:.0e}); max |ZU-1| = {zu:.1e}")
    assert ok


def test_criterion_7_flux_identity_and_se_scaling(criterion):
    model = NonlinearTest()
    eps = ParamVector(gamma=0.3, sigma1=0.4, sigma2=0.5, eta=0.15, eta_tilde=0.15)
    levy = LevyMeasureSpec(TemperedStable(1.0, 1.2, 2.0, 4.0), 0.05, "hard")
    d = levy.delta
    rng = np.random.default_rng(107)
    worst = 0.0
    for k in range(20):
        path = simulate(model, levy, GridSpec(1.0, 20), eps, 0.3, 1000 + k)
        i = int(rng.integers(path.x.size))
        x, Z = float(path.x[i]), float(path.Z[i])
        g = lambda z: effective_density(levy, z) * jump_integrand(model, levy, eps, x, Z, z)  # noqa: E731
        quad = sum(
            integrate.quad(g, lo, hi, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
            for lo, hi in ((d, 1.0), (1.0, np.inf), (-1.0, -d), (-np.inf, -1.0))
        )
        flux = boundary_flux(model, levy, eps, x, Z)
        worst = max(worst, abs(quad - flux) / abs(flux))
    tab = convergence_study(additive_ts(n_steps=50), "n_paths", [10_000, 100_000, MILLION], 0, 107, "delta")
    ok = worst <= 1e-6 and abs(tab.slope + 0.5) <= 0.1
    criterion(7, ok, f"flux identity max rel error {worst:.1e}; SE slope {tab.slope:.3f}")
    assert ok


def test_criterion_8_inverse_moment(criterion):
    pr = additive_ts(n_steps=50)
    a = estimate_inverse_moment(pr, 100_000, 108)
    b = estimate_inverse_moment(pr, 100_000, 208)
    rel = abs(a.estimate - b.estimate) / max(a.estimate, b.estimate)
    ok = rel < 0.10
    criterion(8, ok, f"E[A^-2] = {a.estimate:.5f} vs {b.estimate:.5f} (rel diff {rel:.2%})")
    assert ok


def test_criterion_9_order_exponent(criterion):
    got = {}
    for beta in (0.5, 1.2):
        spec = LevyMeasureSpec(TemperedStable(1.0, beta, 3.0, 3.0), 0.05)
        got[beta] = order_exponent_estimate(spec)
    cp = order_exponent_estimate(LevyMeasureSpec(CompoundPoissonGaussian(1.0, 0.0, 0.5)))
    ok = all(v is not None and abs(v - b) <= 0.1 for b, v in got.items()) and cp is None
    criterion(9, ok, ", ".join(f"beta={b}: {v:.4f}" for b, v in got.items())
              + f"; compound Poisson: {'fails' if cp is None else cp}")
    assert ok


DETERMINISM_INI = """\
[model]
name = additive
x0 = 0.0
gamma = 0.0
sigma1 = 0.2
sigma2 = 0.3

[levy]
family = tempered-stable
scale = 1.0
stability = 0.5
lambda_plus = 3.0
lambda_minus = 3.0
delta = 0.05

[grid]
T = 1.0
n_steps = 20

[payoff]
kind = call
strike = 0.0

[run]
n_paths = 60000
seed = 110
greeks = delta, gamma, vega:sigma2
"""


def test_criterion_10_determinism(tmp_path, criterion):
    cfg = tmp_path / "det.ini"
    cfg.write_text(DETERMINISM_INI)
    outs = []
    for workers in ("1", "4"):
        env = dict(os.environ, JDGREEKS_WORKERS=workers)
        res = subprocess.run(
            [sys.executable, "-m", "jdgreeks.cli", "greeks", str(cfg)],
            capture_output=True, text=True, env=env, check=True,
        )
        rows = list(csv.reader(io.StringIO(res.stdout)))
        col = rows[0].index("runtime_ms")
        outs.append([r[:col] + r[col + 1:] for r in rows])
    ok = outs[0] == outs[1] and len(outs[0]) == 4
    criterion(10, ok, f"{len(outs[0]) - 1} records identical across 1 and 4 workers" if ok else "CSV differs")
    assert ok
