"""Monte Carlo prices and Greeks, finite-difference and analytic oracles, convergence studies.

Paths are processed in fixed chunks of :data:`CHUNK` paths.  Every chunk draws from its
own counter-based streams keyed by ``(seed, chunk index)`` and reports
``(count, mean, M2)`` per quantity; chunk results are merged in chunk order.  Results
therefore depend on the seed only, never on the number of workers.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .coeff_models import CoefficientModel, ParamVector
from .levy_models import (
    CompoundPoissonGaussian,
    LevyMeasureSpec,
    band_moment_cached,
    truncation_bias_proxy,
)
from .path_engine import GridSpec, simulate_batch
from .weight_engine import (
    WeightAccumulator,
    assemble,
    check_mode,
    check_supported,
    example_variants,
    geometric_transform,
)

CHUNK = 16384
WORKERS_ENV = "JDGREEKS_WORKERS"
MAX_ABORT_FRACTION = 0.01
HIGH_VARIANCE_RATIO = 0.5
Z95 = 1.959963984540054


class EstimatorFailure(RuntimeError):
    """Too many aborted paths, or no usable samples."""


# ---------------------------------------------------------------------------
# payoffs


@dataclass(frozen=True)
class Piece:
    """``weight * (slope * x + intercept)`` on ``lo <= x < hi``."""

    lo: float
    hi: float
    slope: float
    intercept: float
    weight: float = 1.0


@dataclass(frozen=True)
class PayoffSpec:
    kind: str
    strike: float = 0.0
    value: float = 0.0
    pieces: tuple[Piece, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("call", "put", "digital", "constant", "linear", "piecewise"):
            raise ValueError(f"unknown payoff kind {self.kind!r}")
        if self.kind == "piecewise":
            if not self.pieces:
                raise ValueError("piecewise payoff needs at least one piece")
            for p in self.pieces:
                if not (p.lo < p.hi) or not all(
                    math.isfinite(v) for v in (p.slope, p.intercept, p.weight)
                ):
                    raise ValueError("invalid payoff piece")

    def __call__(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        k = self.kind
        if k == "call":
            return np.maximum(s - self.strike, 0.0)
        if k == "put":
            return np.maximum(self.strike - s, 0.0)
        if k == "digital":
            return (s > self.strike).astype(float)
        if k == "constant":
            return np.full_like(s, self.value)
        if k == "linear":
            return s.copy()
        out = np.zeros_like(s)
        for p in self.pieces:
            inside = (s >= p.lo) & (s < p.hi)
            out += np.where(inside, p.weight * (p.slope * s + p.intercept), 0.0)
        return out


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EstimatorReport:
    quantity: str
    mode: str
    estimate: float
    se: float
    ci_lo: float
    ci_hi: float
    n_paths: int
    n_excluded: int
    seed: int
    n_steps: int
    runtime_ms: float
    method: str = "weighted"
    bump: float | None = None
    flags: tuple[str, ...] = ()

    def contains(self, value: float, k: float = 1.96) -> bool:
        return abs(self.estimate - value) <= k * self.se

    def zscore(self, value: float) -> float:
        if self.se == 0.0:
            return 0.0 if self.estimate == value else math.inf
        return (self.estimate - value) / self.se


@dataclass
class _Stat:
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, x: np.ndarray) -> "_Stat":
        if x.size == 0:
            return cls()
        if np.all(x == x[0]):
            return cls(int(x.size), float(x[0]), 0.0)
        mu = float(np.mean(x))
        return cls(int(x.size), mu, float(np.sum((x - mu) ** 2)))

    def merge(self, o: "_Stat") -> "_Stat":
        if o.n == 0:
            return self
        if self.n == 0:
            return o
        n = self.n + o.n
        d = o.mean - self.mean
        return _Stat(n, self.mean + d * o.n / n, self.m2 + o.m2 + d * d * self.n * o.n / n)

    @property
    def se(self) -> float:
        if self.n < 2:
            return math.nan
        return math.sqrt(self.m2 / (self.n - 1) / self.n)


def _report(quantity, mode, stat: _Stat, n_paths, seed, n_steps, t0, method, bump=None, flags=()):
    if stat.n == 0:
        raise EstimatorFailure(f"{quantity}: no usable samples")
    se = stat.se
    flags = tuple(flags)
    if method == "fd" and stat.mean != 0.0 and se / abs(stat.mean) > HIGH_VARIANCE_RATIO:
        flags += ("high-variance",)
    return EstimatorReport(
        quantity=quantity,
        mode=mode,
        estimate=stat.mean,
        se=se,
        ci_lo=stat.mean - Z95 * se,
        ci_hi=stat.mean + Z95 * se,
        n_paths=n_paths,
        n_excluded=n_paths - stat.n,
        seed=seed,
        n_steps=n_steps,
        runtime_ms=(time.perf_counter() - t0) * 1e3,
        method=method,
        bump=bump,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# problem definition and chunk driver


@dataclass(frozen=True)
class Problem:
    model: CoefficientModel
    levy: LevyMeasureSpec
    grid: GridSpec
    eps: ParamVector
    x0: float
    payoff: PayoffSpec

    def __post_init__(self) -> None:
        object.__setattr__(self, "eps", ParamVector(self.eps))
        self.model.check_params(self.eps)
        if self.model.geometric and not self.x0 > 0.0:
            raise ValueError("geometric models need a positive spot")

    @property
    def state0(self) -> float:
        return math.log(self.x0) if self.model.geometric else float(self.x0)

    def value(self, x: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore"):
            return self.payoff(np.exp(x) if self.model.geometric else x)


def workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    try:
        n = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        n = 1
    return max(1, n)


def _chunks(n_paths: int) -> list[tuple[int, int]]:
    return [(c, min(CHUNK, n_paths - c * CHUNK)) for c in range((n_paths + CHUNK - 1) // CHUNK)]


def _map_chunks(fn: Callable, args: Iterable[tuple]) -> list:
    args = list(args)
    w = min(workers(), len(args))
    if w <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=w) as ex:
        return list(ex.map(fn, *zip(*args)))


def _check_aborts(aborted: int, n_paths: int) -> None:
    if aborted > MAX_ABORT_FRACTION * n_paths:
        raise EstimatorFailure(f"{aborted} of {n_paths} paths aborted (limit 1%)")


def _merge(per_chunk: list[dict[str, _Stat]]) -> dict[str, _Stat]:
    out: dict[str, _Stat] = {}
    for d in per_chunk:
        for k, s in d.items():
            out[k] = out.get(k, _Stat()).merge(s)
    return out


# -- weighted ---------------------------------------------------------------


def _weighted_chunk(problem: Problem, seed, chunk, size, quantities, mode, vega_form, gamma3_form, variants):
    params = tuple(q.split(":", 1)[1] for q in quantities if q.startswith("vega:"))
    T = problem.grid.horizon
    acc = WeightAccumulator(
        problem.model, problem.levy, problem.eps, params, size, T, vega_form, mode
    )
    res = simulate_batch(
        problem.model, problem.levy, problem.grid, problem.eps, problem.state0,
        size, seed, chunk, params, True, [acc],
    )
    ok = ~res.aborted
    phi = problem.value(res.x)
    w = assemble(acc.sums, mode, gamma3_form)
    if problem.model.geometric:
        w = geometric_transform(w, problem.x0)
    out: dict[str, _Stat] = {"__aborted__": _Stat(int((~ok).sum()))}
    for q in quantities:
        if q == "price":
            out[q] = _Stat.of(phi[ok])
            continue
        vals, valid = w[q]
        sel = ok & valid
        out[q] = _Stat.of(phi[sel] * vals[sel])
    if variants:
        ex = example_variants(acc.sums, problem.eps)
        for k, v in ex.items():
            out[f"variant:{k}"] = _Stat.of(phi[ok] * v[ok])
    return out


def estimate_greeks_weighted(
    problem: Problem,
    quantities: Sequence[str],
    n_paths: int,
    seed: int,
    mode: str = "full",
    vega_form: str = "compensated",
    gamma3_form: str = "corrected",
    variants: bool = False,
) -> dict[str, EstimatorReport]:
    """Weighted estimates of several quantities from one set of simulated paths.

    Quantities are ``price``, ``delta``, ``gamma`` and ``vega:<param>``.  With
    ``variants=True`` the additive model's alternative weight forms are reported under
    ``variant:<name>`` keys.
    """
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    if mode == "geometric":
        if not problem.model.geometric:
            raise ValueError("geometric mode needs a geometric model")
        mode = "full"
    t0 = time.perf_counter()
    quantities = tuple(quantities)
    for q in quantities:
        if q not in ("price", "delta", "gamma") and not q.startswith("vega:"):
            raise ValueError(f"unknown quantity {q!r}")
    if any(q != "price" for q in quantities):
        check_mode(problem.model, problem.levy, problem.eps, mode)
    for q in quantities:
        if q.startswith("vega:"):
            check_supported(problem.model, problem.levy, problem.eps, q[5:], mode)
    args = [
        (problem, seed, c, size, quantities, mode, vega_form, gamma3_form, variants)
        for c, size in _chunks(n_paths)
    ]
    stats_ = _merge(_map_chunks(_weighted_chunk, args))
    _check_aborts(stats_.pop("__aborted__").n, n_paths)
    label = "geometric" if problem.model.geometric and mode == "full" else mode
    return {
        k: _report(k, label, s, n_paths, seed, problem.grid.n_steps, t0, "weighted")
        for k, s in stats_.items()
    }


def estimate_expectation(model, levy, grid, eps, x0, payoff, n_paths, seed) -> EstimatorReport:
    """Monte Carlo estimate of ``E[payoff(x_T)]``."""
    problem = Problem(model, levy, grid, ParamVector(eps), x0, payoff)
    return estimate_greeks_fd_problem(problem, ("price",), n_paths, seed)["price"]


def estimate_greek_weighted(
    model, levy, grid, eps, x0, payoff, n_paths, seed, greek: str, mode: str = "full",
    **kw,
) -> EstimatorReport:
    """Weighted estimate of one Greek: ``delta``, ``gamma`` or ``vega:<param>``."""
    problem = Problem(model, levy, grid, ParamVector(eps), x0, payoff)
    return estimate_greeks_weighted(problem, (greek,), n_paths, seed, mode, **kw)[greek]


# -- finite differences ---------------------------------------------------------


def default_bump(problem: Problem, quantity: str) -> float:
    if quantity == "delta":
        return 1e-3 * max(1.0, abs(problem.x0))
    if quantity == "gamma":
        return 0.5 if problem.model.geometric else 0.05 * max(1.0, abs(problem.x0))
    if quantity.startswith("vega:"):
        return 1e-3 * max(1.0, abs(problem.eps[quantity[5:]]))
    raise ValueError(f"no bump for {quantity!r}")


def _bumped(problem: Problem, quantity: str, h: float) -> Problem:
    if quantity in ("delta", "gamma"):
        return replace(problem, x0=problem.x0 + h)
    return replace(problem, eps=problem.eps.bumped(quantity[5:], h))


def _terminal(problem: Problem, seed, chunk, size):
    res = simulate_batch(
        problem.model, problem.levy, problem.grid, problem.eps, problem.state0,
        size, seed, chunk, (), False, (),
    )
    return problem.value(res.x), res.aborted


def _fd_chunk(problem: Problem, seed, chunk, size, quantities, bumps):
    cache: dict[tuple[str, float], tuple[np.ndarray, np.ndarray]] = {}

    def val(q, h):
        key = ("x0" if q in ("delta", "gamma", "price") else q, h)
        if key not in cache:
            cache[key] = _terminal(_bumped(problem, q, h) if h else problem, seed, chunk, size)
        return cache[key]

    base, ab = val("price", 0.0)
    out: dict[str, _Stat] = {}
    aborted = ab.copy()
    for q in quantities:
        if q == "price":
            out[q] = (base, ab)
            continue
        h = bumps[q]
        up, a_up = val(q, h)
        dn, a_dn = val(q, -h)
        bad = a_up | a_dn
        if q == "gamma":
            s = (up - 2.0 * base + dn) / (h * h)
            bad |= ab
        else:
            s = (up - dn) / (2.0 * h)
        aborted |= bad
        out[q] = (s, bad)
    stats_ = {q: _Stat.of(s[~bad]) for q, (s, bad) in out.items()}
    stats_["__aborted__"] = _Stat(int(aborted.sum()))
    return stats_


def estimate_greeks_fd_problem(
    problem: Problem,
    quantities: Sequence[str],
    n_paths: int,
    seed: int,
    bumps: dict[str, float] | None = None,
) -> dict[str, EstimatorReport]:
    """Common-random-number central differences; ``price`` is the plain estimate."""
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    t0 = time.perf_counter()
    quantities = tuple(quantities)
    bumps = dict(bumps or {})
    for q in quantities:
        if q != "price":
            bumps.setdefault(q, default_bump(problem, q))
            if not bumps[q] > 0.0:
                raise ValueError("bump size must be > 0")
    args = [(problem, seed, c, size, quantities, bumps) for c, size in _chunks(n_paths)]
    stats_ = _merge(_map_chunks(_fd_chunk, args))
    _check_aborts(stats_.pop("__aborted__").n, n_paths)
    return {
        q: _report(
            q, "fd" if q != "price" else "mc", stats_[q], n_paths, seed, problem.grid.n_steps,
            t0, "fd" if q != "price" else "mc", bumps.get(q),
        )
        for q in quantities
    }


def estimate_greek_fd(model, levy, grid, eps, x0, payoff, n_paths, seed, greek: str,
                      h: float | None = None) -> EstimatorReport:
    problem = Problem(model, levy, grid, ParamVector(eps), x0, payoff)
    bumps = {greek: h} if h is not None else None
    return estimate_greeks_fd_problem(problem, (greek,), n_paths, seed, bumps)[greek]


# -- diagnostics ----------------------------------------------------------------


def _inverse_moment_chunk(problem: Problem, seed, chunk, size, power):
    acc = WeightAccumulator(problem.model, problem.levy, problem.eps, (), size, problem.grid.horizon)
    res = simulate_batch(
        problem.model, problem.levy, problem.grid, problem.eps, problem.state0,
        size, seed, chunk, (), True, [acc],
    )
    A = problem.grid.horizon + acc.sums.total("A")
    return {"m": _Stat.of(A[~res.aborted] ** (-power))}


def estimate_inverse_moment(problem: Problem, n_paths: int, seed: int, power: float = 2.0) -> EstimatorReport:
    """Sample mean of ``A_{0,T}^{-power}``."""
    t0 = time.perf_counter()
    args = [(problem, seed, c, size, power) for c, size in _chunks(n_paths)]
    s = _merge(_map_chunks(_inverse_moment_chunk, args))["m"]
    return _report(f"inv_A^{power:g}", "full", s, n_paths, seed, problem.grid.n_steps, t0, "mc")


# ---------------------------------------------------------------------------
# analytic oracles


@dataclass(frozen=True)
class OracleResult:
    price: float
    delta: float
    gamma: float
    vega: float
    tail_mass: float = 0.0
    remainder_bound: float = 0.0
    n_terms: int = 0


def _black(x, K, m, v, kind):
    """Undiscounted price and derivatives of ``E[(x e^Y - K)^±]`` for ``Y ~ N(m, v²)``."""
    growth = math.exp(m + 0.5 * v * v)
    F = x * growth
    d1 = (math.log(F / K) + 0.5 * v * v) / v
    d2 = d1 - v
    n1, pdf = stats.norm.cdf(d1), stats.norm.pdf(d1)
    if kind == "call":
        price = F * n1 - K * stats.norm.cdf(d2)
        dF = n1
    elif kind == "put":
        price = K * stats.norm.cdf(-d2) - F * stats.norm.cdf(-d1)
        dF = n1 - 1.0
    else:
        raise ValueError(f"unsupported contract kind {kind!r}")
    delta = growth * dF
    gamma = growth * pdf / (x * v)
    dv = dF * F * v + F * pdf  # derivative in v at fixed m
    return float(price), float(delta), float(gamma), float(dv)


def black_scholes(spot, strike, maturity, sigma, drift=None, kind="call") -> OracleResult:
    """Undiscounted Black–Scholes with log-drift ``drift`` (default ``-sigma²/2``).

    ``vega`` is the derivative in ``sigma`` with the log-drift held fixed.
    """
    if not (spot > 0 and strike > 0 and sigma > 0 and maturity > 0):
        raise ValueError("spot, strike, sigma and maturity must be > 0")
    drift = -0.5 * sigma * sigma if drift is None else drift
    v = sigma * math.sqrt(maturity)
    p, d, g, dv = _black(spot, strike, drift * maturity, v, kind)
    return OracleResult(p, d, g, dv * math.sqrt(maturity))


def merton_series(
    spot, strike, maturity, sigma, drift, intensity, jump_mean, jump_sd, kind="call", n_terms=50
) -> OracleResult:
    """Poisson mixture of Black–Scholes terms.

    The log-price is ``drift*T + sigma*W_T + Σ Y_i`` with ``Y_i ~ N(jump_mean, jump_sd²)``
    and Poisson(``intensity*T``) many jumps; ``drift`` already contains any compensator.
    """
    if not (spot > 0 and strike > 0 and sigma > 0 and maturity > 0):
        raise ValueError("spot, strike, sigma and maturity must be > 0")
    if n_terms < 1:
        raise ValueError("n_terms must be >= 1")
    lam_t = intensity * maturity
    price = delta = gamma = vega = 0.0
    weights = stats.poisson.pmf(np.arange(n_terms), lam_t) if lam_t > 0 else np.r_[1.0, np.zeros(n_terms - 1)]
    for n in range(n_terms):
        w = float(weights[n])
        if w == 0.0:
            continue
        m = drift * maturity + n * jump_mean
        v = math.sqrt(sigma * sigma * maturity + n * jump_sd * jump_sd)
        p, d, g, dv = _black(spot, strike, m, v, kind)
        price += w * p
        delta += w * d
        gamma += w * g
        vega += w * dv * sigma * maturity / v
    tail = float(stats.poisson.sf(n_terms - 1, lam_t)) if lam_t > 0 else 0.0
    bound = 0.0
    if lam_t > 0:
        for n in range(n_terms, n_terms + 400):
            w = float(stats.poisson.pmf(n, lam_t))
            m = drift * maturity + n * jump_mean
            v2 = sigma * sigma * maturity + n * jump_sd * jump_sd
            bound += w * max(spot * math.exp(m + 0.5 * v2), strike)
    return OracleResult(price, delta, gamma, vega, tail, bound, n_terms)


def analytic_oracle(kind: str, contract: dict, params: dict) -> OracleResult:
    """``kind`` is ``black-scholes`` or ``merton-series``."""
    base = dict(
        spot=contract["spot"], strike=contract["strike"], maturity=contract["maturity"],
        kind=contract.get("kind", "call"), sigma=params["sigma"],
    )
    if kind == "black-scholes":
        return black_scholes(drift=params.get("drift"), **base)
    if kind == "merton-series":
        return merton_series(
            drift=params["drift"], intensity=params["intensity"], jump_mean=params["jump_mean"],
            jump_sd=params["jump_sd"], n_terms=params.get("n_terms", 50), **base,
        )
    raise ValueError(f"unknown oracle {kind!r}")


def gaussian_band_moment(intensity: float, mean: float, sd: float) -> float:
    """``intensity * E[z; |z| <= 1]`` for ``z ~ N(mean, sd²)``, in closed form."""
    a, b = (-1.0 - mean) / sd, (1.0 - mean) / sd
    mass = stats.norm.cdf(b) - stats.norm.cdf(a)
    return float(intensity * (mean * mass - sd * (stats.norm.pdf(b) - stats.norm.pdf(a))))


def oracle_params(problem: Problem) -> tuple[str, dict, dict] | None:
    """Map a geometric problem with Gaussian or no jumps onto an analytic oracle."""
    m, lv, e = problem.model, problem.levy, problem.eps
    if not m.geometric or problem.payoff.kind not in ("call", "put"):
        return None
    fam = lv.family
    if not isinstance(fam, CompoundPoissonGaussian) or lv.delta != 0.0:
        return None
    contract = dict(spot=problem.x0, strike=problem.payoff.strike,
                    maturity=problem.grid.horizon, kind=problem.payoff.kind)
    s2 = e["sigma2"]
    if fam.intensity == 0.0 or s2 == 0.0:
        return "black-scholes", contract, dict(sigma=e["sigma1"], drift=e["gamma"])
    c1 = gaussian_band_moment(fam.intensity, fam.mark_mean, fam.mark_sd)
    return "merton-series", contract, dict(
        sigma=e["sigma1"], drift=e["gamma"] - s2 * c1, intensity=fam.intensity,
        jump_mean=s2 * fam.mark_mean, jump_sd=abs(s2) * fam.mark_sd,
    )


def analytic_for(problem: Problem) -> dict[str, float] | None:
    mapped = oracle_params(problem)
    if mapped is None:
        return None
    res = analytic_oracle(*mapped)
    return {"price": res.price, "delta": res.delta, "gamma": res.gamma, "vega:sigma1": res.vega}


# ---------------------------------------------------------------------------
# convergence studies


@dataclass(frozen=True)
class StudyRow:
    level: float
    report: EstimatorReport
    extra: float | None = None


@dataclass(frozen=True)
class StudyTable:
    axis: str
    quantity: str
    rows: tuple[StudyRow, ...]
    slope: float | None = None
    ratios: tuple[float, ...] = field(default=())


def _steps_chunk(problem: Problem, seed, chunk, size, levels, n_ref):
    ref_grid = GridSpec(problem.grid.horizon, n_ref, 1)
    ref, a_ref = _terminal(replace(problem, grid=ref_grid), seed, chunk, size)
    out = {}
    bad_all = a_ref.copy()
    for n in levels:
        g = GridSpec(problem.grid.horizon, n, n_ref // n)
        val, a = _terminal(replace(problem, grid=g), seed, chunk, size)
        bad = a | a_ref
        bad_all |= bad
        out[f"diff:{n}"] = _Stat.of((val - ref)[~bad])
        out[f"level:{n}"] = _Stat.of(val[~bad])
    out["__aborted__"] = _Stat(int(bad_all.sum()))
    return out


def convergence_study(
    problem: Problem,
    axis: str,
    levels: Sequence[float],
    n_paths: int,
    seed: int,
    quantity: str = "price",
    mode: str = "full",
    ref_factor: int = 8,
) -> StudyTable:
    """Estimates along one refinement axis: ``n_paths``, ``n_steps`` or ``delta``.

    ``n_paths`` fits the log-log slope of the standard error.  ``n_steps`` estimates the
    weak bias ``E_n - E_ref`` with common noise against a grid ``ref_factor`` times finer
    than the finest level; levels must divide that reference.  ``delta`` reports the
    removed small-jump variance next to each estimate.
    """
    levels = list(levels)
    if len(levels) < 3:
        raise ValueError("a study needs at least 3 levels")

    def run(p: Problem, n: int) -> EstimatorReport:
        if quantity == "price":
            return estimate_greeks_fd_problem(p, ("price",), n, seed)["price"]
        return estimate_greeks_weighted(p, (quantity,), n, seed, mode)[quantity]

    if axis == "n_paths":
        rows = tuple(StudyRow(n, run(problem, int(n))) for n in levels)
        se = np.array([r.report.se for r in rows])
        slope = None
        if np.all(se > 0):
            slope = float(np.polyfit(np.log(levels), np.log(se), 1)[0])
        return StudyTable(axis, quantity, rows, slope)
    if axis == "delta":
        rows = []
        for d in levels:
            lv = replace(problem.levy, delta=float(d))
            rows.append(StudyRow(d, run(replace(problem, levy=lv), n_paths), truncation_bias_proxy(lv)))
        return StudyTable(axis, quantity, tuple(rows))
    if axis == "n_steps":
        if quantity != "price":
            raise ValueError("the n_steps study is defined for the price")
        n_ref = ref_factor * int(max(levels))
        if any(n_ref % int(n) for n in levels):
            raise ValueError("levels must divide the reference grid")
        t0 = time.perf_counter()
        args = [(problem, seed, c, size, tuple(int(n) for n in levels), n_ref) for c, size in _chunks(n_paths)]
        st = _merge(_map_chunks(_steps_chunk, args))
        _check_aborts(st.pop("__aborted__").n, n_paths)
        rows = tuple(
            StudyRow(
                n,
                _report(f"price@{n}", "mc", st[f"level:{n}"], n_paths, seed, int(n), t0, "mc"),
                st[f"diff:{n}"].mean,
            )
            for n in levels
        )
        bias = [abs(r.extra) for r in rows]
        ratios = tuple(b1 / b0 if b0 > 0 else math.nan for b0, b1 in zip(bias[:-1], bias[1:]))
        return StudyTable(axis, quantity, rows, None, ratios)
    raise ValueError(f"unknown axis {axis!r}")

