"""Lévy measure families: densities, scores, truncated sampling and moment quadrature.

Two families are supported, a compound Poisson measure with Gaussian marks and a
tempered-stable measure.  Infinite-activity measures are simulated only above a
truncation level ``delta``.  By default the cut is smoothed by a C¹ taper on
``delta <= |z| <= 2*delta`` so the simulated measure keeps a C¹ density that vanishes at
the boundary; ``truncation="hard"`` gives the plain indicator cut.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Literal

import numpy as np
from scipy import integrate, special
from scipy.interpolate import PchipInterpolator

Region = Literal["inner", "outer", "band", "below", "all"]

QUAD_EPSABS = 1e-14
QUAD_EPSREL = 1e-10
TABLE_POINTS = 2048
TAPER_POINTS = 256
ORDER_FAIL_SLOPE = 0.05
DEFAULT_RHO_GRID = tuple(2.0**-k for k in range(4, 13))


class DomainError(ValueError):
    """Raised when a Lévy-measure quantity is requested outside its domain."""


@dataclass(frozen=True)
class CompoundPoissonGaussian:
    intensity: float
    mark_mean: float = 0.0
    mark_sd: float = 1.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.intensity) and self.intensity >= 0.0):
            raise DomainError("intensity must be finite and >= 0")
        if not (math.isfinite(self.mark_sd) and self.mark_sd > 0.0):
            raise DomainError("mark_sd must be finite and > 0")
        if not math.isfinite(self.mark_mean):
            raise DomainError("mark_mean must be finite")

    @property
    def finite_activity(self) -> bool:
        return True


@dataclass(frozen=True)
class TemperedStable:
    scale: float
    stability: float
    lambda_plus: float
    lambda_minus: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.scale) and self.scale > 0.0):
            raise DomainError("scale must be finite and > 0")
        if not (0.0 < self.stability < 2.0):
            raise DomainError("stability must lie in (0, 2)")
        if not (self.lambda_plus > 0.0 and self.lambda_minus > 0.0):
            raise DomainError("tempering rates must be > 0")

    @property
    def finite_activity(self) -> bool:
        return False


Family = CompoundPoissonGaussian | TemperedStable


@dataclass(frozen=True)
class LevyMeasureSpec:
    """A Lévy measure family together with its simulation cut."""

    family: Family
    delta: float = 0.0
    truncation: Literal["smooth", "hard"] = "smooth"

    def __post_init__(self) -> None:
        if not (math.isfinite(self.delta) and self.delta >= 0.0):
            raise DomainError("truncation level delta must be finite and >= 0")
        if self.truncation not in ("smooth", "hard"):
            raise DomainError(f"unknown truncation mode {self.truncation!r}")
        if not self.family.finite_activity and self.delta == 0.0:
            raise DomainError(
                "tempered-stable measure has infinite activity; delta must be > 0"
            )


@dataclass(frozen=True)
class JumpTrain:
    """Ordered jump times and marks of one path on ``[0, horizon]``."""

    times: np.ndarray
    marks: np.ndarray
    horizon: float

    def __len__(self) -> int:
        return int(self.times.size)


@dataclass(frozen=True)
class JumpBatch:
    """Jump trains of many paths, stored flat and sorted by (path, time)."""

    path_index: np.ndarray
    times: np.ndarray
    marks: np.ndarray
    counts: np.ndarray
    horizon: float = field(default=1.0)

    def train(self, i: int) -> JumpTrain:
        sel = self.path_index == i
        return JumpTrain(self.times[sel], self.marks[sel], self.horizon)


# ---------------------------------------------------------------------------
# densities and scores


def _check_nonzero(z: np.ndarray) -> None:
    if np.any(z == 0.0):
        raise DomainError("the Lévy density is not defined at z = 0")


def _family_density(fam: Family, z: np.ndarray) -> np.ndarray:
    if isinstance(fam, CompoundPoissonGaussian):
        u = (z - fam.mark_mean) / fam.mark_sd
        return fam.intensity * np.exp(-0.5 * u * u) / (fam.mark_sd * math.sqrt(2 * math.pi))
    r = np.abs(z)
    lam = np.where(z > 0, fam.lambda_plus, fam.lambda_minus)
    with np.errstate(over="ignore", divide="ignore"):
        return fam.scale * np.exp(-lam * r) * r ** (-1.0 - fam.stability)


def _family_score(fam: Family, z: np.ndarray) -> np.ndarray:
    if isinstance(fam, CompoundPoissonGaussian):
        return -(z - fam.mark_mean) / fam.mark_sd**2
    lam = np.where(z > 0, fam.lambda_plus, fam.lambda_minus)
    return -np.sign(z) * lam - (1.0 + fam.stability) / z


def density(spec: LevyMeasureSpec, z):
    """Density ``g(z)`` of the (untruncated) Lévy measure."""
    za = np.asarray(z, dtype=float)
    _check_nonzero(za)
    out = _family_density(spec.family, za)
    return float(out) if out.ndim == 0 else out


def score(spec: LevyMeasureSpec, z):
    """Logarithmic derivative ``g'(z)/g(z)`` of the untruncated density."""
    za = np.asarray(z, dtype=float)
    _check_nonzero(za)
    out = _family_score(spec.family, za)
    return float(out) if out.ndim == 0 else out


def taper(spec: LevyMeasureSpec, r):
    """Weight in [0, 1] applied to the density at ``|z| = r`` by the simulation cut."""
    r = np.abs(np.asarray(r, dtype=float))
    d = spec.delta
    if d == 0.0:
        return np.ones_like(r)
    if spec.truncation == "hard":
        return (r >= d).astype(float)
    s = np.clip((r - d) / d, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _taper_log_slope(spec: LevyMeasureSpec, z: np.ndarray) -> np.ndarray:
    """d/dz log taper(|z|), zero outside the taper zone."""
    d = spec.delta
    if d == 0.0 or spec.truncation == "hard":
        return np.zeros_like(z)
    r = np.abs(z)
    s = np.clip((r - d) / d, 0.0, 1.0)
    inside = (s > 0.0) & (s < 1.0)
    ss = np.where(inside, s, 0.5)
    slope = 6.0 * (1.0 - ss) / (ss * (3.0 - 2.0 * ss) * d)
    return np.where(inside, np.sign(z) * slope, 0.0)


def effective_density(spec: LevyMeasureSpec, z):
    """Density of the measure that is actually simulated."""
    za = np.asarray(z, dtype=float)
    _check_nonzero(za)
    return _family_density(spec.family, za) * taper(spec, za)


def effective_score(spec: LevyMeasureSpec, z):
    """Score of the simulated density; valid wherever that density is positive."""
    za = np.asarray(z, dtype=float)
    _check_nonzero(za)
    return _family_score(spec.family, za) + _taper_log_slope(spec, za)


def boundary_densities(spec: LevyMeasureSpec) -> tuple[float, float]:
    """Simulated density just inside the cut at ``-delta`` and ``+delta``.

    These values feed the boundary-flux form of the jump compensators.  They vanish
    when there is no cut or when the cut is smooth.
    """
    if spec.delta == 0.0 or spec.truncation == "smooth":
        return 0.0, 0.0
    d = spec.delta
    return float(density(spec, -d)), float(density(spec, d))


# ---------------------------------------------------------------------------
# quadrature


def _quad(f: Callable[[float], float], a: float, b: float) -> float:
    val, _ = integrate.quad(f, a, b, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=400)
    return float(val)


def _integrate_radial(h: Callable[[float], float], lo: float, hi: float) -> float:
    """Integrate ``h(r)`` over ``lo <= r <= hi`` (hi may be inf) in the variable log r."""
    if hi <= lo:
        return 0.0

    def k(u: float) -> float:
        r = math.exp(u)
        return h(r) * r

    if lo == 0.0:
        mid = min(hi, 1.0)
        head = _quad(h, 0.0, mid)
        return head + (_integrate_radial(h, mid, hi) if hi > mid else 0.0)
    a = math.log(lo)
    if math.isinf(hi):
        cut = max(lo, 1.0) * math.e
        return _quad(k, a, math.log(cut)) + _quad(h, cut, math.inf)
    return _quad(k, a, math.log(hi))


def _side_integral(
    spec: LevyMeasureSpec,
    f: Callable[[float], float],
    sign: int,
    lo: float,
    hi: float,
    effective: bool,
) -> float:
    """Integral of ``f(z) nu(dz)`` over ``z = sign * r`` with ``lo <= r <= hi``."""
    fam = spec.family
    if isinstance(fam, CompoundPoissonGaussian) and fam.intensity == 0.0:
        return 0.0

    def h(r: float) -> float:
        if r == 0.0:
            return 0.0
        z = sign * r
        g = float(_family_density(fam, np.asarray(z)))
        if effective:
            g *= float(taper(spec, r))
        return f(z) * g

    cuts = sorted({lo, hi, *(c for c in (spec.delta, 2 * spec.delta, 1.0) if lo < c < hi)})
    return sum(_integrate_radial(h, p, q) for p, q in zip(cuts[:-1], cuts[1:]))


def _region_bounds(spec: LevyMeasureSpec, region: Region) -> tuple[float, float]:
    d = spec.delta
    return {
        "inner": (0.0, 1.0),
        "outer": (1.0, math.inf),
        "band": (d, 1.0),
        "below": (0.0, d),
        "all": (0.0, math.inf),
    }[region]


def mass_above(spec: LevyMeasureSpec, delta_prime: float) -> float:
    """nu({|z| >= delta_prime}) for the untruncated measure."""
    fam = spec.family
    if math.isinf(delta_prime):
        return 0.0
    if isinstance(fam, CompoundPoissonGaussian):
        if delta_prime <= 0.0:
            return fam.intensity
        up = special.ndtr((fam.mark_mean - delta_prime) / fam.mark_sd)
        dn = special.ndtr((-delta_prime - fam.mark_mean) / fam.mark_sd)
        return float(fam.intensity * (up + dn))
    if delta_prime <= 0.0:
        raise DomainError("infinite-activity measure has infinite total mass")
    one = lambda z: 1.0  # noqa: E731
    return _side_integral(spec, one, 1, delta_prime, math.inf, False) + _side_integral(
        spec, one, -1, delta_prime, math.inf, False
    )


def nu_moment(
    spec: LevyMeasureSpec,
    p: float,
    region: Region,
    signed: bool = False,
    effective: bool = False,
) -> float:
    """``∫_region z^p nu(dz)`` (signed) or ``∫_region |z|^p nu(dz)``.

    With ``effective=True`` the measure is the simulated one (cut and taper applied).
    """
    if p < 0:
        raise DomainError("moment order must be >= 0")
    lo, hi = _region_bounds(spec, region)
    fam = spec.family
    if lo == 0.0 and isinstance(fam, TemperedStable) and p <= fam.stability and not effective:
        raise DomainError(
            f"moment of order {p} diverges near 0 for stability {fam.stability}"
        )
    if effective and spec.delta > 0.0:
        lo = max(lo, spec.delta)
    if signed and p != int(p):
        raise DomainError("signed moments need an integer order")
    total = 0.0
    for sign in (1, -1):
        parity = sign ** int(p) if signed else 1
        f = lambda z, c=parity: c * abs(z) ** p  # noqa: E731
        total += _side_integral(spec, f, sign, lo, hi, effective)
    return float(total)


def simulated_mass(spec: LevyMeasureSpec) -> float:
    """Total mass of the simulated measure (the jump intensity used by the sampler)."""
    fam = spec.family
    if spec.delta == 0.0:
        return mass_above(spec, 0.0)
    return nu_moment(spec, 0.0, "all", effective=True)


def truncation_bias_proxy(spec: LevyMeasureSpec) -> float:
    """Variance of the jumps removed by the cut, ``∫ z² (1 - taper) nu(dz)``."""
    if spec.delta == 0.0:
        return 0.0
    fam = spec.family
    if isinstance(fam, TemperedStable) and fam.stability >= 2.0:
        raise DomainError("small-jump variance diverges")
    below = nu_moment(spec, 2.0, "below")
    if spec.truncation == "hard":
        return below
    d = spec.delta
    f = lambda z: z * z * (1.0 - float(taper(spec, z)))  # noqa: E731
    return below + sum(_side_integral(spec, f, s, d, 2 * d, False) for s in (1, -1))


def band_quadrature(spec: LevyMeasureSpec, n: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights with ``Σ w f(z) ≈ ∫_{|z|<=1} f(z) nu_sim(dz)`` for smooth f."""
    x, w = np.polynomial.legendre.leggauss(n)
    nodes, weights = [], []
    d = spec.delta
    if d >= 1.0:
        return np.zeros(0), np.zeros(0)
    if d == 0.0:
        pieces = [(0.0, 1.0, False)]
    else:
        pieces = [(d, min(2 * d, 1.0), True), (min(2 * d, 1.0), 1.0, True)]
    for lo, hi, logspace in pieces:
        if hi <= lo:
            continue
        if logspace:
            a, b = math.log(lo), math.log(hi)
            u = 0.5 * (b - a) * x + 0.5 * (a + b)
            r = np.exp(u)
            wr = 0.5 * (b - a) * w * r
        else:
            r = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
            wr = 0.5 * (hi - lo) * w
        for sign in (1.0, -1.0):
            z = sign * r
            nodes.append(z)
            weights.append(wr * _family_density(spec.family, z) * taper(spec, z))
    return np.concatenate(nodes), np.concatenate(weights)


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class _InverseTable:
    mass: float
    inverse: PchipInterpolator


@lru_cache(maxsize=64)
def _ts_table(spec: LevyMeasureSpec, sign: int) -> _InverseTable:
    fam = spec.family
    assert isinstance(fam, TemperedStable)
    lam = fam.lambda_plus if sign > 0 else fam.lambda_minus
    d = spec.delta
    r_max = max(2 * d, 1.0) + 45.0 / lam
    if spec.truncation == "smooth":
        g1 = np.geomspace(d, 2 * d, TAPER_POINTS)
        g2 = np.geomspace(2 * d, r_max, TABLE_POINTS - TAPER_POINTS + 1)[1:]
        grid = np.concatenate([g1, g2])
    else:
        grid = np.geomspace(d, r_max, TABLE_POINTS)
    x, w = np.polynomial.legendre.leggauss(16)
    a, b = np.log(grid[:-1]), np.log(grid[1:])
    u = 0.5 * (b - a)[:, None] * x[None, :] + 0.5 * (a + b)[:, None]
    r = np.exp(u)
    vals = _family_density(fam, sign * r) * taper(spec, r) * r
    pieces = 0.5 * (b - a) * (vals @ w)
    cdf = np.concatenate([[0.0], np.cumsum(pieces)])
    mass = float(cdf[-1])
    cdf /= mass
    keep = np.concatenate([[True], np.diff(cdf) > 0.0])
    return _InverseTable(mass, PchipInterpolator(cdf[keep], grid[keep]))


def _sample_marks(spec: LevyMeasureSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    fam = spec.family
    if n == 0:
        return np.zeros(0)
    if isinstance(fam, CompoundPoissonGaussian):
        out = np.empty(n)
        filled = 0
        while filled < n:
            need = n - filled
            z = fam.mark_mean + fam.mark_sd * rng.standard_normal(need)
            if spec.delta > 0.0:
                u = rng.uniform(size=need)
                z = z[u < taper(spec, z)]
            z = z[z != 0.0]
            out[filled : filled + z.size] = z
            filled += z.size
        return out
    plus, minus = _ts_table(spec, 1), _ts_table(spec, -1)
    p_plus = plus.mass / (plus.mass + minus.mass)
    side = rng.uniform(size=n) < p_plus
    u = rng.uniform(size=n)
    r = np.where(side, plus.inverse(u), minus.inverse(u))
    r = np.maximum(r, spec.delta)
    return np.where(side, r, -r)


def sample_jumps(spec: LevyMeasureSpec, T: float, rng: np.random.Generator) -> JumpTrain:
    """Jump train on ``[0, T]`` of the simulated measure."""
    batch = sample_jump_batch(spec, T, 1, rng)
    return JumpTrain(batch.times, batch.marks, T)


def sample_jump_batch(
    spec: LevyMeasureSpec, T: float, n_paths: int, rng: np.random.Generator
) -> JumpBatch:
    if T <= 0.0:
        raise DomainError("horizon must be > 0")
    mass = simulated_mass_cached(spec)
    counts = rng.poisson(T * mass, size=n_paths) if mass > 0 else np.zeros(n_paths, int)
    total = int(counts.sum())
    times = rng.uniform(0.0, T, size=total)
    marks = _sample_marks(spec, total, rng)
    path_index = np.repeat(np.arange(n_paths), counts)
    order = np.lexsort((times, path_index))
    return JumpBatch(path_index, times[order], marks[order], counts, T)


@lru_cache(maxsize=64)
def simulated_mass_cached(spec: LevyMeasureSpec) -> float:
    if isinstance(spec.family, TemperedStable):
        return _ts_table(spec, 1).mass + _ts_table(spec, -1).mass
    return simulated_mass(spec)


@lru_cache(maxsize=64)
def band_moment_cached(spec: LevyMeasureSpec) -> float:
    """Signed first moment of the simulated measure on ``|z| <= 1``."""
    if spec.delta >= 1.0:
        return 0.0
    return nu_moment(spec, 1.0, "band", signed=True, effective=True)


# ---------------------------------------------------------------------------
# order condition


def order_integral(spec: LevyMeasureSpec, rho: float) -> float:
    """``I(rho) = ∫ min(z²/rho², 1) nu(dz)`` for the untruncated measure."""
    sq = lambda z: z * z  # noqa: E731
    inner = sum(_side_integral(spec, sq, s, 0.0, rho, False) for s in (1, -1))
    return inner / rho**2 + mass_above(spec, rho)


def order_exponent_estimate(
    spec: LevyMeasureSpec, rho_grid=DEFAULT_RHO_GRID
) -> float | None:
    """Fitted growth exponent of ``I(rho)`` as rho -> 0, or None when I stays bounded."""
    rho = np.asarray(rho_grid, dtype=float)
    if np.any((rho <= 0) | (rho >= 1)):
        raise DomainError("rho values must lie in (0, 1)")
    vals = np.array([order_integral(spec, float(r)) for r in rho])
    if np.any(vals <= 0):
        return None
    slope = float(np.polyfit(np.log(1.0 / rho), np.log(vals), 1)[0])
    return None if slope < ORDER_FAIL_SLOPE else slope
