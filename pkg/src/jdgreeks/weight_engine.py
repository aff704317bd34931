"""Malliavin weights for delta, parameter sensitivities and gamma.

The weights are assembled from per-path sums that are accumulated while the path is
simulated (:class:`WeightAccumulator`) or recomputed from a recorded
:class:`~jdgreeks.path_engine.PathState`.  Both routes share the per-interval and
per-jump terms below, so they agree to rounding.

Sums are kept separately on the two segments ``[0, T/2)`` and ``[T/2, T]`` because the
gamma weight multiplies first-order weights of the two halves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .coeff_models import CoefficientModel, ParamVector
from .levy_models import (
    LevyMeasureSpec,
    band_moment_cached,
    band_quadrature,
    boundary_densities,
    effective_score,
)
from .path_engine import JumpEvent, PathState, SubStep

Mode = Literal["full", "diffusion-only", "jump-only"]
MODES: tuple[str, ...] = ("full", "diffusion-only", "jump-only")


class WeightUndefinedError(ValueError):
    """The requested weight does not exist for this path or model."""


class UnsupportedWeightError(NotImplementedError):
    """The weight needs a term outside the implemented class; use the FD oracle."""


@dataclass(frozen=True)
class SegmentFunctionals:
    tau: float
    t: float
    L: float
    J: float
    K: float
    A: float


# ---------------------------------------------------------------------------
# per-interval and per-jump terms


class _Terms:
    def __init__(
        self,
        model: CoefficientModel,
        levy: LevyMeasureSpec,
        eps,
        params: Sequence[str],
        vega_form: str = "compensated",
    ) -> None:
        self.model = model
        self.levy = levy
        self.eps = ParamVector(eps)
        self.params = tuple(params)
        self.vega_form = vega_form
        self.delta = levy.delta
        self.g_lo, self.g_hi = boundary_densities(levy)
        self.hard = self.g_lo != 0.0 or self.g_hi != 0.0
        self.m1 = band_moment_cached(levy)
        if vega_form == "literal" or not model.linear_in_z:
            self.q_nodes, self.q_weights = band_quadrature(levy)

    # jump-coefficient pieces at (x, z) ------------------------------------
    def _v_parts(self, x, Z, z):
        m, e = self.model, self.eps
        one = 1.0 + m.db_dy(e, x, z)
        bz = m.db_dz(e, x, z)
        bzz = m.d2b_dz2(e, x, z)
        byz = m.d2b_dydz(e, x, z)
        v = one * Z * z * z / bz
        dv = Z * ((byz * z * z + 2.0 * one * z) / bz - one * z * z * bzz / (bz * bz))
        return one, bz, bzz, byz, v, dv

    def _f_parts(self, x, Z, DZ, z):
        """``F = F2 + F3`` and its z-derivative."""
        m, e = self.model, self.eps
        one, bz, bzz, byz, v, dv = self._v_parts(x, Z, z)
        byy = m.d2b_dy2(e, x, z)
        X = byy * Z * Z + one * DZ
        dX = m.d3b_dy2dz(e, x, z) * Z * Z + byz * DZ
        z2 = z * z
        F2 = -X * z2 / bz
        dF2 = -(dX * z2 + 2.0 * X * z) / bz + X * z2 * bzz / (bz * bz)
        F3 = byz * Z * v / bz
        dF3 = Z * ((m.d3b_dydz2(e, x, z) * v + byz * dv) / bz - byz * v * bzz / (bz * bz))
        return F2 + F3, dF2 + dF3

    def _vt_parts(self, p, x, z):
        m, e = self.model, self.eps
        bz = m.db_dz(e, x, z)
        be = m.db_de(p, e, x, z)
        vt = be / bz
        dvt = m.d2b_dzde(p, e, x, z) / bz - be * m.d2b_dz2(e, x, z) / (bz * bz)
        return vt, dvt

    # boundary fluxes, nonzero only under a hard cut ------------------------
    def _flux_v(self, x, Z):
        d = self.delta
        lo = self._v_parts(x, Z, -d)[4]
        hi = self._v_parts(x, Z, d)[4]
        return self.g_lo * lo - self.g_hi * hi

    def _flux_F(self, x, Z, DZ):
        d = self.delta
        return self.g_lo * self._f_parts(x, Z, DZ, -d)[0] - self.g_hi * self._f_parts(x, Z, DZ, d)[0]

    def _flux_vt(self, p, x):
        d = self.delta
        return self.g_lo * self._vt_parts(p, x, -d)[0] - self.g_hi * self._vt_parts(p, x, d)[0]

    # vega integrands -------------------------------------------------------
    def f0(self, p, x, Z):
        m, e = self.model, self.eps
        drift = m.da0_de(p, e, x)
        if "jump" in m.touches(p):
            if self.vega_form == "literal":
                xn = np.asarray(x)[..., None]
                by = m.db_dy(e, xn, self.q_nodes)
                vals = by / (1.0 + by) * m.db_de(p, e, xn, self.q_nodes)
                drift = drift - vals @ self.q_weights
            elif self.model.linear_in_z:
                drift = drift - self.m1 * m.db_de(p, e, x, 1.0)
            else:
                xn = np.asarray(x)[..., None]
                drift = drift - m.db_de(p, e, xn, self.q_nodes) @ self.q_weights
        return drift / Z

    def f(self, p, x, Z):
        return self.model.da_de(p, self.eps, x) / Z

    # public term builders ---------------------------------------------------
    def substep(self, x, Z, DZ, x1, Z1, DZ1, h, dW):
        m, e = self.model, self.eps
        a = m.a(e, x)
        za = Z / a
        out = {
            "L": dW * za,
            "F1": dW * (m.dinv_a(e, x) * Z * Z + DZ / a),
        }
        if self.hard:
            out["flux"] = 0.5 * h * (self._flux_v(x, Z) + self._flux_v(x1, Z1))
            out["Fflux"] = 0.5 * h * (self._flux_F(x, Z, DZ) + self._flux_F(x1, Z1, DZ1))
        P = len(self.params)
        if P:
            Leps = np.empty((P,) + np.shape(x))
            G = np.empty_like(Leps)
            Q = np.empty_like(Leps)
            for i, p in enumerate(self.params):
                f_lo = self.f(p, x, Z)
                Leps[i] = dW * za * self.f0(p, x, Z)
                G[i] = 0.5 * (f_lo + self.f(p, x1, Z1)) * dW
                Q[i] = za * f_lo * h
            out.update(Leps=Leps, G=G, Q=Q)
            if self.hard and any("jump" in m.touches(p) for p in self.params):
                out["Jeps_flux"] = np.stack(
                    [
                        0.5 * h * (self._flux_vt(p, x) + self._flux_vt(p, x1))
                        for p in self.params
                    ]
                )
        return out

    def jump(self, z, x, Z, DZ):
        sc = effective_score(self.levy, z)
        _, _, _, _, v, dv = self._v_parts(x, Z, z)
        F, dF = self._f_parts(x, Z, DZ, z)
        out = {
            "A": z * z,
            "K": 2.0 * z * v,
            "J": sc * v + dv,
            "Fdiv": sc * F + dF,
            "F2z": 2.0 * z * F,
            "zsum": z,
        }
        if self.params:
            Jeps = np.empty((len(self.params),) + np.shape(z))
            for i, p in enumerate(self.params):
                vt, dvt = self._vt_parts(p, x, z)
                Jeps[i] = sc * vt + dvt
            out["Jeps"] = Jeps
        return out


def jump_integrand(model, levy, eps, x, Z, z):
    """``psi(z) = score(z) v(z) + v'(z)``, so that ``g psi = (g v)'``."""
    t = _Terms(model, levy, eps, ())
    _, _, _, _, v, dv = t._v_parts(x, Z, z)
    return effective_score(levy, z) * v + dv


def boundary_flux(model, levy, eps, x, Z, hard: bool = True):
    """``g(-delta) v(-delta) - g(delta) v(delta)`` with ``g`` the density inside the cut."""
    from .levy_models import density

    t = _Terms(model, levy, eps, ())
    d = levy.delta
    if d == 0.0:
        return 0.0
    g_lo, g_hi = (density(levy, -d), density(levy, d)) if hard else boundary_densities(levy)
    return g_lo * t._v_parts(x, Z, -d)[4] - g_hi * t._v_parts(x, Z, d)[4]


SEG_KEYS = ("L", "F1", "flux", "Fflux", "A", "K", "J", "Fdiv", "F2z", "zsum")
PAR_KEYS = ("Leps", "G", "Q", "Jeps", "Jeps_flux")


@dataclass
class WeightSums:
    """Per-path sums; segment keys have shape (2, n), parameter keys (P, n)."""

    seg: dict[str, np.ndarray]
    par: dict[str, np.ndarray]
    params: tuple[str, ...]
    horizon: float
    split: float
    delta: float

    @classmethod
    def zeros(cls, n, params, horizon, split, delta) -> "WeightSums":
        return cls(
            {k: np.zeros((2, n)) for k in SEG_KEYS},
            {k: np.zeros((len(params), n)) for k in PAR_KEYS},
            tuple(params),
            horizon,
            split,
            delta,
        )

    def total(self, key: str) -> np.ndarray:
        return self.seg[key][0] + self.seg[key][1]


class WeightAccumulator:
    """Observer that accumulates :class:`WeightSums` while the batch is simulated."""

    def __init__(self, model, levy, eps, params, n_paths, horizon, vega_form="compensated",
                 mode: str = "full"):
        self.terms = _Terms(model, levy, eps, params, vega_form)
        self.sums = WeightSums.zeros(n_paths, params, horizon, 0.5 * horizon, levy.delta)
        self.use_jumps = mode != "diffusion-only"

    def on_substep(self, s: SubStep) -> None:
        t = self.terms.substep(s.x, s.Z, s.DZ, s.x1, s.Z1, s.DZ1, s.h, s.dW)
        seg = s.seg
        for k, v in t.items():
            if k in self.sums.seg:
                self.sums.seg[k][0] += np.where(seg, 0.0, v)
                self.sums.seg[k][1] += np.where(seg, v, 0.0)
            else:
                self.sums.par[k] += v

    def on_jump(self, j: JumpEvent) -> None:
        if not self.use_jumps:
            return
        t = self.terms.jump(j.z, j.x, j.Z, j.DZ)
        s = j.seg.astype(np.int64)
        for k, v in t.items():
            if k in self.sums.seg:
                self.sums.seg[k][s, j.idx] += v
            else:
                self.sums.par[k][:, j.idx] += v


def path_sums(path: PathState, model=None, eps=None, params=None, vega_form="compensated",
              tau: float = 0.0, t: float | None = None, mode: str = "full") -> WeightSums:
    """Recompute the weight sums of a recorded path over ``[tau, t]``."""
    model = model or path.model
    eps = ParamVector(path.eps if eps is None else eps)
    params = tuple(path.params if params is None else params)
    T = path.grid.horizon
    t = T if t is None else t
    terms = _Terms(model, path.levy, eps, params, vega_form)
    sums = WeightSums.zeros(1, params, T, 0.5 * T, path.levy.delta)
    start = path.t[:-1]
    sel = (start >= tau) & (start < t)
    if not sel.any():
        return sums
    seg = (start >= sums.split)[sel].astype(np.int64)
    x, Z, DZ = path.x[:-1][sel], path.Z[:-1][sel], path.DZ[:-1][sel]
    x1, Z1, DZ1 = path.x_minus[sel], path.Z_minus[sel], path.DZ_minus[sel]
    st = terms.substep(x, Z, DZ, x1, Z1, DZ1, path.dt[sel], path.dW[sel])
    for k, v in st.items():
        if k in sums.seg:
            for s in (0, 1):
                sums.seg[k][s, 0] += v[seg == s].sum()
        else:
            sums.par[k][:, 0] += v.sum(axis=1)
    jm = path.jump_mark[sel]
    hit = jm != 0.0
    if hit.any() and mode != "diffusion-only":
        jt = terms.jump(jm[hit], x1[hit], Z1[hit], DZ1[hit])
        jseg = seg[hit]
        for k, v in jt.items():
            if k in sums.seg:
                for s in (0, 1):
                    sums.seg[k][s, 0] += v[jseg == s].sum()
            else:
                sums.par[k][:, 0] += v.sum(axis=1)
    return sums


# ---------------------------------------------------------------------------
# assembly


def _seg_gamma1(L, J, K, A):
    return (L - J) / A + K / (A * A)


def check_supported(model: CoefficientModel, levy: LevyMeasureSpec, eps, param: str, mode: str) -> None:
    """Raise UnsupportedWeightError when the sensitivity weight for ``param`` is unavailable."""
    model.check_param_name(param)
    touched = model.touches(param)
    if "diffusion" in touched and not model.deterministic_f(param, eps):
        raise UnsupportedWeightError(
            f"weight for {param!r} needs the Malliavin derivative of a random integrand; "
            "use the finite-difference estimator"
        )
    if mode == "diffusion-only" and "jump" in touched:
        raise UnsupportedWeightError(
            f"diffusion-only weights cannot carry the jump dependence of {param!r}"
        )
    if mode == "jump-only":
        if touched & {"drift", "diffusion"}:
            raise UnsupportedWeightError(
                f"jump-only weights cannot carry the continuous dependence of {param!r}"
            )
        if band_moment_cached(levy) != 0.0:
            raise UnsupportedWeightError(
                f"jump-only weight for {param!r} needs a vanishing compensator drift"
            )


def check_mode(model: CoefficientModel, levy: LevyMeasureSpec, eps, mode: str) -> None:
    """Raise WeightUndefinedError when the mode's non-degeneracy conditions fail."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    from .levy_models import simulated_mass_cached

    has_jumps = simulated_mass_cached(levy) > 0.0
    if mode in ("full", "diffusion-only") and not model.elliptic_diffusion(eps):
        raise WeightUndefinedError("diffusion coefficient vanishes; Brownian weights undefined")
    if mode in ("full", "jump-only") and has_jumps and not model.elliptic_jump(eps):
        raise WeightUndefinedError("jump coefficient is degenerate in z; jump weights undefined")
    if mode == "jump-only" and not has_jumps:
        raise WeightUndefinedError("jump-only weights need a measure with positive mass")


def assemble(
    sums: WeightSums,
    mode: str = "full",
    gamma3_form: str = "corrected",
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Weights per quantity as ``(values, valid)`` arrays over paths.

    Keys: ``delta``, ``gamma``, and ``vega:<param>`` for every parameter of the sums.
    """
    T, Tt = sums.horizon, sums.split
    S = sums.seg
    L = S["L"]
    J = S["J"] - S["flux"]
    K = S["K"]
    Ajump = S["A"]
    n = L.shape[1]
    ones = np.ones(n, dtype=bool)
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    if mode == "full":
        A_seg = Ajump + np.array([[Tt], [T - Tt]])
        A_tot = T + Ajump[0] + Ajump[1]
        g1 = _seg_gamma1(L[0] + L[1], J[0] + J[1], K[0] + K[1], A_tot)
        valid1 = ones
    elif mode == "diffusion-only":
        g1 = (L[0] + L[1]) / T
        valid1 = ones
    else:
        A_seg = Ajump.copy()
        A_tot = Ajump[0] + Ajump[1]
        valid1 = A_tot > 0.0
        with np.errstate(all="ignore"):
            g1 = _seg_gamma1(0.0, J[0] + J[1], K[0] + K[1], A_tot)
    out["delta"] = (np.where(valid1, g1, 0.0), valid1)

    with np.errstate(all="ignore"):
        if mode == "diffusion-only":
            g3 = L[1] * L[0] / ((T - Tt) * Tt) + S["F1"][0] / Tt
            valid3 = ones
        else:
            Lj = L if mode == "full" else np.zeros_like(L)
            A0, A1 = A_seg[0], A_seg[1]
            valid3 = (A0 > 0.0) & (A1 > 0.0)
            g_lo = _seg_gamma1(Lj[0], J[0], K[0], A0)
            g_hi = _seg_gamma1(Lj[1], J[1], K[1], A1)
            F1 = S["F1"][0] if mode == "full" else 0.0
            d2 = sums.delta * sums.delta
            g3 = (
                g_hi * g_lo
                + (F1 + S["Fdiv"][0]) / A0
                - S["F2z"][0] / (A0 * A0)
                - S["Fflux"][0] / (A0 + d2)
            )
            if gamma3_form == "printed":
                g3 = g3 + K[1] / (A1 * A0) * g_lo + K[1] * K[0] / (A1 * A0**3)
            elif gamma3_form != "corrected":
                raise ValueError(f"unknown gamma3 form {gamma3_form!r}")
    out["gamma"] = (np.where(valid3, g3, 0.0), valid3)

    Pd = sums.par
    Ltot = L[0] + L[1]
    for i, p in enumerate(sums.params):
        jeps = Pd["Jeps"][i] - Pd["Jeps_flux"][i]
        if mode == "full":
            g2 = Pd["Leps"][i] + (Ltot * Pd["G"][i] - Pd["Q"][i]) / T - jeps
        elif mode == "diffusion-only":
            g2 = Pd["Leps"][i] + (Ltot * Pd["G"][i] - Pd["Q"][i]) / T
        else:
            g2 = -jeps
        out[f"vega:{p}"] = (g2, ones)
    return out


def geometric_transform(weights: dict, spot: float) -> dict:
    """Chain rule from log-state weights to spot weights."""
    if not spot > 0.0:
        raise ValueError("spot must be > 0")
    out = dict(weights)
    if "delta" in weights:
        g1, v1 = weights["delta"]
        out["delta"] = (g1 / spot, v1)
    if "gamma" in weights:
        g1, v1 = weights["delta"]
        g3, v3 = weights["gamma"]
        out["gamma"] = ((g3 - g1) / spot**2, v1 & v3)
    return out


def transform_first(weight, x: float):
    """Spot delta weight from the log-state delta weight."""
    if not x > 0.0:
        raise ValueError("x must be > 0")
    return weight / x


def transform_second(weight2, weight1, x: float):
    """Spot gamma weight from the log-state gamma and delta weights."""
    if not x > 0.0:
        raise ValueError("x must be > 0")
    return (weight2 - weight1) / (x * x)


def example_variants(sums: WeightSums, eps) -> dict[str, np.ndarray]:
    """Alternative weight forms for the additive model, for reporting only.

    ``delta_example_K`` uses ``K = Σ z/σ2``; ``vega_sigma2_example`` uses ``L + J`` with
    the first-order jump sum; ``gamma_printed`` adds the cross terms of the printed
    second-order formula.
    """
    eps = ParamVector(eps)
    T = sums.horizon
    S = sums.seg
    L = S["L"][0] + S["L"][1]
    J = S["J"][0] + S["J"][1] - S["flux"][0] - S["flux"][1]
    A = T + S["A"][0] + S["A"][1]
    k_ex = (S["zsum"][0] + S["zsum"][1]) / eps["sigma2"]
    out = {
        "delta_example_K": (L - J) / A + k_ex / (A * A),
        "gamma_printed": assemble(sums, "full", "printed")["gamma"][0],
    }
    if "sigma2" in sums.params:
        i = sums.params.index("sigma2")
        out["vega_sigma2_example"] = sums.par["Leps"][i] + J
    return out


# ---------------------------------------------------------------------------
# single-path API


def _check_path(path: PathState, model, eps, mode):
    check_mode(model, path.levy, eps, mode)


def segment_functionals(path: PathState, model=None, eps=None, tau: float = 0.0, t: float | None = None) -> SegmentFunctionals:
    """``(L, J, K, A)`` of a recorded path over ``[tau, t]``; both must be grid nodes."""
    model = model or path.model
    eps = ParamVector(path.eps if eps is None else eps)
    T = path.grid.horizon
    t = T if t is None else t
    nodes = np.concatenate([path.t, [T]])
    if not (0.0 <= tau < t <= T):
        raise ValueError("need 0 <= tau < t <= T")
    if not (np.isclose(nodes, tau, rtol=0, atol=1e-14).any() and np.isclose(nodes, t, rtol=0, atol=1e-14).any()):
        raise ValueError("segment endpoints must be nodes of the path grid")
    sel = (path.t[:-1] >= tau) & (path.t[:-1] < t)
    if not model.elliptic_diffusion(eps):
        raise WeightUndefinedError("diffusion coefficient vanishes")
    if (path.jump_mark[sel] != 0.0).any() and not model.elliptic_jump(eps):
        raise WeightUndefinedError("jump coefficient is degenerate in z")
    s = path_sums(path, model, eps, params=(), tau=tau, t=t)
    return SegmentFunctionals(
        tau,
        t,
        float(s.total("L")[0]),
        float(s.total("J")[0] - s.total("flux")[0]),
        float(s.total("K")[0]),
        float((t - tau) + s.total("A")[0]),
    )


def _weights_of_path(path, model, eps, mode, params, vega_form="compensated", gamma3_form="corrected"):
    model = model or path.model
    eps = ParamVector(path.eps if eps is None else eps)
    _check_path(path, model, eps, mode)
    for p in params:
        check_supported(model, path.levy, eps, p, mode)
    sums = path_sums(path, model, eps, params, vega_form, mode=mode)
    w = assemble(sums, mode, gamma3_form)
    return {k: (float(v[0]) if ok[0] else None) for k, (v, ok) in w.items()}


def gamma1(path: PathState, model=None, eps=None, mode: str = "full") -> float:
    w = _weights_of_path(path, model, eps, mode, ())["delta"]
    if w is None:
        raise WeightUndefinedError("no jumps on the path; jump-only weight undefined")
    return w


def gamma2(path: PathState, model=None, eps=None, param: str = "", mode: str = "full",
           vega_form: str = "compensated") -> float:
    return _weights_of_path(path, model, eps, mode, (param,), vega_form)[f"vega:{param}"]


def gamma3(path: PathState, model=None, eps=None, mode: str = "full", form: str = "corrected") -> float:
    w = _weights_of_path(path, model, eps, mode, (), gamma3_form=form)["gamma"]
    if w is None:
        raise WeightUndefinedError("a half-segment has no jumps; jump-only weight undefined")
    return w


def special_weights(path: PathState, model=None, eps=None, mode: str = "diffusion-only") -> dict:
    """Reduced weights of the diffusion-only or jump-only special case.

    Parameter weights are returned for every parameter the mode supports.
    """
    if mode not in ("diffusion-only", "jump-only"):
        raise ValueError("mode must be 'diffusion-only' or 'jump-only'")
    model = model or path.model
    eps = ParamVector(path.eps if eps is None else eps)
    params = []
    for p in path.params:
        try:
            check_supported(model, path.levy, eps, p, mode)
            params.append(p)
        except UnsupportedWeightError:
            pass
    return _weights_of_path(path, model, eps, mode, tuple(params))
