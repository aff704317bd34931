"""Euler simulation of the state and its variation processes on a jump-merged grid.

Paths are advanced in lockstep, vectorised over a batch.  Each base step is cut at the
jump times of every path (and at the split time ``T/2`` when it is not a base node);
Brownian increments of the pieces come from a Brownian bridge on the base increment,
so the driving noise of the base grid never depends on the jumps.

Along with ``x`` the engine carries ``Z = ∂x/∂x0``, ``DZ = ∂Z/∂x0`` and
``H[p] = ∂x/∂p``.  These are the exact derivatives of the discrete scheme, so common
random number bumps reproduce them to second order in the bump size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .coeff_models import CoefficientModel, ParamVector
from .levy_models import (
    JumpTrain,
    LevyMeasureSpec,
    band_moment_cached,
    band_quadrature,
    sample_jump_batch,
)


class PathAbortError(RuntimeError):
    """A path left the valid state space (non-finite state or degenerate jump)."""

    def __init__(self, step: int, reason: str = "non-finite state") -> None:
        super().__init__(f"path aborted at step {step}: {reason}")
        self.step = step


@dataclass(frozen=True)
class GridSpec:
    horizon: float
    n_steps: int
    noise_refinement: int = 1

    def __post_init__(self) -> None:
        if not (math.isfinite(self.horizon) and self.horizon > 0.0):
            raise ValueError("horizon must be > 0")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.noise_refinement < 1:
            raise ValueError("noise_refinement must be >= 1")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def split(self) -> float:
        return self.horizon * 0.5

    def node(self, k: int) -> float:
        return self.horizon * (k / self.n_steps)


@dataclass(frozen=True)
class Bump:
    target: str
    size: float


def chunk_streams(seed: int, chunk: int) -> tuple[np.random.Generator, ...]:
    """Counter-based streams (jumps, Brownian, bridge) for one chunk of paths."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(chunk),))
    return tuple(np.random.Generator(np.random.Philox(k)) for k in ss.spawn(3))


# ---------------------------------------------------------------------------
# observer protocol


@dataclass
class SubStep:
    """One Euler piece ``[t0, t0 + h]`` for every path of the batch."""

    step: int
    t0: np.ndarray
    h: np.ndarray
    dW: np.ndarray
    seg: np.ndarray
    x: np.ndarray
    x1: np.ndarray
    comp: np.ndarray
    Z: np.ndarray | None = None
    Z1: np.ndarray | None = None
    DZ: np.ndarray | None = None
    DZ1: np.ndarray | None = None
    H: np.ndarray | None = None
    H1: np.ndarray | None = None


@dataclass
class JumpEvent:
    """Jumps applied at the end of a sub-step; arrays are restricted to ``idx``."""

    step: int
    idx: np.ndarray
    t: np.ndarray
    z: np.ndarray
    seg: np.ndarray
    x: np.ndarray
    x1: np.ndarray
    Z: np.ndarray | None = None
    DZ: np.ndarray | None = None
    H: np.ndarray | None = None


class Observer(Protocol):
    def on_substep(self, s: SubStep) -> None: ...

    def on_jump(self, j: JumpEvent) -> None: ...


@dataclass
class BatchResult:
    x: np.ndarray
    Z: np.ndarray | None
    DZ: np.ndarray | None
    H: np.ndarray | None
    abort_step: np.ndarray
    n_jumps: np.ndarray
    params: tuple[str, ...] = ()

    @property
    def aborted(self) -> np.ndarray:
        return self.abort_step >= 0


# ---------------------------------------------------------------------------
# compensator integrals of the jump coefficient


class _Compensator:
    """``∫_{|z|<=1} F(z) nu_sim(dz)`` for jump coefficients F of the model."""

    def __init__(self, model: CoefficientModel, levy: LevyMeasureSpec) -> None:
        self.model = model
        self.linear = model.linear_in_z
        if self.linear:
            self.m1 = band_moment_cached(levy)
        else:
            self.nodes, self.weights = band_quadrature(levy)

    def _apply(self, fn, *args, x):
        if self.linear:
            if self.m1 == 0.0:
                return np.zeros_like(x)
            return self.m1 * fn(*args, x, 1.0)
        vals = fn(*args, x[..., None], self.nodes)
        return vals @ self.weights

    def b(self, eps, x):
        return self._apply(self.model.b, eps, x=x)

    def db_dy(self, eps, x):
        return self._apply(self.model.db_dy, eps, x=x)

    def d2b_dy2(self, eps, x):
        return self._apply(self.model.d2b_dy2, eps, x=x)

    def db_de(self, name, eps, x):
        return self._apply(self.model.db_de, name, eps, x=x)


# ---------------------------------------------------------------------------
# breakpoints


@dataclass
class _StepEvents:
    times: np.ndarray  # (k, n) breakpoints, padded with the step end
    marks: np.ndarray  # (k, n) jump marks, 0 where the breakpoint is not a jump


def _step_events(
    grid: GridSpec, n_paths: int, path_index: np.ndarray, times: np.ndarray, marks: np.ndarray
) -> dict[int, _StepEvents]:
    N = grid.n_steps
    T = grid.horizon
    split = grid.split
    if N % 2 == 1:
        # the split time is not a base node; insert it as a mark-free breakpoint
        path_index = np.concatenate([path_index, np.arange(n_paths)])
        times = np.concatenate([times, np.full(n_paths, split)])
        marks = np.concatenate([marks, np.zeros(n_paths)])
    if times.size == 0:
        return {}
    step = np.minimum((times * (N / T)).astype(np.int64), N - 1)
    # guard the floor against rounding at base nodes
    step = np.where(times < T * (step / N), step - 1, step)
    step = np.where(times >= T * ((step + 1) / N), step + 1, step)
    order = np.lexsort((times, path_index, step))
    step, path_index, times, marks = step[order], path_index[order], times[order], marks[order]
    key = step * n_paths + path_index
    starts = np.flatnonzero(np.concatenate([[True], key[1:] != key[:-1]]))
    group = np.cumsum(np.concatenate([[False], key[1:] != key[:-1]]))
    rank = np.arange(key.size) - starts[group]
    out: dict[int, _StepEvents] = {}
    bounds = np.flatnonzero(np.concatenate([[True], step[1:] != step[:-1], [True]]))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        n = int(step[lo])
        k = int(rank[lo:hi].max()) + 1
        bt = np.full((k, n_paths), grid.node(n + 1))
        bz = np.zeros((k, n_paths))
        bt[rank[lo:hi], path_index[lo:hi]] = times[lo:hi]
        bz[rank[lo:hi], path_index[lo:hi]] = marks[lo:hi]
        out[n] = _StepEvents(bt, bz)
    return out


# ---------------------------------------------------------------------------
# batch engine


def simulate_batch(
    model: CoefficientModel,
    levy: LevyMeasureSpec,
    grid: GridSpec,
    eps,
    x0: float,
    n_paths: int,
    seed: int,
    chunk: int = 0,
    params: Sequence[str] = (),
    variations: bool = True,
    observers: Sequence[Observer] = (),
) -> BatchResult:
    """Simulate ``n_paths`` paths driven by the streams of ``(seed, chunk)``."""
    eps = ParamVector(eps)
    model.check_params(eps)
    for p in params:
        model.check_param_name(p)
    rng_jump, rng_brown, rng_bridge = chunk_streams(seed, chunk)
    T, N, m = grid.horizon, grid.n_steps, grid.noise_refinement
    split = grid.split
    jumps = sample_jump_batch(levy, T, n_paths, rng_jump)
    events = _step_events(grid, n_paths, jumps.path_index, jumps.times, jumps.marks)
    comp = _Compensator(model, levy)
    P = len(params)

    x = np.full(n_paths, float(x0))
    Z = np.ones(n_paths) if variations else None
    DZ = np.zeros(n_paths) if variations else None
    H = np.zeros((P, n_paths)) if variations else None
    abort = np.full(n_paths, -1, dtype=np.int64)
    sq = math.sqrt(grid.dt / m)

    with np.errstate(all="ignore"):
        for n in range(N):
            t_lo, t_hi = grid.node(n), grid.node(n + 1)
            xi = rng_brown.standard_normal((m, n_paths))
            rem_w = sq * (xi[0] if m == 1 else xi.sum(axis=0))
            ev = events.get(n)
            k = 0 if ev is None else ev.times.shape[0]
            bridge = rng_bridge.standard_normal((k, n_paths)) if k else None
            cur = np.full(n_paths, t_lo)
            for j in range(k + 1):
                tb = ev.times[j] if j < k else np.full(n_paths, t_hi)
                h = tb - cur
                if j < k:
                    rem = t_hi - cur
                    safe = np.where(rem > 0.0, rem, 1.0)
                    frac = np.where(rem > 0.0, h / safe, 0.0)
                    var = np.where(rem > 0.0, h * (rem - h) / safe, 0.0)
                    dW = frac * rem_w + np.sqrt(np.maximum(var, 0.0)) * bridge[j]
                    rem_w = rem_w - dW
                else:
                    dW = rem_w
                seg = cur >= split
                a = model.a(eps, x)
                da = model.da(eps, x)
                c0 = comp.b(eps, x)
                mu = model.a0(eps, x) + 0.5 * a * da - c0
                x1 = x + mu * h + a * dW
                sub = SubStep(n, cur, h, dW, seg, x, x1, c0)
                if variations:
                    d2a = model.d2a(eps, x)
                    mu1 = model.da0(eps, x) + 0.5 * (da * da + a * d2a) - comp.db_dy(eps, x)
                    mu2 = (
                        model.d2a0(eps, x)
                        + 0.5 * (3.0 * da * d2a + a * model.d3a(eps, x))
                        - comp.d2b_dy2(eps, x)
                    )
                    fac = 1.0 + mu1 * h + da * dW
                    Z1 = Z * fac
                    DZ1 = DZ * fac + Z * Z * (mu2 * h + d2a * dW)
                    H1 = np.empty_like(H)
                    for i, p in enumerate(params):
                        dap = model.da_de(p, eps, x)
                        dmu = (
                            model.da0_de(p, eps, x)
                            + 0.5 * (dap * da + a * model.d2a_dyde(p, eps, x))
                            - comp.db_de(p, eps, x)
                        )
                        H1[i] = H[i] * fac + dmu * h + dap * dW
                    sub.Z, sub.Z1, sub.DZ, sub.DZ1, sub.H, sub.H1 = Z, Z1, DZ, DZ1, H, H1
                    Z, DZ, H = Z1, DZ1, H1
                for obs in observers:
                    obs.on_substep(sub)
                x = x1
                if j < k:
                    idx = np.flatnonzero(ev.marks[j])
                    if idx.size:
                        z = ev.marks[j, idx]
                        xm = x[idx]
                        xp = xm + model.b(eps, xm, z)
                        jev = JumpEvent(n, idx, tb[idx], z, seg[idx], xm, xp)
                        if variations:
                            g = 1.0 + model.db_dy(eps, xm, z)
                            bad = ~(g > 0.0)
                            if bad.any():
                                hit = idx[bad & (abort[idx] < 0)]
                                abort[hit] = n
                                xp = np.where(bad, np.nan, xp)
                                jev.x1 = xp
                            Zm, DZm, Hm = Z[idx], DZ[idx], H[:, idx]
                            jev.Z, jev.DZ, jev.H = Zm, DZm, Hm
                            Z = Z.copy()
                            DZ = DZ.copy()
                            H = H.copy()
                            Z[idx] = g * Zm
                            DZ[idx] = g * DZm + model.d2b_dy2(eps, xm, z) * Zm * Zm
                            for i, p in enumerate(params):
                                H[i, idx] = g * Hm[i] + model.db_de(p, eps, xm, z)
                        x = x.copy()
                        x[idx] = xp
                        for obs in observers:
                            obs.on_jump(jev)
                cur = tb
            bad = ~np.isfinite(x)
            if variations:
                bad |= ~np.isfinite(Z) | ~np.isfinite(DZ)
            hit = bad & (abort < 0)
            abort[hit] = n
    return BatchResult(x, Z, DZ, H, abort, jumps.counts, tuple(params))


# ---------------------------------------------------------------------------
# single-path recording


@dataclass
class PathState:
    """A single recorded path.

    Node arrays (length ``n + 1``) hold the state at the start of each interval and the
    terminal state last.  Interval arrays (length ``n``) hold the increments and the
    pre-jump state at the end of each interval; ``jump_mark`` is zero when no jump
    closes the interval.
    """

    model: CoefficientModel
    levy: LevyMeasureSpec
    grid: GridSpec
    eps: ParamVector
    params: tuple[str, ...]
    t: np.ndarray
    x: np.ndarray
    Z: np.ndarray
    U: np.ndarray
    DZ: np.ndarray
    H: dict[str, np.ndarray]
    dt: np.ndarray
    dW: np.ndarray
    comp_drift: np.ndarray
    jump_mark: np.ndarray
    x_minus: np.ndarray
    Z_minus: np.ndarray
    DZ_minus: np.ndarray
    H_minus: dict[str, np.ndarray]
    jumps: JumpTrain
    U_sde: np.ndarray | None = field(default=None)

    @property
    def x_T(self) -> float:
        return float(self.x[-1])

    @property
    def W(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.dW)])


class _Recorder:
    def __init__(self) -> None:
        self.subs: list[SubStep] = []
        self.jumps: dict[int, JumpEvent] = {}

    def on_substep(self, s: SubStep) -> None:
        self.subs.append(s)

    def on_jump(self, j: JumpEvent) -> None:
        self.jumps[len(self.subs) - 1] = j


def _seed_of(rng) -> int:
    if isinstance(rng, np.random.SeedSequence):
        return int(rng.generate_state(1)[0])
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    raise TypeError("rng must be an integer seed or a SeedSequence (replayable)")


def simulate(
    model: CoefficientModel,
    levy: LevyMeasureSpec,
    grid: GridSpec,
    eps,
    x0: float,
    rng,
    params: Sequence[str] | None = None,
    inverse_sde: bool = False,
) -> PathState:
    """Simulate and record one path driven by the replayable stream ``rng``."""
    eps = ParamVector(eps)
    params = tuple(model.param_names if params is None else params)
    rec = _Recorder()
    res = simulate_batch(model, levy, grid, eps, x0, 1, _seed_of(rng), 0, params, True, [rec])
    if res.abort_step[0] >= 0:
        raise PathAbortError(int(res.abort_step[0]))
    keep = [i for i, s in enumerate(rec.subs) if s.h[0] > 0.0 or i in rec.jumps]
    subs = [rec.subs[i] for i in keep]
    n = len(subs)
    marks = np.zeros(n)
    for pos, i in enumerate(keep):
        if i in rec.jumps:
            marks[pos] = rec.jumps[i].z[0]

    def node(first, last):
        return np.array([first(s)[0] for s in subs] + [last])

    x = node(lambda s: s.x, res.x[0])
    Z = node(lambda s: s.Z, res.Z[0])
    DZ = node(lambda s: s.DZ, res.DZ[0])
    H = {p: node(lambda s, i=i: s.H[i], res.H[i, 0]) for i, p in enumerate(params)}
    t = np.array([s.t0[0] for s in subs] + [grid.horizon])
    U_sde = None
    if inverse_sde:
        U_sde = _inverse_by_euler(model, levy, eps, subs, marks)
    state = PathState(
        model=model,
        levy=levy,
        grid=grid,
        eps=eps,
        params=params,
        t=t,
        x=x,
        Z=Z,
        U=1.0 / Z,
        DZ=DZ,
        H=H,
        dt=np.array([s.h[0] for s in subs]),
        dW=np.array([s.dW[0] for s in subs]),
        comp_drift=np.array([s.comp[0] for s in subs]),
        jump_mark=marks,
        x_minus=np.array([s.x1[0] for s in subs]),
        Z_minus=np.array([s.Z1[0] for s in subs]),
        DZ_minus=np.array([s.DZ1[0] for s in subs]),
        H_minus={p: np.array([s.H1[i][0] for s in subs]) for i, p in enumerate(params)},
        jumps=JumpTrain(t[1:][marks != 0.0], marks[marks != 0.0], grid.horizon),
        U_sde=U_sde,
    )
    return state


def _inverse_by_euler(model, levy, eps, subs, marks) -> np.ndarray:
    """Euler scheme of the inverse-flow equation, for cross-checking ``U = 1/Z``."""
    comp = _Compensator(model, levy)
    U = [1.0]
    u = 1.0
    for s, z in zip(subs, marks):
        x = s.x
        a, da, d2a = model.a(eps, x), model.da(eps, x), model.d2a(eps, x)
        mu1 = model.da0(eps, x) + 0.5 * (da * da + a * d2a) - comp.db_dy(eps, x)
        u = u * (1.0 + (da * da - mu1) * s.h - da * s.dW)
        if z != 0.0:
            u = u / (1.0 + model.db_dy(eps, s.x1, z))
        u = float(np.asarray(u).ravel()[0])
        U.append(u)
    return np.array(U)


def resimulate_bumped(
    model: CoefficientModel,
    levy: LevyMeasureSpec,
    grid: GridSpec,
    eps,
    x0: float,
    rng,
    bump: Bump,
    params: Sequence[str] | None = None,
) -> PathState:
    """Replay the stream of ``rng`` with the initial state or one parameter bumped."""
    eps = ParamVector(eps)
    if bump.target == "x0":
        return simulate(model, levy, grid, eps, x0 + bump.size, rng, params)
    return simulate(model, levy, grid, eps.bumped(bump.target, bump.size), x0, rng, params)
