"""Coefficient bundles ``(a0, a, b_z)`` with analytic derivatives, and assumption checks.

All evaluators are vectorised over ``y`` (and ``z`` for jump coefficients).  The drift
``a0`` is the Stratonovich drift; the Itô correction is applied by the path engine.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections.abc import Iterator, Mapping
from dataclasses import dataclass

import numpy as np


class ConfigurationError(ValueError):
    """Unknown selector, missing parameter, or parameter outside the model's range."""


class ParamVector(Mapping[str, float]):
    """Immutable named parameter vector."""

    __slots__ = ("_values",)

    def __init__(self, values: Mapping[str, float] | None = None, **kw: float) -> None:
        merged = dict(values or {}, **kw)
        for k, v in merged.items():
            if not math.isfinite(float(v)):
                raise ConfigurationError(f"parameter {k!r} must be finite")
        self._values = {k: float(v) for k, v in merged.items()}

    def __getitem__(self, key: str) -> float:
        try:
            return self._values[key]
        except KeyError:
            raise ConfigurationError(f"missing parameter {key!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def __hash__(self) -> int:
        return hash(tuple(sorted(self._values.items())))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Mapping) and dict(self) == dict(other)

    def __repr__(self) -> str:
        return f"ParamVector({self._values!r})"

    def bumped(self, name: str, h: float) -> "ParamVector":
        if name not in self._values:
            raise ConfigurationError(f"missing parameter {name!r}")
        vals = dict(self._values)
        vals[name] += h
        return ParamVector(vals)


def _zeros(y):
    return np.zeros_like(np.asarray(y, dtype=float))


class CoefficientModel(ABC):
    """Coefficients of ``dx = a0 dt + a ∘ dW + ∫ b_z dμ̄`` in one dimension.

    Subclasses supply every derivative analytically.  Jump coefficients must be
    linear in ``z`` when ``linear_in_z`` is set; the engine then integrates them
    against the Lévy measure through its first moment.
    """

    name: str = ""
    param_names: tuple[str, ...] = ()
    geometric: bool = False
    linear_in_z: bool = True

    def check_params(self, eps: Mapping[str, float]) -> None:
        missing = [p for p in self.param_names if p not in eps]
        if missing:
            raise ConfigurationError(f"{self.name}: missing parameters {missing}")
        extra = [p for p in eps if p not in self.param_names]
        if extra:
            raise ConfigurationError(f"{self.name}: unknown parameters {extra}")

    def check_param_name(self, name: str) -> None:
        if name not in self.param_names:
            raise ConfigurationError(f"{self.name} has no parameter {name!r}")

    # drift
    @abstractmethod
    def a0(self, eps, y): ...
    @abstractmethod
    def da0(self, eps, y): ...
    @abstractmethod
    def d2a0(self, eps, y): ...

    # diffusion
    @abstractmethod
    def a(self, eps, y): ...
    @abstractmethod
    def da(self, eps, y): ...
    @abstractmethod
    def d2a(self, eps, y): ...
    @abstractmethod
    def d3a(self, eps, y): ...

    # jumps
    @abstractmethod
    def b(self, eps, y, z): ...
    @abstractmethod
    def db_dy(self, eps, y, z): ...
    @abstractmethod
    def d2b_dy2(self, eps, y, z): ...
    @abstractmethod
    def db_dz(self, eps, y, z): ...
    @abstractmethod
    def d2b_dydz(self, eps, y, z): ...
    @abstractmethod
    def d2b_dz2(self, eps, y, z): ...
    @abstractmethod
    def d3b_dy2dz(self, eps, y, z): ...
    @abstractmethod
    def d3b_dydz2(self, eps, y, z): ...

    # parameter derivatives
    @abstractmethod
    def da0_de(self, name, eps, y): ...
    @abstractmethod
    def da_de(self, name, eps, y): ...
    @abstractmethod
    def d2a_dyde(self, name, eps, y): ...
    @abstractmethod
    def db_de(self, name, eps, y, z): ...
    @abstractmethod
    def d2b_dzde(self, name, eps, y, z): ...

    def dinv_a(self, eps, y):
        """``∇_y (1/a)``."""
        a = self.a(eps, y)
        return -self.da(eps, y) / (a * a)

    # flags
    @abstractmethod
    def touches(self, name: str) -> frozenset[str]:
        """Which of ``{"drift", "diffusion", "jump"}`` depend on parameter ``name``."""

    @abstractmethod
    def deterministic_f(self, name: str, eps) -> bool:
        """True when ``U_s ∂_ε a(x_s)`` is a deterministic function of time."""

    @abstractmethod
    def elliptic_diffusion(self, eps) -> bool: ...

    @abstractmethod
    def elliptic_jump(self, eps) -> bool: ...


class AdditiveLevy(CoefficientModel):
    """``a0 = γ``, ``a = σ1``, ``b_z = σ2 z``."""

    name = "additive"
    param_names = ("gamma", "sigma1", "sigma2")

    def a0(self, eps, y):
        return _zeros(y) + eps["gamma"]

    def da0(self, eps, y):
        return _zeros(y)

    def d2a0(self, eps, y):
        return _zeros(y)

    def a(self, eps, y):
        return _zeros(y) + eps["sigma1"]

    def da(self, eps, y):
        return _zeros(y)

    def d2a(self, eps, y):
        return _zeros(y)

    def d3a(self, eps, y):
        return _zeros(y)

    def b(self, eps, y, z):
        return _zeros(y) + eps["sigma2"] * np.asarray(z)

    def db_dy(self, eps, y, z):
        return _zeros(y) + 0.0 * np.asarray(z)

    def d2b_dy2(self, eps, y, z):
        return _zeros(y) + 0.0 * np.asarray(z)

    def db_dz(self, eps, y, z):
        return _zeros(y) + 0.0 * np.asarray(z) + eps["sigma2"]

    def d2b_dydz(self, eps, y, z):
        return _zeros(y) + 0.0 * np.asarray(z)

    def d2b_dz2(self, eps, y, z):
        return _zeros(y) + 0.0 * np.asarray(z)

    def d3b_dy2dz(self, eps, y, z):
        return _zeros(y) + 0.0 * np.asarray(z)

    def d3b_dydz2(self, eps, y, z):
        return _zeros(y) + 0.0 * np.asarray(z)

    def da0_de(self, name, eps, y):
        self.check_param_name(name)
        return _zeros(y) + (1.0 if name == "gamma" else 0.0)

    def da_de(self, name, eps, y):
        self.check_param_name(name)
        return _zeros(y) + (1.0 if name == "sigma1" else 0.0)

    def d2a_dyde(self, name, eps, y):
        self.check_param_name(name)
        return _zeros(y)

    def db_de(self, name, eps, y, z):
        self.check_param_name(name)
        return _zeros(y) + (np.asarray(z, dtype=float) if name == "sigma2" else 0.0 * np.asarray(z))

    def d2b_dzde(self, name, eps, y, z):
        self.check_param_name(name)
        return _zeros(y) + 0.0 * np.asarray(z) + (1.0 if name == "sigma2" else 0.0)

    def touches(self, name):
        self.check_param_name(name)
        return frozenset({"gamma": {"drift"}, "sigma1": {"diffusion"}, "sigma2": {"jump"}}[name])

    def deterministic_f(self, name, eps):
        self.check_param_name(name)
        return True

    def elliptic_diffusion(self, eps):
        return eps["sigma1"] != 0.0

    def elliptic_jump(self, eps):
        return eps["sigma2"] != 0.0


class GeometricLevy(AdditiveLevy):
    """Log-price dynamics of ``S = exp(x)``; the state is ``log S``."""

    name = "geometric"
    geometric = True


class NonlinearTest(CoefficientModel):
    """``a0 = γ tanh y``, ``a = σ1 (1 + η sin y)``, ``b_z = σ2 z (1 + η̃ cos y)``."""

    name = "nonlinear"
    param_names = ("gamma", "sigma1", "sigma2", "eta", "eta_tilde")
    max_eta = 0.2

    def check_params(self, eps):
        super().check_params(eps)
        for p in ("eta", "eta_tilde"):
            if abs(eps[p]) > self.max_eta:
                raise ConfigurationError(f"|{p}| must be <= {self.max_eta}")

    def a0(self, eps, y):
        return eps["gamma"] * np.tanh(y)

    def da0(self, eps, y):
        return eps["gamma"] / np.cosh(y) ** 2

    def d2a0(self, eps, y):
        return -2.0 * eps["gamma"] * np.tanh(y) / np.cosh(y) ** 2

    def a(self, eps, y):
        return eps["sigma1"] * (1.0 + eps["eta"] * np.sin(y))

    def da(self, eps, y):
        return eps["sigma1"] * eps["eta"] * np.cos(y)

    def d2a(self, eps, y):
        return -eps["sigma1"] * eps["eta"] * np.sin(y)

    def d3a(self, eps, y):
        return -eps["sigma1"] * eps["eta"] * np.cos(y)

    def b(self, eps, y, z):
        return eps["sigma2"] * z * (1.0 + eps["eta_tilde"] * np.cos(y))

    def db_dy(self, eps, y, z):
        return -eps["sigma2"] * z * eps["eta_tilde"] * np.sin(y)

    def d2b_dy2(self, eps, y, z):
        return -eps["sigma2"] * z * eps["eta_tilde"] * np.cos(y)

    def db_dz(self, eps, y, z):
        return eps["sigma2"] * (1.0 + eps["eta_tilde"] * np.cos(y)) + 0.0 * np.asarray(z)

    def d2b_dydz(self, eps, y, z):
        return -eps["sigma2"] * eps["eta_tilde"] * np.sin(y) + 0.0 * np.asarray(z)

    def d2b_dz2(self, eps, y, z):
        return _zeros(y) + 0.0 * np.asarray(z)

    def d3b_dy2dz(self, eps, y, z):
        return -eps["sigma2"] * eps["eta_tilde"] * np.cos(y) + 0.0 * np.asarray(z)

    def d3b_dydz2(self, eps, y, z):
        return _zeros(y) + 0.0 * np.asarray(z)

    def da0_de(self, name, eps, y):
        self.check_param_name(name)
        return np.tanh(y) if name == "gamma" else _zeros(y)

    def da_de(self, name, eps, y):
        self.check_param_name(name)
        if name == "sigma1":
            return 1.0 + eps["eta"] * np.sin(y)
        if name == "eta":
            return eps["sigma1"] * np.sin(y)
        return _zeros(y)

    def d2a_dyde(self, name, eps, y):
        self.check_param_name(name)
        if name == "sigma1":
            return eps["eta"] * np.cos(y)
        if name == "eta":
            return eps["sigma1"] * np.cos(y)
        return _zeros(y)

    def db_de(self, name, eps, y, z):
        self.check_param_name(name)
        if name == "sigma2":
            return z * (1.0 + eps["eta_tilde"] * np.cos(y))
        if name == "eta_tilde":
            return eps["sigma2"] * z * np.cos(y)
        return _zeros(y) + 0.0 * np.asarray(z)

    def d2b_dzde(self, name, eps, y, z):
        self.check_param_name(name)
        if name == "sigma2":
            return 1.0 + eps["eta_tilde"] * np.cos(y) + 0.0 * np.asarray(z)
        if name == "eta_tilde":
            return eps["sigma2"] * np.cos(y) + 0.0 * np.asarray(z)
        return _zeros(y) + 0.0 * np.asarray(z)

    def touches(self, name):
        self.check_param_name(name)
        return frozenset(
            {
                "gamma": {"drift"},
                "sigma1": {"diffusion"},
                "eta": {"diffusion"},
                "sigma2": {"jump"},
                "eta_tilde": {"jump"},
            }[name]
        )

    def deterministic_f(self, name, eps):
        # U_s ∂_ε a(x_s) is random as soon as ∂_ε a is non-zero.
        self.check_param_name(name)
        return "diffusion" not in self.touches(name)

    def elliptic_diffusion(self, eps):
        return eps["sigma1"] != 0.0

    def elliptic_jump(self, eps):
        return eps["sigma2"] != 0.0


MODELS: dict[str, type[CoefficientModel]] = {
    "additive": AdditiveLevy,
    "geometric": GeometricLevy,
    "nonlinear": NonlinearTest,
}


def make_model(name: str) -> CoefficientModel:
    try:
        return MODELS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


_Y_SELECTORS = {
    "a0": "a0", "grad_a0": "da0", "hess_a0": "d2a0",
    "a": "a", "grad_a": "da", "hess_a": "d2a", "grad3_a": "d3a",
    "grad_inv_a": "dinv_a",
}
_Z_SELECTORS = {
    "b": "b", "grad_b": "db_dy", "hess_b": "d2b_dy2", "dz_b": "db_dz",
    "dz_grad_b": "d2b_dydz", "dz2_b": "d2b_dz2", "dz_hess_b": "d3b_dy2dz",
    "dz2_grad_b": "d3b_dydz2",
}
_EPS_Y_SELECTORS = {"de_a0": "da0_de", "de_a": "da_de", "de_grad_a": "d2a_dyde"}
_EPS_Z_SELECTORS = {"de_b": "db_de", "de_dz_b": "d2b_dzde"}
SELECTORS = tuple(_Y_SELECTORS) + tuple(_Z_SELECTORS) + tuple(_EPS_Y_SELECTORS) + tuple(_EPS_Z_SELECTORS)


def evaluate(model: CoefficientModel, which: str, eps, y, z=None, param: str | None = None):
    """Uniform access to the coefficient bundle by selector name."""
    model.check_params(eps)
    needs_z = which in _Z_SELECTORS or which in _EPS_Z_SELECTORS
    needs_param = which in _EPS_Y_SELECTORS or which in _EPS_Z_SELECTORS
    if which not in SELECTORS:
        raise ConfigurationError(f"unknown selector {which!r}")
    if needs_z != (z is not None):
        raise ConfigurationError(f"selector {which!r} {'needs' if needs_z else 'takes no'} z")
    if needs_param and param is None:
        raise ConfigurationError(f"selector {which!r} needs a parameter name")
    table = {**_Y_SELECTORS, **_Z_SELECTORS, **_EPS_Y_SELECTORS, **_EPS_Z_SELECTORS}
    fn = getattr(model, table[which])
    args = ([param] if needs_param else []) + [eps, np.asarray(y, dtype=float)]
    if needs_z:
        args.append(np.asarray(z, dtype=float))
    out = np.asarray(fn(*args), dtype=float)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CheckLine:
    name: str
    value: float
    floor: float
    passed: bool
    required: bool = True

    def render(self) -> str:
        status = "pass" if self.passed else ("FAIL" if self.required else "n/a")
        return f"{self.name}: {status} (value={self.value:.6g}, floor={self.floor:.3g})"


@dataclass(frozen=True)
class AssumptionReport:
    lines: tuple[CheckLine, ...]

    @property
    def passed(self) -> bool:
        return all(line.passed or not line.required for line in self.lines)

    def line(self, name: str) -> CheckLine:
        return next(ln for ln in self.lines if ln.name == name)

    def render(self) -> str:
        return "\n".join(ln.render() for ln in self.lines)


def validate_assumptions(
    model: CoefficientModel,
    eps,
    y_grid,
    z_grid,
    floor: float = 1e-6,
    mode: str = "full",
) -> AssumptionReport:
    """Check non-degeneracy of ``1 + ∇_y b`` and the ellipticity floors on a grid.

    ``mode`` selects which ellipticity conditions are required: both for ``full``,
    only the diffusion one for ``diffusion-only``, only the jump one for ``jump-only``.
    """
    model.check_params(eps)
    y = np.asarray(y_grid, dtype=float)[:, None]
    z = np.asarray(z_grid, dtype=float)[None, :]
    if y.size == 0 or z.size == 0:
        raise ConfigurationError("validation grid must be non-empty")
    jac = np.min(np.abs(1.0 + model.db_dy(eps, y, z)))
    a2 = float(np.min(model.a(eps, y[:, 0]) ** 2))
    bz2 = float(np.min(model.db_dz(eps, y, z) ** 2))
    tiny = 1e-9 * max(1.0, float(np.max(np.abs(z))))
    b_small = float(np.max(np.abs(model.b(eps, y, np.array([[tiny, -tiny]])))))
    need_diff = mode in ("full", "diffusion-only")
    need_jump = mode in ("full", "jump-only")
    return AssumptionReport(
        (
            CheckLine("jump_jacobian", float(jac), floor, bool(jac > floor)),
            CheckLine("jump_vanishes_at_zero", b_small, floor, bool(b_small < floor)),
            CheckLine("elliptic_diffusion", a2, floor, bool(a2 >= floor), need_diff),
            CheckLine("elliptic_jump", bz2, floor, bool(bz2 >= floor), need_jump),
        )
    )
