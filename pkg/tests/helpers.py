"""Shared configurations for the test suite."""

import math

from jdgreeks.coeff_models import AdditiveLevy, GeometricLevy, NonlinearTest
from jdgreeks.levy_models import CompoundPoissonGaussian, LevyMeasureSpec, TemperedStable
from jdgreeks.mc_estimator import PayoffSpec, Problem, gaussian_band_moment
from jdgreeks.path_engine import GridSpec

NO_JUMPS = LevyMeasureSpec(CompoundPoissonGaussian(0.0, 0.0, 1.0))
TS_SYM = LevyMeasureSpec(TemperedStable(1.0, 0.5, 3.0, 3.0), 0.05)
TS_ASYM = LevyMeasureSpec(TemperedStable(1.0, 1.2, 2.0, 4.0), 0.05)

MERTON_JUMP = (1.0, -0.1, 0.15)


def merton_drift(sigma1, intensity, mean, sd):
    """Log-drift making the spot a martingale, in the model's compensated convention."""
    return (
        -0.5 * sigma1 * sigma1
        - intensity * (math.exp(mean + 0.5 * sd * sd) - 1.0)
        + gaussian_band_moment(intensity, mean, sd)
    )


def additive_ts(n_steps=50, payoff=None, truncation="smooth"):
    levy = LevyMeasureSpec(TS_SYM.family, 0.05, truncation)
    return Problem(
        AdditiveLevy(), levy, GridSpec(1.0, n_steps),
        dict(gamma=0.0, sigma1=0.2, sigma2=0.3), 0.0, payoff or PayoffSpec("call", 0.0),
    )


def additive_cp(n_steps=50, payoff=None):
    return Problem(
        AdditiveLevy(), LevyMeasureSpec(CompoundPoissonGaussian(1.0, 0.0, 0.5)), GridSpec(1.0, n_steps),
        dict(gamma=0.1, sigma1=0.3, sigma2=0.5), 0.0, payoff or PayoffSpec("call", 0.0),
    )


def geometric_bs(n_steps=16, payoff=None):
    return Problem(
        GeometricLevy(), NO_JUMPS, GridSpec(1.0, n_steps),
        dict(gamma=-0.02, sigma1=0.2, sigma2=0.0), 100.0, payoff or PayoffSpec("call", 100.0),
    )


def geometric_merton(n_steps=16, payoff=None):
    lam, mu, sd = MERTON_JUMP
    return Problem(
        GeometricLevy(), LevyMeasureSpec(CompoundPoissonGaussian(lam, mu, sd)), GridSpec(1.0, n_steps),
        dict(gamma=merton_drift(0.2, lam, mu, sd), sigma1=0.2, sigma2=1.0), 100.0,
        payoff or PayoffSpec("call", 100.0),
    )


def nonlinear_ts(n_steps=50, payoff=None):
    return Problem(
        NonlinearTest(), TS_ASYM, GridSpec(1.0, n_steps),
        dict(gamma=0.1, sigma1=0.3, sigma2=0.4, eta=0.15, eta_tilde=0.15), 0.2,
        payoff or PayoffSpec("call", 0.2),
    )


BUILTIN = {
    "additive-ts": additive_ts,
    "additive-cp": additive_cp,
    "geometric-bs": geometric_bs,
    "geometric-merton": geometric_merton,
    "nonlinear-ts": nonlinear_ts,
}

# Parameters with a weighted sensitivity in full mode, per built-in configuration.
VEGA_PARAMS = {
    "additive-ts": ("gamma", "sigma1", "sigma2"),
    "additive-cp": ("gamma", "sigma1", "sigma2"),
    "geometric-bs": ("gamma", "sigma1"),
    "geometric-merton": ("gamma", "sigma1", "sigma2"),
    "nonlinear-ts": ("gamma", "sigma2", "eta_tilde"),
}

GBM_INI = """\
[model]
name = geometric
x0 = 100.0
gamma = -0.02
sigma1 = 0.2
sigma2 = 0.0

[levy]
family = none

[grid]
T = 1.0
n_steps = 16

[payoff]
kind = call
strike = 100.0

[run]
n_paths = 100000
seed = 7
greeks = delta
"""

MINIMAL_INI = """\
[model]
name = additive
x0 = 0.0
gamma = 0.0
sigma1 = 0.2
sigma2 = 0.3

[levy]
family = compound-poisson-gaussian
intensity = 1.0
mark_mean = 0.0
mark_sd = 0.5

[grid]
T = 1.0
n_steps = 10

[payoff]
kind = call
strike = 0.0
"""
