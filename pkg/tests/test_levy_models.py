import math

import numpy as np
import pytest
from scipy import integrate

from jdgreeks.levy_models import (
    CompoundPoissonGaussian,
    DomainError,
    LevyMeasureSpec,
    TemperedStable,
    band_moment_cached,
    band_quadrature,
    boundary_densities,
    density,
    effective_density,
    effective_score,
    mass_above,
    nu_moment,
    order_exponent_estimate,
    order_integral,
    sample_jump_batch,
    sample_jumps,
    score,
    simulated_mass,
    simulated_mass_cached,
    taper,
    truncation_bias_proxy,
)

TS = TemperedStable(1.0, 0.5, 3.0, 3.0)
TS_SPEC = LevyMeasureSpec(TS, 0.05)
TS_ASYM = LevyMeasureSpec(TemperedStable(1.0, 1.2, 2.0, 4.0), 0.05)
CP = LevyMeasureSpec(CompoundPoissonGaussian(2.0, 0.0, 0.5))

# Reference values from 30-digit mpmath quadrature of the defining integrals.
MPMATH = {
    "mass_above_0.1": 3.98498834674427416,
    "below_second_moment": 0.0136346412197270571,
    "simulated_mass": 5.61052559265400539,
    "bias_proxy_smooth": 0.0240706524306612525,
    "asym_band_first_moment": 0.667208200332425848,
    "order_integral_1_64": 31.5800982385089612,
}


def test_infinite_activity_needs_cut():
    with pytest.raises(DomainError, match="infinite activity"):
        LevyMeasureSpec(TS, 0.0)


@pytest.mark.parametrize(
    "args",
    [(0.0, 0.5, 1.0, 1.0), (1.0, 2.0, 1.0, 1.0), (1.0, 0.5, 0.0, 1.0), (-1.0, 0.5, 1.0, 1.0)],
)
def test_tempered_stable_domain(args):
    with pytest.raises(DomainError):
        TemperedStable(*args)


def test_compound_poisson_domain():
    with pytest.raises(DomainError):
        CompoundPoissonGaussian(-1.0, 0.0, 1.0)
    with pytest.raises(DomainError):
        CompoundPoissonGaussian(1.0, 0.0, 0.0)


def test_density_undefined_at_zero():
    with pytest.raises(DomainError):
        density(TS_SPEC, 0.0)


def test_tempered_stable_integrals_match_mpmath():
    assert mass_above(TS_SPEC, 0.1) == pytest.approx(MPMATH["mass_above_0.1"], rel=1e-10)
    assert nu_moment(TS_SPEC, 2.0, "below") == pytest.approx(MPMATH["below_second_moment"], rel=1e-10)
    assert simulated_mass(TS_SPEC) == pytest.approx(MPMATH["simulated_mass"], rel=1e-10)
    assert truncation_bias_proxy(TS_SPEC) == pytest.approx(MPMATH["bias_proxy_smooth"], rel=1e-10)
    assert band_moment_cached(TS_ASYM) == pytest.approx(MPMATH["asym_band_first_moment"], rel=1e-10)
    assert order_integral(TS_SPEC, 1 / 64) == pytest.approx(MPMATH["order_integral_1_64"], rel=1e-10)


def test_inverse_table_mass_matches_quadrature():
    assert simulated_mass_cached(TS_SPEC) == pytest.approx(simulated_mass(TS_SPEC), rel=1e-8)
    assert simulated_mass_cached(TS_ASYM) == pytest.approx(simulated_mass(TS_ASYM), rel=1e-8)


def test_compound_poisson_closed_forms():
    assert mass_above(CP, 0.0) == 2.0
    assert nu_moment(CP, 2.0, "all") == pytest.approx(0.5, rel=1e-10)
    assert nu_moment(CP, 1.0, "all", signed=True) == pytest.approx(0.0, abs=1e-12)
    assert simulated_mass(CP) == 2.0
    assert truncation_bias_proxy(CP) == 0.0


def test_divergent_moment_rejected():
    with pytest.raises(DomainError, match="diverges"):
        nu_moment(TS_SPEC, 0.5, "inner")
    with pytest.raises(DomainError):
        nu_moment(TS_SPEC, 1.5, "band", signed=True)


def test_taper_is_c1_and_bounded():
    d = TS_SPEC.delta
    r = np.linspace(0.0, 3 * d, 3001)
    t = taper(TS_SPEC, r)
    assert t.min() == 0.0 and t.max() == 1.0
    assert np.all(np.diff(t) >= 0.0)
    slope = np.gradient(t, r)
    for edge in (d, 2 * d):
        k = np.searchsorted(r, edge)
        assert abs(slope[k]) < 1e-2 / d


def test_hard_taper_and_boundary_densities():
    hard = LevyMeasureSpec(TS, 0.05, "hard")
    assert taper(hard, 0.049) == 0.0 and taper(hard, 0.05) == 1.0
    lo, hi = boundary_densities(hard)
    assert hi == pytest.approx(density(hard, 0.05))
    assert boundary_densities(TS_SPEC) == (0.0, 0.0)


@pytest.mark.parametrize("z", [-0.5, -0.07, 0.06, 0.09, 0.3, 2.0])
def test_effective_score_is_log_derivative(z):
    h = 1e-6
    fd = (math.log(effective_density(TS_SPEC, z + h)) - math.log(effective_density(TS_SPEC, z - h))) / (2 * h)
    assert effective_score(TS_SPEC, z) == pytest.approx(fd, rel=1e-5)


def test_score_of_gaussian_marks():
    spec = LevyMeasureSpec(CompoundPoissonGaussian(1.0, 0.3, 0.5))
    assert score(spec, 0.8) == pytest.approx(-(0.8 - 0.3) / 0.25)


@pytest.mark.parametrize("spec", [TS_SPEC, TS_ASYM, CP])
def test_boundary_flux_decays(spec):
    vals = [density(spec, z) * z * z for z in (10.0, 100.0, 1000.0)]
    assert vals[0] > vals[1] >= vals[2]
    assert vals[2] < 1e-12


@pytest.mark.parametrize("spec", [TS_SPEC, TS_ASYM, LevyMeasureSpec(CompoundPoissonGaussian(1.0, 0.2, 0.5), 0.1)])
def test_band_quadrature_reproduces_moments(spec):
    z, w = band_quadrature(spec)
    for p in (1, 2, 3):
        assert np.sum(w * z**p) == pytest.approx(
            nu_moment(spec, p, "band" if spec.delta else "inner", signed=True, effective=True),
            rel=1e-7, abs=1e-12,
        )


def test_sampled_marks_follow_simulated_measure():
    rng = np.random.default_rng(11)
    T, n = 1.0, 40000
    batch = sample_jump_batch(TS_ASYM, T, n, rng)
    mass = simulated_mass(TS_ASYM)
    assert batch.counts.mean() == pytest.approx(mass * T, rel=0.01)
    assert np.all(np.abs(batch.marks) >= TS_ASYM.delta)
    for p in (1, 2):
        exact = nu_moment(TS_ASYM, p, "all", signed=True, effective=True) / mass
        emp = batch.marks**p
        assert abs(emp.mean() - exact) < 4 * emp.std() / math.sqrt(emp.size)
    # quantiles of the positive side against the simulated cdf
    f = lambda r: effective_density(TS_ASYM, r)  # noqa: E731
    norm = integrate.quad(f, 0.05, 0.1)[0] + integrate.quad(f, 0.1, np.inf)[0]
    qs = np.quantile(batch.marks[batch.marks > 0], [0.1, 0.5, 0.9])
    for q, level in zip(qs, (0.1, 0.5, 0.9)):
        lo = min(q, 0.1)
        cdf = integrate.quad(f, 0.05, lo)[0] + (integrate.quad(f, 0.1, q)[0] if q > 0.1 else 0.0)
        assert cdf / norm == pytest.approx(level, abs=0.01)


def test_jump_batch_sorted_and_reproducible():
    a = sample_jump_batch(TS_SPEC, 2.0, 50, np.random.default_rng(3))
    b = sample_jump_batch(TS_SPEC, 2.0, 50, np.random.default_rng(3))
    assert np.array_equal(a.marks, b.marks) and np.array_equal(a.times, b.times)
    for i in range(50):
        tr = a.train(i)
        assert np.all(np.diff(tr.times) >= 0.0)
        assert np.all((tr.times >= 0.0) & (tr.times <= 2.0))
    single = sample_jumps(TS_SPEC, 1.0, np.random.default_rng(5))
    assert len(single) == single.marks.size


def test_compound_poisson_with_cut_rejects_small_marks():
    spec = LevyMeasureSpec(CompoundPoissonGaussian(5.0, 0.0, 0.2), 0.1)
    b = sample_jump_batch(spec, 1.0, 2000, np.random.default_rng(1))
    assert np.all(np.abs(b.marks) >= 0.1)
    assert b.counts.mean() == pytest.approx(simulated_mass(spec), rel=0.05)


def test_order_exponent_for_compound_poisson_fails():
    assert order_exponent_estimate(CP) is None


def test_order_exponent_rho_domain():
    with pytest.raises(DomainError):
        order_exponent_estimate(TS_SPEC, rho_grid=(0.5, 1.5))
