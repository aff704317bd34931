import math

import numpy as np
import pytest

from jdgreeks.coeff_models import AdditiveLevy, NonlinearTest, ParamVector
from jdgreeks.levy_models import (
    CompoundPoissonGaussian,
    LevyMeasureSpec,
    TemperedStable,
    band_moment_cached,
    nu_moment,
    simulated_mass,
)
from jdgreeks.path_engine import (
    Bump,
    GridSpec,
    PathAbortError,
    chunk_streams,
    resimulate_bumped,
    simulate,
    simulate_batch,
)

NL = NonlinearTest()
NL_EPS = ParamVector(gamma=0.3, sigma1=0.4, sigma2=0.5, eta=0.15, eta_tilde=0.15)
TS = LevyMeasureSpec(TemperedStable(1.0, 1.2, 2.0, 4.0), 0.05)
CP = LevyMeasureSpec(CompoundPoissonGaussian(1.5, 0.2, 0.4))
NO_JUMPS = LevyMeasureSpec(CompoundPoissonGaussian(0.0, 0.0, 1.0))


def test_grid_validation_and_nodes():
    with pytest.raises(ValueError):
        GridSpec(1.0, 0)
    with pytest.raises(ValueError):
        GridSpec(0.0, 4)
    g = GridSpec(2.0, 8)
    assert g.node(0) == 0.0 and g.node(8) == 2.0 and g.split == 1.0
    assert g.dt == 0.25


def test_stream_blocks_match_sequential_draws():
    a = chunk_streams(5, 2)[1].standard_normal((3, 7))
    g = chunk_streams(5, 2)[1]
    b = np.stack([g.standard_normal(7) for _ in range(3)])
    assert np.array_equal(a, b)


def test_batch_is_reproducible_and_chunks_differ():
    grid = GridSpec(1.0, 20)
    r1 = simulate_batch(NL, TS, grid, NL_EPS, 0.1, 64, seed=9, chunk=0)
    r2 = simulate_batch(NL, TS, grid, NL_EPS, 0.1, 64, seed=9, chunk=0)
    r3 = simulate_batch(NL, TS, grid, NL_EPS, 0.1, 64, seed=9, chunk=1)
    assert np.array_equal(r1.x, r2.x) and np.array_equal(r1.Z, r2.Z)
    assert not np.array_equal(r1.x, r3.x)


def test_additive_scheme_is_exact():
    m = AdditiveLevy()
    eps = ParamVector(gamma=0.1, sigma1=0.3, sigma2=0.5)
    path = simulate(m, CP, GridSpec(1.0, 7), eps, 0.2, 4)
    m1 = band_moment_cached(CP)
    expect = 0.2 + 0.1 + 0.3 * path.W[-1] + 0.5 * path.jumps.marks.sum() - 0.5 * m1
    assert path.x_T == pytest.approx(expect, abs=1e-12)
    assert np.allclose(path.Z, 1.0) and np.allclose(path.DZ, 0.0)


def test_additive_terminal_moments():
    m = AdditiveLevy()
    eps = ParamVector(gamma=0.1, sigma1=0.3, sigma2=0.5)
    n = 200_000
    r = simulate_batch(m, CP, GridSpec(1.0, 4), eps, 0.0, n, seed=1, variations=False)
    mean = 0.1 + 0.5 * (nu_moment(CP, 1, "all", signed=True) - band_moment_cached(CP))
    var = 0.09 + 0.25 * nu_moment(CP, 2, "all")
    assert abs(r.x.mean() - mean) < 4 * math.sqrt(var / n)
    assert r.x.var() == pytest.approx(var, rel=0.02)
    assert r.n_jumps.mean() == pytest.approx(simulated_mass(CP), rel=0.01)


def test_jump_times_land_on_breakpoints():
    path = simulate(NL, TS, GridSpec(1.0, 9), NL_EPS, 0.0, 21)
    assert len(path.jumps) > 0
    for t in path.jumps.times:
        assert np.any(np.isclose(path.t, t, rtol=0, atol=1e-15))
    # odd step count: T/2 is a breakpoint too
    assert np.any(path.t == 0.5)
    # jumps close intervals and move the state by b(x-, z)
    k = np.flatnonzero(path.jump_mark)
    z = path.jump_mark[k]
    assert np.allclose(path.x[k + 1], path.x_minus[k] + NL.b(NL_EPS, path.x_minus[k], z))


def test_product_with_inverse_is_one():
    path = simulate(NL, TS, GridSpec(1.0, 40), NL_EPS, 0.3, 8, inverse_sde=True)
    assert np.max(np.abs(path.Z * path.U - 1.0)) <= 4 * np.finfo(float).eps
    # Euler of the inverse equation tracks 1/Z to first order in the step
    assert np.max(np.abs(path.U_sde - path.U) / path.U) < 5 * 1.0 / 40


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_variations_match_bumped_paths(seed):
    grid = GridSpec(1.0, 25)
    base = simulate(NL, TS, grid, NL_EPS, 0.3, seed)
    h = 1e-5
    up = resimulate_bumped(NL, TS, grid, NL_EPS, 0.3, seed, Bump("x0", h))
    dn = resimulate_bumped(NL, TS, grid, NL_EPS, 0.3, seed, Bump("x0", -h))
    assert np.allclose((up.x - dn.x) / (2 * h), base.Z, rtol=1e-6)
    assert np.allclose((up.Z - dn.Z) / (2 * h), base.DZ, rtol=1e-5, atol=1e-7)
    for p in ("gamma", "sigma1", "sigma2", "eta_tilde"):
        pu = resimulate_bumped(NL, TS, grid, NL_EPS, 0.3, seed, Bump(p, h))
        pd = resimulate_bumped(NL, TS, grid, NL_EPS, 0.3, seed, Bump(p, -h))
        assert np.allclose((pu.x - pd.x) / (2 * h), base.H[p], rtol=1e-6, atol=1e-9)


def test_observer_sees_every_substep_and_jump():
    class Count:
        subs = 0
        jumps = 0

        def on_substep(self, s):
            Count.subs += 1
            assert s.h.shape == (16,)

        def on_jump(self, j):
            Count.jumps += j.idx.size

    r = simulate_batch(NL, TS, GridSpec(1.0, 10), NL_EPS, 0.0, 16, 3, observers=[Count()])
    assert Count.jumps == int(r.n_jumps.sum())
    assert Count.subs >= 10


def test_abort_on_degenerate_jacobian():
    wild = LevyMeasureSpec(CompoundPoissonGaussian(20.0, 0.0, 40.0))
    eps = NL_EPS.bumped("eta_tilde", 0.05)
    r = simulate_batch(NL, wild, GridSpec(1.0, 5), eps, 1.0, 200, seed=2)
    assert np.any(r.aborted)
    for seed in range(50):
        try:
            simulate(NL, wild, GridSpec(1.0, 5), eps, 1.0, seed)
        except PathAbortError as exc:
            assert exc.step >= 0
            break
    else:
        pytest.fail("no aborted path found")


def test_noise_refinement_couples_grids():
    coarse = simulate_batch(NL, NO_JUMPS, GridSpec(1.0, 4, 8), NL_EPS, 0.0, 32, 5, variations=False)
    fine = simulate_batch(NL, NO_JUMPS, GridSpec(1.0, 32, 1), NL_EPS, 0.0, 32, 5, variations=False)
    additive = AdditiveLevy()
    e = ParamVector(gamma=0.0, sigma1=1.0, sigma2=0.0)
    wc = simulate_batch(additive, NO_JUMPS, GridSpec(1.0, 4, 8), e, 0.0, 32, 5, variations=False).x
    wf = simulate_batch(additive, NO_JUMPS, GridSpec(1.0, 32, 1), e, 0.0, 32, 5, variations=False).x
    assert np.allclose(wc, wf, atol=1e-12)
    assert np.corrcoef(coarse.x, fine.x)[0, 1] > 0.99
