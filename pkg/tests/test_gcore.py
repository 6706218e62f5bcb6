import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcalc.gcore import (
    AscentOptions,
    BandError,
    VolatilityBand,
    closed_form_g,
    eval_g_1d,
    eval_g_inverse_1d,
    eval_g_matrix,
    nondegeneracy_delta,
    project_to_band,
    random_gamma,
)

BAND_1D = VolatilityBand(1.0, 2.0)
BAND_2D = VolatilityBand(np.eye(2), 2 * np.eye(2))


def brute_force_diag(a_diag, lo, up, n=101):
    """Max of 1/2 sum a_i g_i^2 over a grid of diagonal gammas."""
    axes = [np.linspace(l, u, n) for l, u in zip(lo, up)]
    best = -np.inf
    for g in itertools.product(*axes):
        best = max(best, 0.5 * sum(a * gi * gi for a, gi in zip(a_diag, g)))
    return best


def random_band(rng, d):
    q = np.linalg.qr(rng.standard_normal((d, d)))[0]
    lo = (q * rng.uniform(0.5, 1.5, d)) @ q.T
    q2 = np.linalg.qr(rng.standard_normal((d, d)))[0]
    return VolatilityBand(lo, lo + (q2 * rng.uniform(0.2, 1.5, d)) @ q2.T)


def random_sym(rng, d):
    m = rng.standard_normal((d, d))
    return m + m.T


@pytest.mark.parametrize("a, expected", [(2.0, 4.0), (0.0, 0.0), (-2.0, -1.0)])
def test_g_1d(a, expected):
    assert eval_g_1d(a, BAND_1D) == expected


@pytest.mark.parametrize("y, expected", [(4.0, 2.0), (0.0, 0.0), (-1.0, -2.0)])
def test_g_inverse_1d(y, expected):
    assert eval_g_inverse_1d(y, BAND_1D) == expected


def test_scalar_ops_reject_matrix_band():
    with pytest.raises(BandError, match="band not scalar"):
        eval_g_1d(1.0, BAND_2D)
    with pytest.raises(BandError, match="band not scalar"):
        eval_g_inverse_1d(1.0, BAND_2D)


@given(st.floats(-1e6, 1e6))
def test_inverse_round_trip(y):
    assert eval_g_1d(eval_g_inverse_1d(y, BAND_1D), BAND_1D) == pytest.approx(y, abs=1e-12, rel=1e-15)


def test_g_matrix_examples():
    oracle = brute_force_diag([1.0, -1.0], [1, 1], [2, 2])
    assert oracle == pytest.approx(1.5)
    assert eval_g_matrix(np.diag([1.0, -1.0]), BAND_2D) == pytest.approx(oracle, abs=1e-12)
    assert eval_g_matrix(np.eye(2), BAND_2D) == pytest.approx(4.0)
    assert eval_g_matrix(-np.eye(2), BAND_2D) == pytest.approx(-1.0)


def test_g_matrix_ascent_reproduces_examples():
    opts = AscentOptions(force_ascent=True)
    for a, expected in [(np.diag([1.0, -1.0]), 1.5), (np.eye(2), 4.0), (-np.eye(2), -1.0)]:
        info = eval_g_matrix(a, BAND_2D, opts, return_info=True)
        assert info.converged
        assert info.value == pytest.approx(expected, abs=1e-8)
        assert BAND_2D.contains(info.gamma)


def test_g_matrix_1d_matches_scalar_formula_exactly():
    for a in np.linspace(-3, 3, 13):
        assert eval_g_matrix([[a]], BAND_1D) == eval_g_1d(a, BAND_1D)


def test_commuting_closed_form_is_only_a_lower_bound_in_general():
    # sigma_upper not scalar on the positive part of A: off-diagonal
    # volatility beats the diagonal candidate
    band = VolatilityBand(np.diag([0.1, 0.1]), np.diag([1.0, 10.0]))
    a = np.diag([1.0, 0.0])
    closed = closed_form_g(a, band)
    info = eval_g_matrix(a, band, return_info=True)
    assert closed == pytest.approx(0.5)
    assert info.value > closed + 0.5
    assert not info.exact
    assert band.contains(info.gamma)
    # the value is attained by the certified gamma
    assert info.value == pytest.approx(0.5 * np.trace(a @ info.gamma @ info.gamma))


def test_commuting_grid_search_matches():
    rng = np.random.default_rng(3)
    for d in (2, 3):
        q = np.linalg.qr(rng.standard_normal((d, d)))[0]
        lo = rng.uniform(0.5, 1.0, d)
        up = lo + rng.uniform(0.3, 1.0, d)
        up[:] = up.max()
        a = rng.standard_normal(d)
        band = VolatilityBand((q * lo) @ q.T, (q * up) @ q.T)
        value = eval_g_matrix((q * a) @ q.T, band)
        assert value == pytest.approx(brute_force_diag(a, lo, up, n=41), abs=1e-6)


@pytest.mark.parametrize("band, expected", [
    (VolatilityBand(np.diag([1.0, 0.5]), np.diag([2.0, 1.0])), 0.25),
    (BAND_1D, 1.0),
])
def test_nondegeneracy_delta(band, expected):
    assert nondegeneracy_delta(band) == pytest.approx(expected)


def test_nondegeneracy_delta_non_diagonal():
    lo = np.array([[2.0, 1.0], [1.0, 2.0]])
    band = VolatilityBand(_sqrtm(lo), _sqrtm(lo) + np.eye(2))
    # eigenvalues of [[2,1],[1,2]] from the characteristic polynomial:
    # (2-l)^2 - 1 = 0 -> l in {1, 3}
    assert nondegeneracy_delta(band) == pytest.approx(1.0)


def _sqrtm(m):
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(w)) @ v.T


def test_project_to_band():
    assert project_to_band(3.0, BAND_1D)[0, 0] == 2.0
    assert project_to_band(0.2, BAND_1D)[0, 0] == 1.0
    m = np.array([[1.5, 0.1], [0.1, 1.5]])
    assert np.array_equal(project_to_band(m, BAND_2D), m)
    assert np.allclose(project_to_band(np.zeros((2, 2)), BAND_2D), np.eye(2))


def test_project_lands_in_band_and_is_idempotent():
    rng = np.random.default_rng(11)
    for _ in range(50):
        d = int(rng.integers(1, 5))
        band = random_band(rng, d)
        p = project_to_band(3 * random_sym(rng, d), band)
        assert band.contains(p, tol=1e-10)
        assert np.allclose(project_to_band(p, band), p, atol=1e-10)


def test_random_gamma_is_feasible():
    rng = np.random.default_rng(5)
    for d in (1, 2, 4):
        band = random_band(rng, d)
        for _ in range(20):
            assert band.contains(random_gamma(band, rng))


def test_band_validation():
    with pytest.raises(BandError):
        VolatilityBand(2.0, 1.0)
    with pytest.raises(BandError):
        VolatilityBand(0.0, 1.0)
    with pytest.raises(BandError):
        VolatilityBand(1.0, 1.0)
    assert VolatilityBand.singleton(1.0).is_singleton
    # symmetrised on construction
    band = VolatilityBand([[1.0, 1e-13], [0.0, 1.0]], 2 * np.eye(2))
    assert np.array_equal(band.sigma_lower, band.sigma_lower.T)


def test_singleton_band_is_linear():
    band = VolatilityBand.singleton(np.diag([1.0, 2.0]))
    a = np.array([[1.0, 3.0], [3.0, -2.0]])
    assert eval_g_matrix(a, band) == pytest.approx(0.5 * np.trace(a @ np.diag([1.0, 4.0])))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 50.0))
def test_homogeneity(seed, lam):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 4))
    band, a = random_band(rng, d), random_sym(rng, d)
    assert eval_g_matrix(lam * a, band) == pytest.approx(lam * eval_g_matrix(a, band), abs=1e-8, rel=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_monotone_sublinear_nondegenerate(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 4))
    band = random_band(rng, d)
    a, b = random_sym(rng, d), random_sym(rng, d)
    p = rng.standard_normal((d, d))
    p = p @ p.T
    ga, gb = eval_g_matrix(a, band), eval_g_matrix(b, band)
    gap = eval_g_matrix(a + p, band)
    assert gap >= ga - 1e-8
    assert eval_g_matrix(a + b, band) <= ga + gb + 1e-8
    assert gap - ga >= 0.5 * nondegeneracy_delta(band) * np.trace(p) - 1e-8
