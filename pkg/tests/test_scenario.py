import numpy as np
import pytest

from gcalc import streams
from gcalc.gcore import BandError, VolatilityBand
from gcalc.scenario import (
    BangBang,
    CoefficientSet,
    ControlPath,
    Feedback,
    Fixed,
    SimulationError,
    TimeGrid,
    coarsen,
    default_family,
    estimate_upper_expectation,
    euler_gsde,
    path_rows,
    sample_control,
    simulate_batch,
    simulate_gbm,
)

BAND = VolatilityBand(1.0, 2.0)
GRID = TimeGrid(0.0, 1.0, 16)


def test_streams_are_keyed_not_sequential():
    full = streams.normals(9, np.arange(50), 20, 2)
    part = streams.normals(9, [17, 3], 20, 2)
    assert np.array_equal(part[0], full[17])
    assert np.array_equal(part[1], full[3])
    assert not np.array_equal(streams.normals(10, [3], 20, 2)[0], full[3])


def test_streams_moments():
    z = streams.normals(1, np.arange(2000), 50, 1).ravel()
    assert abs(z.mean()) < 4 / np.sqrt(z.size)
    assert abs(z.var() - 1) < 0.02
    # lag-one correlation along the step axis
    z2 = streams.normals(1, np.arange(2000), 50, 1)[..., 0]
    assert abs(np.mean(z2[:, 1:] * z2[:, :-1])) < 0.01


def test_fixed_policy():
    c = sample_control(BAND, GRID, Fixed(2.0))
    assert np.all(c.gammas == 2.0)
    with pytest.raises(BandError):
        sample_control(BAND, GRID, Fixed(2.5))


def test_bang_bang_policy():
    c = sample_control(BAND, TimeGrid(0, 1, 2), BangBang(("+", "-")))
    assert c.gammas[:, 0, 0].tolist() == [2.0, 1.0]
    cyc = sample_control(BAND, TimeGrid(0, 1, 5), BangBang(("+", "−")))
    assert cyc.gammas[:, 0, 0].tolist() == [2.0, 1.0, 2.0, 1.0, 2.0]


@pytest.mark.parametrize("policy", ["constant_random", "piecewise_random"])
def test_sampling_is_deterministic_and_in_band(policy):
    band = VolatilityBand(np.eye(2), np.array([[2.0, 0.3], [0.3, 2.5]]))
    a = sample_control(band, GRID, policy, 42)
    b = sample_control(band, GRID, policy, 42)
    assert np.array_equal(a.gammas, b.gammas)
    for g in a.gammas:
        assert band.contains(g)


def test_control_path_rejects_outside_band():
    with pytest.raises(BandError, match="step 3"):
        g = np.full((16, 1, 1), 1.5)
        g[3] = 0.5
        ControlPath(GRID, g, BAND)


def test_simulate_gbm_basic_facts():
    p = simulate_gbm(sample_control(BAND, GRID, Fixed(2.0)), 1, 0)
    assert p.QV[-1, 0, 0] == pytest.approx(4.0, abs=1e-14)
    assert np.all(p.B[0] == 0) and np.all(p.QV[0] == 0)
    assert np.array_equal(p.B[1:], np.cumsum(p.dB, axis=0))
    assert np.array_equal(p.qv_increments[:, 0, 0], np.full(16, 4.0 * GRID.dt))


def test_simulate_mean_zero():
    grid = TimeGrid(0, 1, 1)
    c = sample_control(BAND, grid, Fixed(1.0))
    ens = simulate_batch([c] * 100_000, BAND, grid, 5, np.arange(100_000))
    assert abs(ens.B[:, -1, 0].mean()) < 0.01


def test_determinism_independent_of_batching():
    c = sample_control(BAND, GRID, "piecewise_random", 2)
    ens = simulate_batch([c] * 10, BAND, GRID, 77, np.arange(10))
    single = simulate_gbm(c, 77, 6)
    assert np.array_equal(single.B, ens.B[6])
    assert np.array_equal(single.dB, ens.dB[6])


def test_band_respect_of_qv():
    band = VolatilityBand(np.eye(2), np.array([[2.0, 0.3], [0.3, 2.5]]))
    c = sample_control(band, GRID, "piecewise_random", 3)
    p = simulate_gbm(c, 1, 0)
    rate = p.qv_increments / GRID.dt
    lo = np.linalg.eigvalsh(rate - band.lower_sq)
    hi = np.linalg.eigvalsh(band.upper_sq - rate)
    assert lo.min() > -1e-10 and hi.min() > -1e-10


def test_feedback_controls_and_coarsening():
    fb = Feedback(lambda t, b: (b[:, 0] > 0).astype(float))
    ens = simulate_batch([fb] * 4, BAND, TimeGrid(0, 1, 8), 1, np.arange(4), hold=4)
    assert ens.grid.n_steps == 32
    c = coarsen(ens, 4)
    assert np.allclose(c.B, ens.B[:, ::4])
    assert np.allclose(c.QV, ens.QV[:, ::4])
    for k in range(8):
        expected = np.where(ens.B[:, 4 * k, 0] > 0, 2.0, 1.0)
        assert np.array_equal(c.controls[0].gammas[k, 0, 0], expected[0])
    with pytest.raises(ValueError):
        coarsen(ens, 8)


@pytest.mark.parametrize("b, h, s, expect", [
    (0.0, 0.0, 1.0, lambda p: 0.5 + p.B[:, 0]),
    (1.0, 0.0, 0.0, lambda p: 0.5 + p.grid.times),
    (0.0, 1.0, 0.0, lambda p: 0.5 + p.QV[:, 0, 0]),
])
def test_euler_examples(b, h, s, expect):
    p = simulate_gbm(sample_control(BAND, GRID, "piecewise_random", 1), 3, 0)
    out = euler_gsde(CoefficientSet.scalar(b, h, s), 0.5, p)
    assert np.allclose(out.X[:, 0], expect(p), rtol=0, atol=1e-14)


def test_euler_blow_up_reports_step():
    p = simulate_gbm(sample_control(BAND, GRID, Fixed(1.0)), 3, 0)
    coeffs = CoefficientSet.scalar(lambda t, x: 1e200 * (1 + x * x), 0.0, 0.0)
    with pytest.raises(SimulationError, match="blow-up at step") as exc:
        euler_gsde(coeffs, 1.0, p)
    assert exc.value.step is not None


def test_coefficient_checks():
    ok = CoefficientSet.scalar(lambda t, x: np.sin(x), 0.0, 1.0, lipschitz_K=1.0)
    ok.check(np.linspace(-3, 3, 20)[:, None])
    bad = CoefficientSet.scalar(lambda t, x: 5 * x, 0.0, 1.0, lipschitz_K=1.0)
    with pytest.raises(ValueError, match="Lipschitz"):
        bad.check(np.linspace(-3, 3, 20)[:, None])


def test_upper_expectation_examples():
    grid = TimeGrid(0, 1, 1)
    est = estimate_upper_expectation(lambda x: x[:, 0] ** 2, BAND, grid, 2, 10**6, 7)
    assert abs(est.value - 4.0) <= 3 * est.std_error
    assert est.argmax == 1
    neg = estimate_upper_expectation(lambda x: -x[:, 0] ** 2, BAND, grid, 2, 10**6, 7)
    assert abs(neg.value + 1.0) <= 3 * neg.std_error
    const = estimate_upper_expectation(lambda x: np.full(len(x), 3.0), BAND, grid, 3, 10, 7)
    assert const.value == 3.0


def test_family_contains_endpoints_and_is_monotone():
    fam = default_family(BAND, GRID, 6, 1)
    assert np.all(fam[0].gammas == 1.0) and np.all(fam[1].gammas == 2.0)
    payoff = lambda x: np.abs(x[:, 0])  # noqa: E731
    small = estimate_upper_expectation(payoff, BAND, GRID, 0, 200, 4, controls=fam[:3])
    large = estimate_upper_expectation(payoff, BAND, GRID, 0, 200, 4, controls=fam)
    assert large.value >= small.value


def test_thread_count_does_not_change_results(monkeypatch):
    payoff = lambda x: x[:, 0] ** 3  # noqa: E731
    monkeypatch.setenv("GCALC_THREADS", "1")
    a = estimate_upper_expectation(payoff, BAND, GRID, 5, 500, 9)
    monkeypatch.setenv("GCALC_THREADS", "4")
    b = estimate_upper_expectation(payoff, BAND, GRID, 5, 500, 9)
    assert np.array_equal(a.means, b.means)


def test_singleton_band_matches_single_measure_monte_carlo():
    band = VolatilityBand.singleton(1.5)
    est = estimate_upper_expectation(lambda x: x[:, 0] ** 2, band, GRID, 4, 1000, 3)
    c = sample_control(band, GRID, Fixed(1.5))
    ens = simulate_batch([c] * 1000, band, GRID, 3, np.arange(1000))
    assert est.means[0] == np.mean(ens.B[:, -1, 0] ** 2)


def test_path_rows_layout():
    band = VolatilityBand(np.eye(2), 2 * np.eye(2))
    p = simulate_gbm(sample_control(band, TimeGrid(0, 1, 3), Fixed(np.eye(2))), 0, 0)
    header, rows = path_rows(p)
    assert header == ["k", "t", "B_1", "B_2", "QV_11", "QV_12", "QV_21", "QV_22"]
    assert len(rows) == 4 and len(rows[0]) == len(header)
