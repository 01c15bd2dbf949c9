import math

import numpy as np
import pytest

from lurking.effects import (
    ChangePoint,
    default_t_grid,
    dominant_change_points,
    effect_curves,
    gradual_effect,
    marginal_prediction,
    prediction_curve,
    sudden_series,
)
from lurking.estimator import Dataset, FitConfig, fit, rebuild
from lurking.simgen import ToySpec, gen_toy


def _gauss_unit(m):
    nodes, weights = np.polynomial.legendre.leggauss(m)
    return 0.5 * (nodes + 1.0), 0.5 * weights


def test_gradual_matches_quadrature_of_predictor(toy_fit):
    res, _ = toy_fit
    x, w = _gauss_unit(2000)
    t_grid = np.linspace(0.0, 1.0, 21)
    g = gradual_effect(res, t_grid)
    for tk, gk in zip(t_grid, g):
        query = np.column_stack([x, np.full_like(x, tk)])
        brute = float(w @ res.predictor.mean(query))
        assert gk == pytest.approx(brute, abs=1e-6)


def test_marginal_prediction_matches_quadrature_over_t(toy_fit):
    res, _ = toy_fit
    t, w = _gauss_unit(2000)
    xs = np.linspace(0.0, 1.0, 7)
    m = marginal_prediction(res, xs)
    for xk, mk in zip(xs, m):
        query = np.column_stack([np.full_like(t, xk), t])
        assert mk == pytest.approx(float(w @ res.predictor.mean(query)), abs=1e-6)


def test_gradual_on_constant_data_is_flat():
    rng = np.random.default_rng(3)
    ds = Dataset.from_run_order(rng.random((30, 1)), np.full(30, 4.25))
    res = fit(ds, FitConfig(seed=0))
    g = gradual_effect(res)
    np.testing.assert_allclose(g, 4.25, atol=1e-6)
    delta, points = sudden_series(res)
    assert points == ()
    np.testing.assert_array_equal(delta, 0.0)


def test_toy_gradual_tracks_increasing_trend(toy_fit):
    from scipy.stats import spearmanr

    res, _ = toy_fit
    t_grid = default_t_grid()
    assert spearmanr(t_grid, gradual_effect(res, t_grid)).statistic >= 0.9


def test_gradual_rejects_grid_outside_unit_interval(toy_fit):
    res, _ = toy_fit
    with pytest.raises(ValueError):
        gradual_effect(res, [0.0, 1.5])


def test_gradual_is_linear_in_residual(toy_fit):
    res, _ = toy_fit
    data = res.dataset
    order = res.time_order
    resid = np.empty(data.n)
    resid[order] = data.y[order] - res.coeffs.mu - res.delta
    base = np.empty(data.n)
    base[order] = res.coeffs.mu + res.delta
    doubled = Dataset(data.X, data.t, base + 2.0 * resid, data.x_range, data.t_range)
    res2 = rebuild(doubled, res.hyper, res.coeffs)
    t_grid = np.linspace(0, 1, 31)
    mu = res.hyper.mu
    g1 = gradual_effect(res, t_grid) - mu
    g2 = gradual_effect(res2, t_grid) - mu
    np.testing.assert_allclose(g2, 2.0 * g1, rtol=1e-9, atol=1e-12)


def test_gradual_ignores_storage_order(toy_fit):
    res, _ = toy_fit
    perm = np.random.default_rng(8).permutation(res.dataset.n)
    d = res.dataset
    shuffled = Dataset(d.X[perm], d.t[perm], d.y[perm], d.x_range, d.t_range)
    res2 = fit(shuffled, res.config)
    t_grid = np.linspace(0, 1, 51)
    np.testing.assert_allclose(gradual_effect(res2, t_grid), gradual_effect(res, t_grid),
                               rtol=1e-9, atol=1e-9)


def test_sudden_series_round_trip(toy_fit):
    res, _ = toy_fit
    delta, points = sudden_series(res)
    assert delta.shape == (res.dataset.n,)
    assert delta[0] == 0.0
    tail = res.coeffs.e_tail
    scale = max(1.0, float(np.max(np.abs(delta))))
    np.testing.assert_allclose(np.diff(delta), tail, rtol=0, atol=1e-13 * scale)
    nonzero = np.flatnonzero(tail)
    assert [p.index for p in points] == list(nonzero + 2)
    assert all(p.index >= 2 for p in points)
    for p in points:
        assert p.jump == tail[p.index - 2]
        assert np.diff(delta)[p.index - 2] == pytest.approx(p.jump, abs=1e-13 * scale)


def test_sudden_series_reports_raw_time():
    rng = np.random.default_rng(5)
    n = 40
    y = 0.05 * rng.standard_normal(n)
    y[20:] += 2.0
    raw_t = 1000.0 + 3.0 * np.arange(n)
    ds = Dataset.from_raw(rng.random((n, 1)), raw_t, y)
    res = fit(ds, FitConfig(seed=0))
    _, points = sudden_series(res)
    assert points
    for p in points:
        assert p.time == pytest.approx(raw_t[p.index - 1])
    big = max(points, key=lambda p: abs(p.jump))
    assert abs(big.index - 21) <= 1


def test_sudden_series_empty_without_shocks():
    ds, _ = gen_toy(ToySpec(seed=4, levels=20))
    res = fit(ds, FitConfig(seed=0, sudden=False))
    delta, points = sudden_series(res)
    assert points == ()
    np.testing.assert_array_equal(delta, 0.0)


def test_sudden_series_magnitude_filter(toy_fit):
    res, _ = toy_fit
    delta, points = sudden_series(res)
    cut = float(np.median([abs(p.jump) for p in points]))
    delta2, filtered = sudden_series(res, min_abs=cut)
    np.testing.assert_array_equal(delta2, delta)
    assert {p.index for p in filtered} == {p.index for p in points if abs(p.jump) > cut}


def test_toy_reports_five_dominant_change_points(toy_fit):
    res, truth = toy_fit
    _, points = sudden_series(res)
    events = dominant_change_points(points)
    assert len(events) == 5
    signs = np.sign(truth.shocks[np.array(truth.shock_indices) - 1])
    for ev, true_idx, s in zip(events, truth.shock_indices, signs):
        assert abs(ev.index - true_idx) <= 2
        assert np.sign(ev.jump) == s


def test_dominant_change_points_groups_and_cuts():
    pts = [
        ChangePoint(10, 10.0, 0.3),
        ChangePoint(11, 11.0, 0.2),   # same step split over two indices
        ChangePoint(30, 30.0, -0.45),
        ChangePoint(31, 31.0, 0.02),  # opposite sign, not merged
        ChangePoint(60, 60.0, 0.04),
        ChangePoint(80, 80.0, 1e-6),  # below the dust floor
    ]
    events = dominant_change_points(pts)
    assert [e.index for e in events] == [10, 30]
    assert events[0].jump == pytest.approx(0.5)
    assert events[1].jump == pytest.approx(-0.45)


def test_dominant_change_points_keeps_all_without_a_gap():
    pts = [ChangePoint(i, float(i), 0.5 - 0.05 * k) for k, i in enumerate((5, 20, 40))]
    assert len(dominant_change_points(pts)) == 3
    assert dominant_change_points([]) == ()


def test_prediction_at_training_points(toy_fit):
    res, _ = toy_fit
    data = res.dataset.sorted_by_time()
    mean, sd = prediction_curve_at(res, data)
    target = data.y - res.delta
    # algebraic identity: the smoother leaves exactly eta * alpha behind
    np.testing.assert_allclose(target - mean, res.hyper.eta * res.predictor.alpha,
                               rtol=1e-8, atol=1e-10)
    sigma = math.sqrt(res.hyper.sigma2)
    assert np.mean(np.abs(target - mean) <= 2.0 * sigma) >= 0.9
    assert np.all(sd >= 0)


def prediction_curve_at(res, data):
    out = [prediction_curve(res, data.X[i:i + 1], data.t[i]) for i in range(data.n)]
    return np.array([m[0] for m, _ in out]), np.array([s[0] for _, s in out])


def test_far_time_slice_reverts_to_mean(toy_fit):
    res, _ = toy_fit
    x = np.linspace(0, 1, 11)
    mean, sd = prediction_curve(res, x, t_fixed=1e3)
    np.testing.assert_allclose(mean, res.hyper.mu, atol=1e-8)
    np.testing.assert_allclose(sd, math.sqrt(res.hyper.tau2), rtol=1e-8)


def test_prediction_checks_columns(toy_fit):
    res, _ = toy_fit
    with pytest.raises(ValueError):
        prediction_curve(res, np.zeros((3, 2)), 0.5)


def test_effect_curves_bundle(toy_fit):
    res, _ = toy_fit
    curves = effect_curves(res, x_grid=np.linspace(0, 1, 9))
    np.testing.assert_array_equal(curves.gradual, gradual_effect(res, curves.t_grid))
    assert curves.prediction_grid.shape == (9, 2)
    assert curves.t_grid.size == 200


@pytest.mark.slow
def test_toy_prediction_beats_gp_without_shocks():
    wins = 0
    for seed in range(30):
        ds, truth = gen_toy(ToySpec(seed=seed))
        rmse = []
        for sudden in (True, False):
            res = fit(ds, FitConfig(seed=seed, sudden=sudden))
            mean, _ = prediction_curve(res, truth.x_grid, 0.5)
            rmse.append(math.sqrt(np.mean((mean - truth.f_grid) ** 2)))
        wins += rmse[0] < rmse[1]
    assert wins >= 24
