import math

import numpy as np
import pytest
from scipy import integrate

from lurking.effects import gradual_effect
from lurking.estimator import (
    Dataset,
    FitConfig,
    Hyperparameters,
    fit,
    optimize_hyperparameters,
    profile_objective,
    tau2_update,
)
from lurking.gp import factorize, quad_form
from lurking.kernel import KernelSpec, corr_matrix, dx_weights
from lurking.simgen import ToySpec, gen_toy
from lurking.sparse import ChangeCoefficients, apply_U, cumsum_matrix

SQRT8 = 2 * math.sqrt(2)


def test_dataset_rejects_duplicate_times():
    with pytest.raises(ValueError, match="distinct"):
        Dataset(np.zeros((3, 1)), [0.0, 0.5, 0.5], [1.0, 2.0, 3.0])


def test_dataset_rejects_missing_and_unscaled():
    with pytest.raises(ValueError, match="non-finite"):
        Dataset(np.zeros((2, 1)), [0.0, 1.0], [1.0, np.nan])
    with pytest.raises(ValueError, match="scaled"):
        Dataset(np.full((2, 1), 2.0), [0.0, 1.0], [1.0, 2.0])


def test_from_raw_scales_and_keeps_ranges():
    ds = Dataset.from_raw([[100.0], [300.0], [200.0]], [5.0, 7.0, 6.0], [1, 2, 3])
    np.testing.assert_allclose(ds.X[:, 0], [0, 1, 0.5])
    np.testing.assert_allclose(ds.t, [0, 1, 0.5])
    np.testing.assert_allclose(ds.raw_x(ds.X), [[100], [300], [200]])
    assert ds.raw_t(0.5) == 6.0
    np.testing.assert_array_equal(ds.time_order, [0, 2, 1])


def test_run_order_time():
    ds = Dataset.from_run_order(np.zeros((5, 1)), np.arange(5.0))
    np.testing.assert_allclose(ds.t, np.arange(5) / 4)


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(theta_bounds=(5.0, 1.0))
    with pytest.raises(ValueError):
        FitConfig(likelihood_constant=2)
    with pytest.raises(ValueError):
        FitConfig(k_folds=0)
    assert FitConfig().replace(seed=4).seed == 4


def test_tau2_update_examples():
    n = 7
    assert tau2_update(3 * n, 0.0, 0.0, n, constant=3) == 1.0
    assert tau2_update(0.0, 2.0, 3.0, 1, constant=3) == 2.0
    assert tau2_update(0.0, 0.0, 0.0, 5) == 1e-12


def test_profile_objective_scalar_case():
    ds = Dataset(np.array([[0.3]]), [0.0], [2.5])
    coeffs = ChangeCoefficients(1.0, np.zeros(0))
    eta = 0.2
    quad = (2.5 - 1.0) ** 2 / (1 + eta)
    value = profile_objective(KernelSpec([1.0], 1.0), eta, ds, coeffs, 0.0, constant=3)
    assert value == pytest.approx(3 * math.log(quad / 3) + math.log(1 + eta), rel=1e-13)


def _small_instance(seed=3, n=20):
    rng = np.random.default_rng(seed)
    x = rng.random(n)
    t = np.arange(n) / (n - 1)
    y = np.sin(4 * x) + 0.5 * t + 0.05 * rng.standard_normal(n)
    y[12:] += 0.7
    tail = np.zeros(n - 1)
    tail[11] = 0.7
    return Dataset(x[:, None], t, y), ChangeCoefficients(float(np.mean(y[:12])), tail)


def test_profile_objective_is_pure():
    ds, coeffs = _small_instance()
    a = profile_objective(KernelSpec([3.0], 0.5), 0.01, ds, coeffs, 0.4)
    b = profile_objective(KernelSpec([3.0], 0.5), 0.01, ds, coeffs, 0.4)
    assert a == b


def test_profile_objective_matches_direct_formula():
    ds, coeffs = _small_instance()
    spec, eta, lam = KernelSpec([3.0], 0.5), 0.01, 0.4
    R = corr_matrix(ds.design, spec)
    resid = ds.y - coeffs.mu - apply_U(coeffs)
    quad = float(resid @ np.linalg.solve(R + eta * np.eye(ds.n), resid))
    tau2 = (quad + lam * coeffs.l1) / ds.n
    expected = ds.n * math.log(tau2) + np.linalg.slogdet(R + eta * np.eye(ds.n))[1]
    assert profile_objective(spec, eta, ds, coeffs, lam) == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("constant", [1, 3])
def test_optimizer_reaches_grid_minimum(constant):
    ds, coeffs = _small_instance()
    lam = 0.05
    config = FitConfig(likelihood_constant=constant)
    spec, eta, value = optimize_hyperparameters(ds, coeffs, lam, config)
    lt = np.linspace(math.log(1e-2), math.log(1e4), 41)
    le = np.linspace(math.log(1e-8), math.log(10.0), 41)
    best = math.inf
    for a in lt:
        for b in lt:
            for c in le:
                v = profile_objective(KernelSpec([math.exp(a)], math.exp(b)), math.exp(c), ds, coeffs,
                                      lam, constant)
                best = min(best, v)
    assert value == pytest.approx(profile_objective(spec, eta, ds, coeffs, lam, constant), rel=1e-12)
    assert value <= best + 0.005 * abs(best)


def test_constant_response():
    rng = np.random.default_rng(0)
    ds = Dataset.from_run_order(rng.random((20, 1)), np.full(20, 3.0))
    res = fit(ds)
    assert res.coeffs.mu == pytest.approx(3.0, abs=1e-6)
    assert np.all(res.delta == 0)
    q = np.column_stack([rng.random(30), rng.random(30)])
    np.testing.assert_allclose(res.predictor.mean(q), 3.0, atol=1e-6)


def test_too_few_rows():
    ds = Dataset.from_run_order(np.zeros((5, 1)), np.arange(5.0))
    with pytest.raises(ValueError, match="at least 10"):
        fit(ds)


def _gradual_sd(res, t_grid):
    """Posterior sd of the x-averaged process at each t (quadrature for the prior term)."""
    k = res.predictor.kernel
    design = res.predictor.train_design
    prior = 1.0
    for th in k.theta_x:
        prior *= 2 * integrate.quad(lambda s: (1 - s) * math.exp(-th * s * s), 0, 1)[0]
    d = dx_weights(design[:, :-1], k.theta_x)
    out = []
    for t in t_grid:
        w = d * np.exp(-k.theta_t * (t - design[:, -1]) ** 2)
        out.append(res.hyper.tau2 * max(prior - quad_form(res.predictor.factorization, w), 0.0))
    return np.sqrt(out)


def _pure_noise_passes(n):
    t_grid = np.linspace(0, 1, 25)
    passed = 0
    for seed in range(30):
        rng = np.random.default_rng(100 + seed)
        ds = Dataset.from_run_order(rng.random((n, 1)), 0.1 * rng.standard_normal(n))
        res = fit(ds, FitConfig(seed=seed))
        sigma = math.sqrt(res.hyper.sigma2)
        g = gradual_effect(res, t_grid)
        flat = np.all(np.abs(g - g.mean()) <= 3 * _gradual_sd(res, t_grid) + 1e-12)
        passed += bool(np.max(np.abs(res.delta)) < 3 * sigma and flat)
    return passed


def test_pure_noise_has_no_effects():
    # same run length as the toy benchmark (50 levels x 2 replicates)
    assert _pure_noise_passes(100) >= 27


def test_fit_result_invariants(toy_fit):
    res, _ = toy_fit
    h = res.hyper
    assert h.sigma2 == pytest.approx(h.eta * h.tau2, rel=1e-10, abs=1e-10)
    assert h.lam * h.nu == pytest.approx(SQRT8 * h.tau2, rel=1e-10)
    np.testing.assert_array_equal(res.delta, apply_U(res.coeffs))
    data = res.dataset.sorted_by_time()
    resid = data.y - res.coeffs.mu - res.delta
    fact = factorize(corr_matrix(data.design, h.theta), h.eta)
    L = fact.chol_lower
    assert np.linalg.norm(L @ (L.T @ res.predictor.alpha) - resid) <= 1e-8 * np.linalg.norm(resid)
    quad = quad_form(fact, data.y - cumsum_matrix(data.n) @ res.coeffs.as_vector())
    recomputed = tau2_update(quad, h.lam, res.coeffs.l1, data.n, res.config.likelihood_constant)
    assert recomputed == pytest.approx(h.tau2, rel=1e-10)
    assert res.converged


def test_hyper_step_does_not_increase_objective(toy_fit):
    res, _ = toy_fit
    before = profile_objective(res.hyper.theta, res.hyper.eta, res.dataset, res.coeffs, res.hyper.lam)
    spec, eta, after = optimize_hyperparameters(res.dataset, res.coeffs, res.hyper.lam,
                                                theta0=res.hyper.theta.theta, eta0=res.hyper.eta)
    assert after <= before


def test_storage_order_does_not_matter():
    ds, _ = gen_toy(ToySpec(replicates=1, seed=2))
    perm = np.random.default_rng(0).permutation(ds.n)
    shuffled = Dataset(ds.X[perm], ds.t[perm], ds.y[perm])
    a, b = fit(ds), fit(shuffled)
    np.testing.assert_array_equal(a.delta, b.delta)
    np.testing.assert_allclose(gradual_effect(a), gradual_effect(b), rtol=0, atol=1e-12)


def test_fit_is_bit_reproducible():
    ds, _ = gen_toy(ToySpec(replicates=1, seed=5))
    a, b = fit(ds, FitConfig(seed=3)), fit(ds, FitConfig(seed=3))
    assert a.trace == b.trace
    np.testing.assert_array_equal(a.coeffs.e_tail, b.coeffs.e_tail)
    np.testing.assert_array_equal(a.predictor.alpha, b.predictor.alpha)
    assert a.hyper == b.hyper


def test_shock_free_baseline():
    ds, _ = gen_toy(ToySpec(replicates=1, seed=1))
    res = fit(ds, FitConfig(sudden=False))
    assert np.all(res.delta == 0)
    assert res.hyper.lam == math.inf and res.hyper.nu == 0.0


def test_smaller_noise_still_localizes():
    from lurking.effects import dominant_change_points, sudden_series

    ds, truth = gen_toy(ToySpec(noise_sd=0.001, seed=0))
    _, points = sudden_series(fit(ds))
    found = dominant_change_points(points)
    assert [p.index for p in found] == pytest.approx(list(truth.shock_indices), abs=2)


def test_hyperparameters_algebra():
    h = Hyperparameters.from_estimates(1.0, 2.0, KernelSpec([1.0], 1.0), 0.5, 4.0)
    assert h.nu == pytest.approx(SQRT8 * 2.0 / 4.0)
    assert h.sigma2 == 1.0


def test_iterate_choice_prefers_sparsest_within_one_se():
    from lurking.estimator import _sparsest_within_se

    def state(nnz, score, se):
        tail = np.zeros(10)
        tail[:nnz] = 1.0
        return ((None, None, None, None, ChangeCoefficients(0.0, tail), None), score, se)

    # best score 1.0 with SE 0.1: scores up to 1.1 qualify, fewest jumps wins
    states = [state(8, 1.0, 0.1), state(3, 1.08, 0.2), state(1, 1.2, 0.1)]
    assert np.count_nonzero(_sparsest_within_se(states)[4].e_tail) == 3
    # equal sparsity falls back to the lower score
    states = [state(2, 1.05, 0.1), state(2, 1.0, 0.1)]
    assert _sparsest_within_se(states) is states[1][0]
