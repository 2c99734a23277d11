import math

import numpy as np
import pytest
from scipy.optimize import minimize
from sklearn.metrics.pairwise import rbf_kernel as pairwise_rbf

from common.errors import ConfigurationError, ConvergenceWarning
from conftest import make_matrix
from detectors.ocsvm import OcsvmModel, decision_sums, fit_ocsvm, median_gamma, rbf_kernel, score_ocsvm, solve_dual
from detectors.registry import load_model, save_model
from detectors.scaling import fit_autoscale


def _qp_oracle(kernel, upper):
    n = len(kernel)
    result = minimize(
        lambda a: 0.5 * a @ kernel @ a,
        np.full(n, 1.0 / n),
        jac=lambda a: kernel @ a,
        bounds=[(0.0, upper)] * n,
        constraints=[{"type": "eq", "fun": lambda a: a.sum() - 1.0, "jac": lambda a: np.ones(n)}],
        method="SLSQP",
        options={"ftol": 1e-14, "maxiter": 1000},
    )
    return float(result.fun)


@pytest.fixture
def calibration(rng):
    return make_matrix(rng.normal(10.0, 2.0, size=(500, 5)))


def test_rbf_kernel():
    assert rbf_kernel([0, 0], [1, 1], 0.5) == pytest.approx(math.exp(-1.0))
    assert rbf_kernel([3, 4], [3, 4], 2.0) == 1.0
    with pytest.raises(ConfigurationError):
        rbf_kernel([0, 0], [1, 1, 1], 0.5)
    with pytest.raises(ConfigurationError):
        rbf_kernel([0, 0], [1, 1], 0.0)


def test_median_heuristic():
    z = np.array([[0.0], [1.0], [3.0]])
    # pairwise distances 1, 2, 3
    assert median_gamma(z) == pytest.approx(1.0 / 8.0)
    assert median_gamma(np.zeros((4, 2))) == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_solver_matches_a_qp_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 13))
    nu = float(rng.choice([0.2, 0.3, 0.5]))
    kernel = pairwise_rbf(rng.normal(size=(n, 3)), gamma=0.5)
    upper = 1.0 / (nu * n)
    result = solve_dual(kernel, n, upper, tol=1e-9, max_iter=10000)
    objective = 0.5 * result.alphas @ kernel @ result.alphas
    assert result.converged
    assert abs(objective - _qp_oracle(kernel, upper)) <= 1e-4


def test_fitted_model_respects_the_box(calibration):
    nu = 0.1
    model = fit_ocsvm(calibration, nu=nu)
    n = calibration.n_windows
    assert model.converged
    assert abs(model.alphas.sum() - 1.0) <= 1e-6
    assert model.alphas.min() > 0
    assert model.alphas.max() <= model.upper_bound + 1e-15
    assert model.upper_bound == pytest.approx(1.0 / (nu * n))
    outliers = np.mean(score_ocsvm(model, calibration) > 0)
    assert outliers <= nu + 2.0 / math.sqrt(n)


def test_objective_trace_never_increases(calibration):
    model = fit_ocsvm(calibration, nu=0.05)
    trace = np.asarray(model.objective_trace)
    assert len(trace) >= 2
    assert np.all(np.diff(trace) <= 1e-12)


def test_outlying_windows_score_higher(calibration, rng):
    model = fit_ocsvm(calibration)
    inliers = rng.normal(10.0, 2.0, size=(20, 5))
    outliers = inliers + 15.0
    scores = score_ocsvm(model, make_matrix(np.vstack([inliers, outliers])))
    assert scores[20:].min() > scores[:20].max()


def test_infeasible_nu_is_a_configuration_error(rng):
    with pytest.raises(ConfigurationError):
        fit_ocsvm(make_matrix(rng.normal(size=(100, 3))), nu=0.001)
    with pytest.raises(ConfigurationError):
        fit_ocsvm(make_matrix(rng.normal(size=(100, 3))), nu=0.5, gamma=-1.0)
    with pytest.raises(ConfigurationError):
        fit_ocsvm(make_matrix(rng.normal(size=(100, 3))), nu=0.5, max_iter=0)


def test_exhausted_budget_warns_and_is_recorded(calibration):
    with pytest.warns(ConvergenceWarning):
        model = fit_ocsvm(calibration, nu=0.1, tol=1e-14, max_iter=1)
    assert not model.converged
    # one sweep is N pair updates
    assert model.iterations == calibration.n_windows
    assert model.kkt_violation > 0


def test_fit_is_deterministic(calibration):
    first = fit_ocsvm(calibration)
    second = fit_ocsvm(calibration)
    assert np.array_equal(first.alphas, second.alphas)
    assert first.rho == second.rho


def test_subsampling_caps_the_solved_size(calibration):
    model = fit_ocsvm(calibration, nu=0.1, max_rows=100)
    assert model.calibration_size == 100


def test_model_file_preserves_scores(calibration, tmp_path):
    model = fit_ocsvm(calibration)
    save_model(model, tmp_path / "ocsvm.json")
    loaded = load_model(tmp_path / "ocsvm.json")
    assert isinstance(loaded, OcsvmModel)
    assert loaded.objective_trace == model.objective_trace
    np.testing.assert_allclose(score_ocsvm(loaded, calibration), score_ocsvm(model, calibration), rtol=0, atol=1e-12)


@pytest.mark.parametrize("nu", [0.05, 0.1, 0.2])
def test_nu_bounds_outliers_and_support_vectors(calibration, nu):
    model = fit_ocsvm(calibration, nu=nu)
    n = calibration.n_windows
    slack = 2.0 / math.sqrt(n)
    assert np.mean(score_ocsvm(model, calibration) > 0) <= nu + slack
    assert len(model.alphas) / n >= nu - slack


def test_duplicating_the_calibration_leaves_scores_unchanged(rng):
    calibration = make_matrix(rng.normal(5.0, 1.0, size=(100, 3)))
    doubled = make_matrix(np.vstack([calibration.counts, calibration.counts]))
    scaling = fit_autoscale(calibration)
    queries = make_matrix(rng.normal(5.0, 2.0, size=(50, 3)))
    single = fit_ocsvm(calibration, nu=0.2, gamma=0.3, tol=1e-10, scaling=scaling)
    double = fit_ocsvm(doubled, nu=0.2, gamma=0.3, tol=1e-10, scaling=scaling)
    assert single.converged and double.converged
    np.testing.assert_allclose(score_ocsvm(double, queries), score_ocsvm(single, queries), rtol=0, atol=1e-6)


def test_free_support_vectors_lie_on_the_boundary(calibration):
    model = fit_ocsvm(calibration, nu=0.1)
    free = model.alphas < model.upper_bound * (1 - 1e-9)
    assert free.any()
    scores = model.rho - decision_sums(model, model.support_vectors[free])
    assert np.abs(scores).max() <= 1e-4 + 1e-9
