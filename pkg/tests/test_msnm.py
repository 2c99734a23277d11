import numpy as np
import pytest

from common.errors import ConfigurationError, FeatureMismatchError, NumericalError
from conftest import make_matrix
from detectors.msnm import MsnmModel, fit_msnm, score_msnm
from detectors.registry import load_model, save_model
from detectors.scaling import fit_autoscale


def test_autoscaling_uses_sample_deviation():
    matrix = make_matrix([[1, 5], [3, 5], [5, 5]])
    params = fit_autoscale(matrix)
    assert params.mu.tolist() == [3, 5]
    assert params.sigma.tolist() == [2, 0]
    assert params.zero_sigma_features == {"f1"}
    assert params.transform([[7, 9]]).tolist() == [[2, 0]]


def test_variance_fraction_selects_the_smallest_sufficient_model(background_matrix):
    model = fit_msnm(background_matrix, variance_fraction=0.95)
    z = model.scaling.transform(background_matrix.counts)
    eigenvalues = np.sort(np.linalg.eigvalsh(np.cov(z, rowvar=False)))[::-1]
    explained = np.cumsum(eigenvalues) / eigenvalues.sum()
    expected = int(np.argmax(explained >= 0.95 - 1e-12)) + 1
    assert model.n_components == expected
    np.testing.assert_allclose(model.eigenvalues, eigenvalues[:expected], rtol=1e-10)


def test_full_rank_model_leaves_no_residual(background_matrix):
    model = fit_msnm(background_matrix, n_components=background_matrix.n_features)
    scores = score_msnm(model, background_matrix)
    assert scores.q_stat.max() <= 1e-8


def test_limits_are_calibration_percentiles(background_matrix):
    model = fit_msnm(background_matrix, n_components=3, limit_percentile=99.0)
    scores = score_msnm(model, background_matrix)
    assert model.ucl_d == pytest.approx(np.percentile(scores.d_stat, 99.0))
    assert model.ucl_q == pytest.approx(np.percentile(scores.q_stat, 99.0))
    np.testing.assert_allclose(scores.score, scores.d_stat / model.ucl_d + scores.q_stat / model.ucl_q)
    assert np.mean(scores.score > 2.0) <= 0.02


def test_scores_are_invariant_to_feature_scale_and_order(background_matrix, rng):
    reference = score_msnm(fit_msnm(background_matrix, n_components=3), background_matrix).score

    scale = rng.uniform(0.5, 20.0, background_matrix.n_features)
    scaled = make_matrix(background_matrix.counts * scale, names=background_matrix.feature_names)
    np.testing.assert_allclose(score_msnm(fit_msnm(scaled, n_components=3), scaled).score, reference, atol=1e-8)

    order = rng.permutation(background_matrix.n_features)
    permuted = make_matrix(background_matrix.counts[:, order],
                           names=[background_matrix.feature_names[j] for j in order])
    np.testing.assert_allclose(score_msnm(fit_msnm(permuted, n_components=3), permuted).score, reference,
                               atol=1e-8)


def test_anomalous_windows_score_higher(background_matrix):
    model = fit_msnm(background_matrix)
    shifted = background_matrix.counts[:5].copy()
    shifted[:, 3] += 200
    test = make_matrix(np.vstack([background_matrix.counts[:5], shifted]), names=background_matrix.feature_names)
    scores = score_msnm(model, test).score
    assert scores[5:].min() > scores[:5].max()


def test_model_file_preserves_scores(background_matrix, tmp_path):
    model = fit_msnm(background_matrix)
    save_model(model, tmp_path / "model.json")
    loaded = load_model(tmp_path / "model.json")
    assert isinstance(loaded, MsnmModel)
    np.testing.assert_allclose(score_msnm(loaded, background_matrix).score,
                               score_msnm(model, background_matrix).score, rtol=0, atol=1e-12)


def test_feature_mismatch_is_rejected(background_matrix):
    model = fit_msnm(background_matrix)
    renamed = make_matrix(background_matrix.counts, names=[f"g{j}" for j in range(background_matrix.n_features)])
    with pytest.raises(FeatureMismatchError):
        score_msnm(model, renamed)
    with pytest.raises(FeatureMismatchError):
        score_msnm(model, make_matrix(background_matrix.counts[:, :4]))


def test_degenerate_calibrations():
    with pytest.raises(NumericalError):
        fit_msnm(make_matrix([[1, 2, 3], [1, 2, 3], [1, 2, 4], [1, 2, 5]]))
    with pytest.raises(ConfigurationError):
        fit_msnm(make_matrix([[1, 2], [2, 1]]))
    with pytest.raises(ConfigurationError):
        fit_msnm(make_matrix([[1, 2], [2, 1], [3, 5], [4, 4]]), n_components=5)


def test_constant_features_do_not_break_the_model(background_matrix):
    counts = background_matrix.counts.copy()
    counts[:, 0] = 4.0
    matrix = make_matrix(counts, names=background_matrix.feature_names)
    model = fit_msnm(matrix)
    assert "f0" in model.scaling.zero_sigma_features
    assert np.all(np.isfinite(score_msnm(model, matrix).score))


@pytest.mark.parametrize("n_components", [1, 3, 5])
def test_calibration_d_statistic_averages_to_the_model_size(background_matrix, n_components):
    assert background_matrix.n_windows >= 200
    model = fit_msnm(background_matrix, n_components=n_components)
    d_stat = score_msnm(model, background_matrix).d_stat
    assert abs(d_stat.mean() - n_components) <= 0.05 * n_components


def test_score_is_monotone_in_both_statistics(background_matrix, rng):
    model = fit_msnm(background_matrix, n_components=3)
    shifted = background_matrix.counts[:60] + rng.uniform(0, 40, size=(60, background_matrix.n_features))
    test = make_matrix(np.vstack([background_matrix.counts[:60], shifted]), names=background_matrix.feature_names)
    scores = score_msnm(model, test)
    d, q, s = scores.d_stat, scores.q_stat, scores.score
    dominated = (d[:, None] <= d[None, :]) & (q[:, None] <= q[None, :])
    assert np.all((s[:, None] <= s[None, :] + 1e-12)[dominated])
