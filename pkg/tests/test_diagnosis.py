import numpy as np
import pytest

from analysis.diagnosis import attack_windows, export_bars, rank_features, read_bars, u_squared, write_report
from common.errors import ConfigurationError, EmptySelectionError, FeatureMismatchError
from common.settings import read_json
from conftest import attack_label, make_matrix
from detectors.scaling import fit_autoscale
from faac.matrix import NORMAL


def _brute_force(observations, reference):
    n_ref, p = reference.shape
    per_observation = np.zeros(observations.shape)
    for j in range(p):
        mean = sum(reference[:, j]) / n_ref
        sd = (sum((x - mean) ** 2 for x in reference[:, j]) / (n_ref - 1)) ** 0.5
        for i in range(observations.shape[0]):
            z = (observations[i, j] - mean) / sd if sd > 0 else 0.0
            per_observation[i, j] = z * abs(z)
    accumulated = np.zeros(p)
    for i in range(observations.shape[0]):
        accumulated = accumulated + per_observation[i]
    return per_observation, accumulated


def test_u_squared_matches_a_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = int(rng.integers(1, 21))
        reference = rng.poisson(rng.uniform(1, 50, p), size=(int(rng.integers(2, 51)), p)).astype(float)
        observations = rng.poisson(rng.uniform(1, 80, p), size=(int(rng.integers(1, 51)), p)).astype(float)
        report = u_squared(make_matrix(observations), fit_autoscale(make_matrix(reference)))
        expected_rows, expected = _brute_force(observations, reference)
        np.testing.assert_allclose(report.per_observation, expected_rows, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(report.accumulated, expected, rtol=1e-9, atol=1e-9)


def test_signed_squares_keep_the_direction():
    reference = fit_autoscale(make_matrix([[0, 10], [2, 10], [4, 12], [2, 8]], names=["up", "down"]))
    report = u_squared(make_matrix([[6, 10], [4, 2]], names=["up", "down"]), reference)
    assert report.per_observation[0, 0] > 0
    assert report.per_observation[1, 1] < 0
    assert report.ranking == ("down", "up")
    ranked = rank_features(report, 2)
    assert [r.sign for r in ranked] == [-1, 1]
    with pytest.raises(ConfigurationError):
        rank_features(report, 0)
    with pytest.raises(ConfigurationError):
        rank_features(report, -1)


def test_zero_sigma_features_contribute_nothing():
    reference = fit_autoscale(make_matrix([[1, 5], [2, 5], [3, 5]]))
    report = u_squared(make_matrix([[2, 500]]), reference)
    assert report.accumulated.tolist() == [0.0, 0.0]
    assert report.zero_sigma_features == {"f1"}


def test_ranking_is_stable_for_equal_magnitudes():
    reference = fit_autoscale(make_matrix([[0, 0, 0], [2, 2, 2]], names=["a", "b", "c"]))
    report = u_squared(make_matrix([[1, 3, -1]], names=["a", "b", "c"]), reference)
    assert report.ranking == ("b", "c", "a")


def test_diagnosis_requires_matching_features_and_observations():
    reference = fit_autoscale(make_matrix([[1, 2], [3, 5], [4, 4]], names=["a", "b"]))
    with pytest.raises(FeatureMismatchError):
        u_squared(make_matrix([[1, 2]], names=["b", "a"]), reference)
    with pytest.raises(EmptySelectionError):
        u_squared(make_matrix(np.zeros((0, 2)), names=["a", "b"]), reference)


def test_attack_windows_selects_by_attack_type():
    labels = [NORMAL, attack_label("DOS"), attack_label("DOS", "SCAN11"), attack_label("NERISBOTNET")]
    matrix = make_matrix(np.arange(8).reshape(4, 2), labels=labels)
    assert attack_windows(matrix, "dos").n_windows == 2
    assert attack_windows(matrix, "SCAN11").counts.tolist() == [[4, 5]]
    with pytest.raises(EmptySelectionError):
        attack_windows(matrix, "SCAN44")


def test_bar_data_and_report_files(tmp_path):
    reference = fit_autoscale(make_matrix([[1, 2], [3, 5], [4, 4]], names=["a", "b"]))
    report = u_squared(make_matrix([[9, 0], [8, 1]], names=["a", "b"]), reference, reference_id="calibration")
    export_bars(report, tmp_path / "bars.csv")
    assert read_bars(tmp_path / "bars.csv") == pytest.approx(dict(zip(("a", "b"), report.accumulated)))
    write_report(report, tmp_path / "report.json", include_per_observation=True)
    payload = read_json(tmp_path / "report.json")
    assert payload["reference_id"] == "calibration"
    assert payload["ranking"] == list(report.ranking)
    assert len(payload["per_observation"]) == 2
