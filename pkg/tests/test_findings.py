"""End-to-end checks on the shipped scenarios and the findings plan variants."""
from pathlib import Path

import numpy as np
import pytest

from analysis.audit import audit
from analysis.diagnosis import attack_windows, rank_features, u_squared
from analysis.evaluation import auc_per_attack, roc_auc
from detectors.registry import fit_detector, score_detector
from detectors.scaling import fit_autoscale
from flows.record import AttackType
from pipeline.plan import load_plan
from pipeline.runner import FlowSources, build_variant
from synth.generator import generate, load_scenario, manifest_windows

pytestmark = pytest.mark.slow

PLAN = load_plan(Path(__file__).resolve().parents[1] / "plans" / "findings.json")
OCSVM = {"nu": 0.02}


@pytest.fixture(scope="module")
def variant():
    sources = FlowSources(PLAN.seed)
    built = {}

    def get(variant_id):
        if variant_id not in built:
            built[variant_id] = build_variant(PLAN.variant(variant_id), sources)
        return built[variant_id]

    return get


def _scores(data, detector, **params):
    model = fit_detector(detector, data.calibration, **params)
    return score_detector(model, data.test)[0]


def _attack_auc(data, detector, attack, **params):
    return auc_per_attack(_scores(data, detector, **params), data.test.window_labels)[AttackType(attack)]


@pytest.mark.parametrize("detector, params", [("MSNM", {}), ("OCSVM", OCSVM)])
def test_contaminated_calibration_hides_the_botnet(variant, detector, params):
    clean = _attack_auc(variant("botnet-clean"), detector, "NERISBOTNET", **params)
    contaminated = _attack_auc(variant("botnet-contaminated"), detector, "NERISBOTNET", **params)
    assert clean - contaminated >= 0.15


def test_dropping_the_irc_features_hides_the_botnet(variant):
    clean = _attack_auc(variant("botnet-clean"), "MSNM", "NERISBOTNET")
    ablated = _attack_auc(variant("botnet-noirc"), "MSNM", "NERISBOTNET")
    assert "sport_irc" not in variant("botnet-noirc").matrix.feature_names
    assert clean - ablated >= 0.15


def test_botnet_windows_are_diagnosed_by_the_irc_ports(variant):
    data = variant("botnet-clean")
    report = u_squared(attack_windows(data.test, "NERISBOTNET"), fit_autoscale(data.calibration))
    top = rank_features(report, 2)
    assert {r.name for r in top} == {"sport_irc", "dport_irc"}
    assert all(r.sign > 0 for r in top)


def test_unidirectional_flows_expose_the_dos(variant):
    uni = _attack_auc(variant("dos-uni"), "MSNM", "DOS")
    bidi = _attack_auc(variant("dos-bidi"), "MSNM", "DOS")
    union = _attack_auc(variant("dos-union"), "MSNM", "DOS")
    assert uni > bidi
    assert union >= max(uni, bidi) - 0.02


def test_label_audit_finds_the_hidden_scan(variant):
    data = variant("hidden-scan")
    spec = PLAN.audits[0]
    report = audit(data.test, _scores(data, spec.detector), fit_autoscale(data.calibration),
                   percentile=spec.percentile, max_gap=spec.max_gap, top_k=2)
    hidden = set(manifest_windows(generate(load_scenario("hidden_scan")).manifest, 60).hidden)
    flagged = set(data.test.window_starts[report.flagged].tolist())
    assert len(hidden & flagged) >= 0.8 * len(hidden)

    period = max(report.periods, key=lambda p: len(hidden & set(np.asarray(p.window_starts).tolist())))
    assert set(period.feature_tests) == {"dport_gopher", "dport_finger"}
    assert all(t.p_value < 0.01 for t in period.feature_tests.values())


def test_detectors_agree_on_the_default_scenario(variant):
    data = variant("default")
    labels = data.test.window_labels
    msnm, ocsvm = _scores(data, "MSNM"), _scores(data, "OCSVM", **OCSVM)
    assert abs(roc_auc(msnm, labels).auc - roc_auc(ocsvm, labels).auc) <= 0.1
    assert auc_per_attack(msnm, labels)[AttackType.DOS] >= 0.85
    assert auc_per_attack(ocsvm, labels)[AttackType.DOS] >= 0.85
