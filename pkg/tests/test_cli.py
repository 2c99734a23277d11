import argparse
import json

import numpy as np
import pandas as pd
import pytest

from common.errors import ConfigurationError, InputError, NumericalError, exit_code_for
from common.settings import read_json, validate
from conftest import attack_label, make_matrix
from faac.features import default_feature_config
from faac.matrix import NORMAL, read_matrix_csv
from pipeline.cli import build_parser, main
from pipeline.plan import ExperimentPlan
import pipeline.runner
from pipeline.runner import run_plan

TINY = {
    "name": "tiny",
    "seed": 5,
    "calibration_days": 1,
    "test_days": 1,
    "base_rate": 10,
    "attack_episodes": [{"attack_type": "DOS", "start": 36000, "duration": 1800, "intensity": 2.0}],
}


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def synthesized(tmp_path, scenario_file):
    flows, manifest = tmp_path / "flows.csv", tmp_path / "manifest.json"
    assert main(["synth", str(scenario_file), "--flows", str(flows), "--manifest", str(manifest)]) == 0
    return flows, manifest


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_stage_chain(tmp_path, synthesized, capsys):
    flows, manifest = synthesized
    assert read_json(manifest)["episodes"]
    matrix, model, scores = tmp_path / "matrix.csv", tmp_path / "model.json", tmp_path / "scores.csv"

    assert main(["featurize", str(flows), "--output", str(matrix),
                 "--start", "20160301000000", "--end", "20160303000000"]) == 0
    header = matrix.read_text().splitlines()[0].split(",")
    assert header == ["window_start", *default_feature_config().feature_names, "label", "attack_types"]
    assert read_matrix_csv(matrix).n_windows == 2 * 1440

    assert main(["fit", str(matrix), "--detector", "msnm", "--output", str(model),
                 "--start", "20160301000000", "--end", "20160302000000"]) == 0
    assert read_json(model)["detector"] == "msnm"
    assert main(["score", str(model), str(matrix), "--output", str(scores)]) == 0

    capsys.readouterr()
    assert main(["evaluate", str(scores), "--output", str(tmp_path / "eval")]) == 0
    auc = float(capsys.readouterr().out.split()[1])
    assert auc > 0.9
    per_attack = pd.read_csv(tmp_path / "eval" / "auc_attack.csv")
    assert per_attack["attack"].tolist() == ["dos"]
    assert (tmp_path / "eval" / "roc.csv").exists()

    assert main(["diagnose", str(matrix), "--reference", str(model), "--attack-type", "dos",
                 "--output", str(tmp_path / "diag")]) == 0
    report = read_json(tmp_path / "diag" / "report.json")
    accumulated = dict(zip(report["feature_names"], report["accumulated"]))
    assert accumulated["dport_http"] > 0
    assert "dport_http" in report["ranking"][:5]


def test_parse_and_exclude(tmp_path, synthesized):
    flows, _ = synthesized
    kept = tmp_path / "kept.csv"
    assert main(["exclude", str(flows), "--predicate", '{"dst_port": [80]}', "--output", str(kept)]) == 0
    frame = pd.read_csv(kept)
    assert len(frame) and not (frame["dst_port"] == 80).any()

    broken = tmp_path / "broken.csv"
    lines = flows.read_text().splitlines()
    broken.write_text("\n".join(lines[:3] + ["not,a,flow"] + lines[3:10]) + "\n")
    assert main(["parse", str(broken), "--output", str(tmp_path / "clean.csv")]) == 0
    assert len(pd.read_csv(tmp_path / "clean.csv")) == 9
    assert main(["parse", str(broken), "--strict", "--output", str(tmp_path / "strict.csv")]) == 3


def test_outputs_are_write_once(tmp_path, synthesized):
    flows, _ = synthesized
    target = tmp_path / "matrix.csv"
    target.write_text("occupied\n")
    assert main(["featurize", str(flows), "--output", str(target)]) == 2
    assert target.read_text() == "occupied\n"


def test_configuration_errors_exit_with_2(tmp_path):
    labels = [NORMAL, attack_label("DOS"), attack_label("DOS")]
    make_matrix([[1, 2], [3, 5], [4, 4]], names=["a", "b"]).write_csv(tmp_path / "reference.csv")
    make_matrix([[1, 2], [9, 9], [8, 8]], names=["b", "a"], labels=labels).write_csv(tmp_path / "swapped.csv")
    reference = str(tmp_path / "reference.csv")

    assert main(["diagnose", str(tmp_path / "swapped.csv"), "--reference", reference, "--attack-type", "dos",
                 "--output", str(tmp_path / "out")]) == 2
    assert main(["diagnose", reference, "--reference", reference, "--output", str(tmp_path / "out")]) == 2
    assert main(["fit", reference, "--detector", "ocsvm", "--param", "depth=3",
                 "--output", str(tmp_path / "model.json")]) == 2
    assert not (tmp_path / "model.json").exists()
    assert main(["fit", reference, "--detector", "ocsvm", "--param", "nu=abc",
                 "--output", str(tmp_path / "model.json")]) == 2
    with pytest.raises(SystemExit):
        main(["fit", reference, "--detector", "kmeans", "--output", str(tmp_path / "model.json")])


def _tiny_plan(scenario_file, **extra):
    payload = {
        "name": "tiny",
        "variants": [
            {"id": "uni", "scenario": str(scenario_file)},
            {"id": "bidi", "scenario": str(scenario_file), "merge": {"pairing": "low_port_server"}},
        ],
        "detectors": [{"name": "MSNM"}, {"name": "OCSVM", "params": {"max_rows": 300}}],
        "workers": 2,
    }
    payload.update(extra)
    return validate(ExperimentPlan, payload, "plan")


def test_run_plan_writes_a_reproducible_tree(tmp_path, scenario_file):
    plan = _tiny_plan(scenario_file, diagnoses=[{"name": "dos", "variant": "uni", "attack_type": "dos"}])
    first = run_plan(plan, tmp_path / "first")
    second = run_plan(plan, tmp_path / "second", workers=1)
    assert first.exit_code == 0
    for variant in ("uni", "bidi"):
        for detector in ("msnm", "ocsvm"):
            cell = tmp_path / "first" / variant / detector
            assert sorted(p.name for p in cell.iterdir()) == ["auc_attack.csv", "model.json", "roc.csv", "scores.csv"]
    summary = pd.read_csv(tmp_path / "first" / "auc_summary.csv")
    assert len(summary) == 8
    assert np.all(summary["auc"].between(0, 1))
    assert (tmp_path / "first" / "diagnoses" / "dos" / "bars.csv").exists()
    assert _tree(tmp_path / "first") == _tree(tmp_path / "second")


def test_failed_units_are_recorded_and_the_rest_proceeds(tmp_path, scenario_file):
    plan = _tiny_plan(scenario_file, diagnoses=[
        {"name": "scan", "variant": "uni", "attack_type": "scan11"},
        {"name": "dos", "variant": "uni", "attack_type": "dos"},
    ])
    report = run_plan(plan, tmp_path / "out")
    assert report.exit_code == 2
    errors = read_json(tmp_path / "out" / "errors.json")
    assert list(errors) == ["diagnosis scan"]
    assert (tmp_path / "out" / "diagnoses" / "dos" / "report.json").exists()


def test_run_refuses_a_used_output_directory(tmp_path, scenario_file):
    (tmp_path / "out").mkdir()
    (tmp_path / "out" / "old.txt").write_text("x")
    with pytest.raises(ConfigurationError):
        run_plan(_tiny_plan(scenario_file), tmp_path / "out")


def test_undecodable_flow_file_exits_with_3(tmp_path):
    binary = tmp_path / "flows.csv"
    binary.write_bytes(b"\xff\xfe\x00\x81 not text\n")
    assert main(["parse", str(binary), "--output", str(tmp_path / "clean.csv")]) == 3


def test_foreign_exceptions_map_to_exit_codes():
    assert exit_code_for(np.linalg.LinAlgError("singular")) == NumericalError.exit_code
    assert exit_code_for(FloatingPointError("overflow")) == NumericalError.exit_code
    undecodable = UnicodeDecodeError("utf-8", b"\xff", 0, 1, "invalid start byte")
    assert exit_code_for(undecodable) == InputError.exit_code
    assert exit_code_for(FileNotFoundError("gone")) == InputError.exit_code
    assert exit_code_for(KeyError("x")) == 1


def test_unexpected_unit_errors_are_recorded_and_the_rest_proceeds(tmp_path, scenario_file, monkeypatch):
    def singular(*args, **kwargs):
        raise np.linalg.LinAlgError("singular covariance")

    monkeypatch.setattr(pipeline.runner, "_diagnose", singular)
    plan = _tiny_plan(scenario_file, diagnoses=[{"name": "dos", "variant": "uni", "attack_type": "dos"}])
    report = run_plan(plan, tmp_path / "out")
    assert report.exit_code == 4
    errors = read_json(tmp_path / "out" / "errors.json")
    assert errors["diagnosis dos"]["exit_code"] == 4
    assert "LinAlgError" in errors["diagnosis dos"]["error"]
    assert (tmp_path / "out" / "uni" / "msnm" / "scores.csv").exists()
    assert len(pd.read_csv(tmp_path / "out" / "auc_summary.csv")) == 8


def test_every_argument_has_help_text():
    parser = build_parser()
    commands = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, command in commands.choices.items():
        for action in command._actions:
            if not isinstance(action, argparse._HelpAction):
                assert action.help, f"{name} {action.dest}"
