"""Execution of an experiment plan into a write-once report tree."""
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from analysis.audit import audit, export_period_flows, write_audit_report
from analysis.diagnosis import attack_windows, export_bars, rank_features, u_squared
from analysis.evaluation import (
    auc_per_attack, compare_feature, export_timeseries, roc_auc, write_attack_auc_csv, write_auc_summary,
    write_comparison_csv, write_roc_csv,
)
from common.errors import ConfigurationError, FaacError, exit_code_for
from common.settings import load_settings, write_json
from detectors.registry import fit_detector, save_model, score_detector, write_score_csv
from detectors.scaling import fit_autoscale
from faac.engine import (
    drop_features, exclude_observations, featurize, select_time_range, union_features, windows_matching,
)
from faac.features import default_feature_config, load_feature_config
from flows.exclusion import exclude_flows
from flows.merge import merge_bidirectional
from flows.record import parse_flow_csv, stamp_to_epoch
from synth.generator import generate, load_scenario

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariantData:
    variant_id: str
    flows: list
    matrix: object
    calibration: object
    test: object


@dataclass
class RunReport:
    output_dir: Path
    summary: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    @property
    def exit_code(self):
        return max((code for code, _ in self.failures.values()), default=0)


class FlowSources:
    """Generated scenarios and parsed flow files, loaded once per run and shared read-only."""

    def __init__(self, seed):
        self.seed = seed
        self._cache = {}
        self._lock = threading.Lock()

    def get(self, variant):
        key = ("scenario", variant.scenario, variant.seed) if variant.scenario else ("flows", variant.flows)
        with self._lock:
            if key not in self._cache:
                self._cache[key] = self._load(variant)
            return self._cache[key]

    def _load(self, variant):
        if variant.flows is not None:
            result = parse_flow_csv(variant.flows)
            flows = sorted(result.records, key=lambda f: f.start_time)
            return flows, None
        seed = self.seed if variant.seed is None else variant.seed
        config = load_scenario(variant.scenario, seed=seed)
        return generate(config).flows, config


def _ranges(variant, scenario):
    if scenario is not None:
        calibration = (scenario.calibration_start, scenario.test_start)
        test = (scenario.test_start, scenario.test_end)
    if variant.calibration is not None:
        calibration = tuple(stamp_to_epoch(s) for s in variant.calibration)
    if variant.test is not None:
        test = tuple(stamp_to_epoch(s) for s in variant.test)
    return calibration, test


def build_variant(variant, sources):
    """Flows -> exclusions -> (merge | union) featurization -> drops -> calibration/test split."""
    flows, scenario = sources.get(variant)
    (cal_start, cal_end), (test_start, test_end) = _ranges(variant, scenario)
    config = load_feature_config(variant.feature_config) if variant.feature_config else default_feature_config()
    if variant.window_length is not None:
        config = config.model_copy(update={"window_length": variant.window_length})
    length = config.window_length

    start = min(cal_start, test_start) // length * length
    end = -(-max(cal_end, test_end) // length) * length
    flows = [flow for flow in flows if start <= flow.start_time < end]
    for predicate in variant.flow_exclusions:
        flows = exclude_flows(flows, predicate).flows

    if variant.union is not None:
        merged = merge_bidirectional(flows, variant.union.merge)
        matrix = union_features(featurize(flows, config, start, end), featurize(merged, config, start, end),
                                variant.union.prefixes)
    elif variant.merge is not None:
        matrix = featurize(merge_bidirectional(flows, variant.merge), config, start, end)
    else:
        matrix = featurize(flows, config, start, end)
    if variant.drop_features:
        matrix = drop_features(matrix, variant.drop_features)

    calibration = select_time_range(matrix, cal_start, cal_end)
    for predicate in variant.observation_exclusions:
        calibration = exclude_observations(calibration, windows_matching(flows, predicate, length))
    test = select_time_range(matrix, test_start, test_end)
    logger.info(f"variant {variant.id}: {calibration.n_windows} calibration and {test.n_windows} test windows, "
                f"{matrix.n_features} features")
    return VariantData(variant.id, flows, matrix, calibration, test)


def _run_cell(variant_data, detector_spec, directory):
    params = {k: v for k, v in detector_spec.params.items() if v is not None}
    model = fit_detector(detector_spec.name, variant_data.calibration, **params)
    scores, extra = score_detector(model, variant_data.test)
    directory.mkdir(parents=True, exist_ok=False)
    save_model(model, directory / "model.json")
    write_score_csv(variant_data.test, scores, directory / "scores.csv", extra)
    curve = roc_auc(scores, variant_data.test.window_labels)
    write_roc_csv(curve, directory / "roc.csv")
    per_attack = auc_per_attack(scores, variant_data.test.window_labels)
    write_attack_auc_csv(per_attack, directory / "auc_attack.csv")
    rows = [{"variant": variant_data.variant_id, "detector": detector_spec.name.value, "attack": "all",
             "auc": curve.auc}]
    rows += [{"variant": variant_data.variant_id, "detector": detector_spec.name.value,
              "attack": attack.value.lower(), "auc": value} for attack, value in per_attack.items()]
    return model, scores, rows


def _guard(report, key, action):
    """Run one unit of work; failures are recorded and the rest of the plan proceeds."""
    try:
        return action()
    except FaacError as e:
        logger.error(f"{key} failed: {e}")
        report.failures[key] = (e.exit_code, str(e))
    except Exception as e:
        logger.exception(f"{key} failed: {type(e).__name__}: {e}")
        report.failures[key] = (exit_code_for(e), f"{type(e).__name__}: {e}")
    return None


def fresh_directory(path):
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        raise ConfigurationError(f"output directory {path} is not empty; outputs are write-once")
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_plan(plan, output_dir, workers=None):
    """
    Run every (variant, detector) cell of the plan, then its diagnoses, comparisons,
    time series and audits.

    Args:
        plan: ExperimentPlan
        output_dir: fresh directory receiving the report tree
        workers: thread count for the cells (plan, then FAAC_WORKERS, by default)
    Returns:
        RunReport; exit_code is nonzero when any unit failed
    """
    output = fresh_directory(output_dir)
    workers = workers or plan.workers or load_settings().workers
    report = RunReport(output_dir=output)
    sources = FlowSources(plan.seed)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        built = list(pool.map(
            lambda v: (v.id, _guard(report, f"variant {v.id}", lambda: build_variant(v, sources))),
            plan.variants))
        variants = {variant_id: data for variant_id, data in built if data is not None}
        for data in variants.values():
            data.matrix.write_csv(output / data.variant_id / "matrix.csv")

        cells = [(data, spec) for data in variants.values() for spec in plan.detectors]
        results = list(pool.map(
            lambda cell: _guard(
                report, f"{cell[0].variant_id}/{cell[1].name.value.lower()}",
                lambda: _run_cell(cell[0], cell[1], output / cell[0].variant_id / cell[1].name.value.lower())),
            cells))

    scored = {}
    for (data, spec), result in zip(cells, results):
        if result is None:
            continue
        _, scores, rows = result
        scored[(data.variant_id, spec.name)] = scores
        report.summary.extend(rows)
    write_auc_summary(report.summary, output / "auc_summary.csv")

    for spec in plan.diagnoses:
        _guard(report, f"diagnosis {spec.name}", lambda: _diagnose(spec, variants, output / "diagnoses" / spec.name))
    for spec in plan.comparisons:
        _guard(report, f"comparison {spec.name}", lambda: _compare(spec, variants, output / "comparisons" / spec.name))
    for spec in plan.timeseries:
        _guard(report, f"timeseries {spec.name}",
               lambda: _timeseries(spec, variants, output / "timeseries" / f"{spec.name}.csv"))
    for spec in plan.audits:
        _guard(report, f"audit {spec.name}", lambda: _audit(spec, variants, scored, output / "audits" / spec.name))

    if report.failures:
        write_json(output / "errors.json", {key: {"exit_code": code, "error": message}
                                            for key, (code, message) in sorted(report.failures.items())})
    logger.info(f"plan {plan.name}: {len(report.summary)} AUC rows, {len(report.failures)} failures")
    return report


def _variant(variants, variant_id):
    if variant_id not in variants:
        raise ConfigurationError(f"variant {variant_id} did not build")
    return variants[variant_id]


def _diagnose(spec, variants, directory):
    data = _variant(variants, spec.variant)
    reference = _variant(variants, spec.reference or spec.variant)
    report = u_squared(attack_windows(data.test, spec.attack_type), fit_autoscale(reference.calibration),
                       reference_id=reference.variant_id)
    export_bars(report, directory / "bars.csv")
    payload = report.to_dict()
    payload["top"] = [{"feature": r.name, "accumulated": r.accumulated, "sign": r.sign}
                      for r in rank_features(report, spec.top_k)]
    write_json(directory / "report.json", payload)


def _compare(spec, variants, directory):
    data = _variant(variants, spec.variant)
    test = data.test
    positives = test.has_attack(spec.attack_type) if spec.attack_type else test.anomalous
    tests = {}
    for feature in spec.features:
        comparison = compare_feature(test, feature, positives)
        write_comparison_csv(comparison, directory / f"{feature}.csv")
        tests[feature] = comparison.test.to_dict()
    write_json(directory / "ttests.json", tests)


def _timeseries(spec, variants, path):
    data = _variant(variants, spec.variant)
    start, end = (stamp_to_epoch(s) for s in spec.range) if spec.range else (None, None)
    export_timeseries(data.matrix, spec.features, path, start, end)


def _audit(spec, variants, scored, directory):
    data = _variant(variants, spec.variant)
    scores = scored.get((spec.variant, spec.detector))
    if scores is None:
        raise ConfigurationError(f"no {spec.detector.value} scores for variant {spec.variant}")
    result = audit(data.test, scores, fit_autoscale(data.calibration), percentile=spec.percentile,
                   threshold=spec.threshold, max_gap=spec.max_gap, top_k=spec.top_k)
    write_audit_report(result, directory / "report.json")
    if spec.export_flows:
        for period in result.periods:
            stamp = int(np.min(period.window_starts))
            export_period_flows(data.flows, period, data.test.window_length,
                                directory / "flows" / f"period-{stamp}.csv")
