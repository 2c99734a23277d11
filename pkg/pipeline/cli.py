"""Command-line surface: one subcommand per pipeline stage, plus `run` for whole plans."""
import argparse
import json
import logging
from pathlib import Path

from analysis.audit import audit, export_period_flows, write_audit_report
from analysis.diagnosis import attack_windows, export_bars, rank_features, u_squared, write_report
from analysis.evaluation import (
    auc_per_attack, compare_feature, export_timeseries, roc_auc, write_attack_auc_csv, write_comparison_csv,
    write_roc_csv,
)
from common.errors import ConfigurationError, FaacError, exit_code_for
from common.log import setup_logging
from common.settings import load_settings, read_json, validate, write_json
from detectors.registry import fit_detector, load_model, read_score_csv, save_model, score_detector, write_score_csv
from detectors.scaling import fit_autoscale
from faac.engine import featurize, select_time_range
from faac.features import default_feature_config, load_feature_config
from faac.matrix import read_matrix_csv
from flows.exclusion import exclude_flows, load_predicate
from flows.merge import MergePolicy, merge_bidirectional
from flows.record import parse_flow_csv, stamp_to_epoch, write_flow_csv
from pipeline.plan import DetectorSpec, load_plan
from pipeline.runner import fresh_directory, run_plan
from synth.generator import generate, load_scenario

logger = logging.getLogger(__name__)


def _epoch(stamp):
    if stamp is None:
        return None
    try:
        return stamp_to_epoch(stamp)
    except ValueError as e:
        raise ConfigurationError(str(e)) from e


def _new_file(path):
    """Outputs are write-once."""
    path = Path(path)
    if path.exists():
        raise ConfigurationError(f"{path} already exists")
    return path


def _json_argument(value, what):
    """Inline JSON or the path of a JSON file."""
    if value is None:
        return None
    if value.lstrip().startswith("{"):
        try:
            return json.loads(value)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"invalid {what}: {e}") from e
    return read_json(value)


def _parameters(pairs):
    params = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigurationError(f"parameter {pair!r} is not key=value")
        try:
            params[key] = float(value) if any(c in value for c in ".eE") else int(value)
        except ValueError as e:
            raise ConfigurationError(f"parameter {key!r} is not a number: {value!r}") from e
    return params


def _reference(path, start=None, end=None):
    """Autoscaling of a reference: a calibration matrix CSV or a fitted model file."""
    if str(path).endswith(".json"):
        return load_model(path).scaling
    matrix = read_matrix_csv(path)
    if start is not None or end is not None:
        matrix = select_time_range(matrix, _epoch(start) or matrix.window_starts[0],
                                   _epoch(end) or matrix.window_starts[-1] + matrix.window_length)
    return fit_autoscale(matrix)


def _sorted_flows(path, strict=False):
    result = parse_flow_csv(path, strict=strict)
    logger.info(f"parsed {len(result.records)} flows from {path}, skipped {result.skipped}")
    return result


def cmd_synth(args):
    scenario = generate(load_scenario(args.scenario, seed=args.seed))
    scenario.write(_new_file(args.flows), _new_file(args.manifest))


def cmd_parse(args):
    result = _sorted_flows(args.input, strict=args.strict)
    write_flow_csv(result.records, _new_file(args.output))
    print(f"{len(result.records)} flows, {result.skipped} skipped lines")


def cmd_merge(args):
    policy = {"pairing": args.pairing} if args.pairing else {}
    if args.time_tolerance is not None:
        policy["time_tolerance"] = args.time_tolerance
    flows = _sorted_flows(args.input).records
    merged = merge_bidirectional(flows, validate(MergePolicy, policy, "merge policy"),
                                 allow_bidirectional=args.allow_bidirectional)
    write_flow_csv(merged, _new_file(args.output))


def cmd_exclude(args):
    predicate = load_predicate(_json_argument(args.predicate, "predicate"))
    result = exclude_flows(_sorted_flows(args.input).records, predicate)
    write_flow_csv(result.flows, _new_file(args.output))
    print(f"removed {result.removed} flows")


def cmd_featurize(args):
    config = load_feature_config(args.config) if args.config else default_feature_config()
    if args.window_length is not None:
        config = config.model_copy(update={"window_length": args.window_length})
    matrix = featurize(_sorted_flows(args.input).records, config, _epoch(args.start), _epoch(args.end))
    matrix.write_csv(_new_file(args.output))


def cmd_fit(args):
    spec = validate(DetectorSpec, {"name": args.detector, "params": _parameters(args.param)}, "detector")
    matrix = read_matrix_csv(args.matrix)
    if args.start is not None or args.end is not None:
        matrix = select_time_range(matrix, _epoch(args.start) or matrix.window_starts[0],
                                   _epoch(args.end) or matrix.window_starts[-1] + matrix.window_length)
    model = fit_detector(spec.name, matrix, **spec.params)
    save_model(model, _new_file(args.output))


def cmd_score(args):
    model = load_model(args.model)
    matrix = read_matrix_csv(args.matrix)
    scores, extra = score_detector(model, matrix)
    write_score_csv(matrix, scores, _new_file(args.output), extra)


def cmd_evaluate(args):
    scored = read_score_csv(args.scores)
    directory = fresh_directory(args.output)
    curve = roc_auc(scored.scores, scored.window_labels)
    write_roc_csv(curve, directory / "roc.csv")
    per_attack = auc_per_attack(scored.scores, scored.window_labels)
    write_attack_auc_csv(per_attack, directory / "auc_attack.csv")
    print(f"AUC {curve.auc:.4f}")
    for attack, value in per_attack.items():
        print(f"  {attack.value:<12} {value:.4f}")


def cmd_diagnose(args):
    matrix = read_matrix_csv(args.matrix)
    reference = _reference(args.reference, args.reference_start, args.reference_end)
    if args.attack_type:
        observations = attack_windows(matrix, args.attack_type)
    elif args.start is None and args.end is None:
        raise ConfigurationError("select the observations with --attack-type or --start/--end")
    else:
        observations = select_time_range(matrix, _epoch(args.start) or matrix.window_starts[0],
                                         _epoch(args.end) or matrix.window_starts[-1] + matrix.window_length)
    report = u_squared(observations, reference, reference_id=str(args.reference))
    directory = fresh_directory(args.output)
    export_bars(report, directory / "bars.csv")
    write_report(report, directory / "report.json")
    for ranked in rank_features(report, args.top_k):
        print(f"{ranked.name:<24} {ranked.accumulated:+.4g}")


def cmd_audit(args):
    matrix = read_matrix_csv(args.matrix)
    scored = read_score_csv(args.scores)
    if list(scored.window_starts) != list(matrix.window_starts):
        raise ConfigurationError("scores and matrix cover different windows")
    reference = _reference(args.reference, args.reference_start, args.reference_end)
    result = audit(matrix, scored.scores, reference, percentile=args.percentile, threshold=args.threshold,
                   max_gap=args.max_gap, top_k=args.top_k)
    directory = fresh_directory(args.output)
    write_audit_report(result, directory / "report.json")
    if args.flows:
        flows = _sorted_flows(args.flows).records
        for period in result.periods:
            export_period_flows(flows, period, matrix.window_length,
                                directory / "flows" / f"period-{int(period.window_starts[0])}.csv")
    print(f"threshold {result.threshold:.4g}: {len(result.flagged)} flagged windows, {len(result.periods)} periods")


def cmd_timeseries(args):
    matrix = read_matrix_csv(args.matrix)
    rows = export_timeseries(matrix, args.features, _new_file(args.output), _epoch(args.start), _epoch(args.end))
    logger.info(f"exported {rows} windows of {len(args.features)} features")


def cmd_boxplot(args):
    matrix = read_matrix_csv(args.matrix)
    positives = matrix.has_attack(args.attack_type.upper()) if args.attack_type else matrix.anomalous
    directory = fresh_directory(args.output)
    tests = {}
    for feature in args.features:
        comparison = compare_feature(matrix, feature, positives)
        write_comparison_csv(comparison, directory / f"{feature}.csv")
        tests[feature] = comparison.test.to_dict()
        print(f"{feature:<24} t={comparison.test.t_stat:.4g} p={comparison.test.p_value:.3g}")
    write_json(directory / "ttests.json", tests)


def cmd_run(args):
    report = run_plan(load_plan(args.plan), args.output, workers=args.workers)
    for row in report.summary:
        print(f"{row['variant']:<20} {row['detector']:<6} {row['attack']:<12} {row['auc']:.4f}")
    return report.exit_code


def _range_arguments(parser, what="selection"):
    parser.add_argument("--start", help=f"{what} start, YYYYMMDDhhmmss (inclusive)")
    parser.add_argument("--end", help=f"{what} end, YYYYMMDDhhmmss (exclusive)")


def _reference_arguments(parser):
    parser.add_argument("--reference", required=True,
                        help="calibration matrix CSV, or a fitted model JSON whose scaling is reused")
    parser.add_argument("--reference-start", help="restrict a reference matrix to windows from this stamp")
    parser.add_argument("--reference-end", help="restrict a reference matrix to windows before this stamp")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="faac", description="Flow featurization, anomaly detection, diagnosis and label audit.")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth", help="generate a synthetic scenario")
    p.add_argument("scenario", help="shipped scenario name or scenario JSON path")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--flows", required=True, help="flow CSV to write")
    p.add_argument("--manifest", required=True, help="ground-truth manifest JSON to write")
    p.set_defaults(handler=cmd_synth)

    p = commands.add_parser("parse", help="validate a flow CSV and rewrite its well-formed lines")
    p.add_argument("input", help="flow CSV to validate")
    p.add_argument("--output", required=True, help="flow CSV of the well-formed lines")
    p.add_argument("--strict", action="store_true", help="fail at the first malformed line")
    p.set_defaults(handler=cmd_parse)

    p = commands.add_parser("merge", help="pair unidirectional flows into bidirectional flows")
    p.add_argument("input", help="unidirectional flow CSV")
    p.add_argument("--output", required=True, help="bidirectional flow CSV to write")
    p.add_argument("--pairing", choices=["first_seen", "low_port_server"],
                   help="which endpoint becomes the merged source (default: first_seen)")
    p.add_argument("--time-tolerance", type=float, help="seconds; default is the first flow's duration + slack")
    p.add_argument("--allow-bidirectional", action="store_true", help="pass already merged flows through")
    p.set_defaults(handler=cmd_merge)

    p = commands.add_parser("exclude", help="drop flows matching a predicate")
    p.add_argument("input", help="flow CSV to filter")
    p.add_argument("--predicate", required=True, help="predicate JSON, inline or as a file path")
    p.add_argument("--output", required=True, help="flow CSV of the remaining flows")
    p.set_defaults(handler=cmd_exclude)

    p = commands.add_parser("featurize", help="count features per window")
    p.add_argument("input", help="flow CSV to count")
    p.add_argument("--output", required=True, help="matrix CSV to write")
    p.add_argument("--config", help="feature dictionary JSON (default: the built-in dictionary)")
    p.add_argument("--window-length", type=int, help="seconds per window")
    _range_arguments(p, "featurization range")
    p.set_defaults(handler=cmd_featurize)

    p = commands.add_parser("fit", help="fit a detector on calibration windows")
    p.add_argument("matrix", help="observation matrix CSV")
    p.add_argument("--detector", required=True, choices=["msnm", "ocsvm", "MSNM", "OCSVM"], help="detector to fit")
    p.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="hyperparameter (msnm: n_components, variance_fraction, limit_percentile; "
                        "ocsvm: nu, gamma, tol, max_iter, max_rows)")
    p.add_argument("--output", required=True, help="model JSON to write")
    _range_arguments(p, "calibration")
    p.set_defaults(handler=cmd_fit)

    p = commands.add_parser("score", help="score windows with a fitted model")
    p.add_argument("model", help="fitted model JSON")
    p.add_argument("matrix", help="observation matrix CSV to score")
    p.add_argument("--output", required=True, help="score CSV to write")
    p.set_defaults(handler=cmd_score)

    p = commands.add_parser("evaluate", help="ROC, AUC and per-attack AUC of a score CSV")
    p.add_argument("scores", help="score CSV written by score")
    p.add_argument("--output", required=True, help="directory for roc.csv and auc_attack.csv")
    p.set_defaults(handler=cmd_evaluate)

    p = commands.add_parser("diagnose", help="U-Squared of selected windows against a reference")
    p.add_argument("matrix", help="observation matrix CSV holding the windows to diagnose")
    _reference_arguments(p)
    p.add_argument("--attack-type", help="select the windows holding this attack")
    _range_arguments(p, "observation")
    p.add_argument("--top-k", type=int, help="features listed on stdout")
    p.add_argument("--output", required=True, help="directory for bars.csv and report.json")
    p.set_defaults(handler=cmd_diagnose)

    p = commands.add_parser("audit", help="flag and diagnose high-scoring background windows")
    p.add_argument("matrix", help="observation matrix CSV")
    p.add_argument("scores", help="score CSV of the same windows")
    _reference_arguments(p)
    p.add_argument("--percentile", type=float, help="percentile of background scores used as threshold")
    p.add_argument("--threshold", type=float, help="absolute score threshold")
    p.add_argument("--max-gap", type=int, help="windows apart still grouped into one period")
    p.add_argument("--top-k", type=int, help="features tested per period")
    p.add_argument("--flows", help="flow CSV whose period flows are exported")
    p.add_argument("--output", required=True, help="directory for report.json")
    p.set_defaults(handler=cmd_audit)

    p = commands.add_parser("timeseries", help="export feature time series")
    p.add_argument("matrix", help="observation matrix CSV")
    p.add_argument("--features", nargs="+", required=True, help="feature columns to export")
    p.add_argument("--output", required=True, help="time series CSV to write")
    _range_arguments(p)
    p.set_defaults(handler=cmd_timeseries)

    p = commands.add_parser("boxplot", help="boxplot statistics and Welch tests: positive vs background windows")
    p.add_argument("matrix", help="observation matrix CSV")
    p.add_argument("--features", nargs="+", required=True, help="features to compare")
    p.add_argument("--attack-type", help="positives are windows holding this attack (default: any attack)")
    p.add_argument("--output", required=True, help="fresh directory for one CSV per feature and ttests.json")
    p.set_defaults(handler=cmd_boxplot)

    p = commands.add_parser("run", help="run an experiment plan")
    p.add_argument("plan", help="experiment plan JSON")
    p.add_argument("--output", required=True, help="fresh directory for the report tree")
    p.add_argument("--workers", type=int, help="parallel variant x detector cells")
    p.set_defaults(handler=cmd_run)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(load_settings().log_level)
    try:
        return args.handler(args) or 0
    except FaacError as e:
        logger.error(f"{args.command}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"{args.command}: unexpected {type(e).__name__}: {e}")
        return exit_code_for(e)
