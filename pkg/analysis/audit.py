"""Background-label audit: flag high-scoring NORMAL windows, group them, diagnose every period."""
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from analysis.diagnosis import rank_features, u_squared
from analysis.evaluation import Alternative, welch_ttest
from common.errors import ConfigurationError, EmptySelectionError
from common.settings import load_package_config, write_json
from flows.record import epoch_to_stamp, write_flow_csv

logger = logging.getLogger(__name__)

CONFIG = load_package_config(os.path.dirname(__file__))["audit"]


def flag_background(scores, window_labels, percentile=None, threshold=None):
    """
    Indices of NORMAL windows scoring strictly above the threshold.

    Args:
        scores: one score per window
        window_labels: WindowLabels aligned with scores
        percentile: percentile of the background scores used as threshold
        threshold: absolute threshold; takes precedence over percentile
    Returns:
        (sorted window indices, threshold applied)
    """
    scores = np.asarray(scores, dtype=float)
    background = np.array([not label.is_anomalous for label in window_labels], dtype=bool)
    if len(scores) != len(background):
        raise ConfigurationError(f"{len(scores)} scores for {len(background)} labels")
    if not background.any():
        raise EmptySelectionError("no background windows to audit")
    if threshold is None:
        percentile = CONFIG["percentile"] if percentile is None else percentile
        threshold = float(np.percentile(scores[background], percentile))
    flagged = np.flatnonzero(background & (scores > threshold))
    logger.info(f"flagged {len(flagged)} of {int(background.sum())} background windows above {threshold:.4g}")
    return flagged, float(threshold)


def group_periods(flagged, max_gap=None):
    """Maximal runs of sorted ids whose successive members are at most max_gap apart."""
    max_gap = CONFIG["max_gap"] if max_gap is None else max_gap
    periods = []
    for item in flagged:
        item = int(item)
        if periods and item - periods[-1][-1] <= max_gap:
            periods[-1].append(item)
        else:
            periods.append([item])
    return periods


@dataclass(frozen=True)
class SuspiciousPeriod:
    window_starts: np.ndarray
    peak_score: float
    diagnosis: object
    feature_tests: dict = field(default_factory=dict)

    def to_dict(self, alpha=None):
        alpha = CONFIG["alpha"] if alpha is None else alpha
        lookup = {name: i for i, name in enumerate(self.diagnosis.feature_names)}
        return {
            "start": epoch_to_stamp(self.window_starts[0]),
            "end": epoch_to_stamp(self.window_starts[-1]),
            "n_windows": int(len(self.window_starts)),
            "window_starts": [epoch_to_stamp(s) for s in self.window_starts],
            "peak_score": self.peak_score,
            "top_features": [
                {
                    "feature": name,
                    "accumulated": float(self.diagnosis.accumulated[lookup[name]]),
                    **test.to_dict(),
                    "significant": test.p_value < alpha,
                }
                for name, test in self.feature_tests.items()
            ],
            "verdict": None,
        }


def diagnose_period(window_starts, matrix, reference, scores=None, top_k=None, reference_id="calibration"):
    """
    U-Squared of a period against the reference, plus one-sided Welch tests of
    its top-ranked features against every other NORMAL window of the matrix.
    """
    top_k = CONFIG["top_k"] if top_k is None else top_k
    window_starts = np.asarray(sorted(int(s) for s in window_starts), dtype=np.int64)
    if not len(window_starts):
        raise EmptySelectionError("period holds no windows")
    in_period = np.isin(matrix.window_starts, window_starts)
    if in_period.sum() != len(window_starts):
        missing = sorted(set(window_starts.tolist()) - set(matrix.window_starts.tolist()))
        raise ConfigurationError(f"period windows missing from the matrix: {[epoch_to_stamp(s) for s in missing]}")
    if matrix.anomalous[in_period].any():
        raise ConfigurationError("only NORMAL windows can be audited")

    period = matrix.take(in_period)
    diagnosis = u_squared(period, reference, reference_id=reference_id)
    others = ~matrix.anomalous & ~in_period
    tests = {}
    for ranked in rank_features(diagnosis, top_k):
        column = matrix.column(ranked.name)
        period_values = column[in_period]
        # a single value is repeated into a zero-variance sample
        if len(period_values) < 2:
            period_values = np.repeat(period_values, 2)
        tests[ranked.name] = welch_ttest(period_values, column[others], Alternative.GREATER)
    peak = float(np.max(np.asarray(scores, dtype=float)[in_period])) if scores is not None else float("nan")
    return SuspiciousPeriod(window_starts=window_starts, peak_score=peak, diagnosis=diagnosis, feature_tests=tests)


@dataclass(frozen=True)
class AuditReport:
    threshold: float
    flagged: np.ndarray
    periods: list

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "n_flagged": int(len(self.flagged)),
            "periods": [period.to_dict() for period in self.periods],
        }


def audit(matrix, scores, reference, percentile=None, threshold=None, max_gap=None, top_k=None):
    """flag_background, group_periods and diagnose_period chained over one scored matrix."""
    flagged, applied = flag_background(scores, matrix.window_labels, percentile, threshold)
    minutes = matrix.window_starts[flagged] // matrix.window_length
    periods = []
    for run in group_periods(minutes, max_gap):
        stamps = np.asarray(run, dtype=np.int64) * matrix.window_length
        stamps = stamps[np.isin(stamps, matrix.window_starts)]
        periods.append(diagnose_period(stamps, matrix, reference, scores=scores, top_k=top_k))
    logger.info(f"audit grouped {len(flagged)} flagged windows into {len(periods)} periods")
    return AuditReport(threshold=applied, flagged=flagged, periods=periods)


def write_audit_report(report, path):
    write_json(path, report.to_dict())


def export_period_flows(flows, period, window_length, target):
    """Write the flows starting inside the period's windows as a flow CSV; returns the count."""
    starts = np.asarray(getattr(period, "window_starts", period), dtype=np.int64)
    if not len(starts):
        raise EmptySelectionError("period holds no windows")
    lower, upper = int(starts.min()), int(starts.max()) + window_length
    selected = [flow for flow in flows if lower <= flow.start_time < upper]
    write_flow_csv(selected, target)
    logger.info(f"exported {len(selected)} flows of period {epoch_to_stamp(lower)}")
    return len(selected)
