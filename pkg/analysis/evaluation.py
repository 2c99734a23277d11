"""ROC/AUC, Welch t-tests, boxplot statistics and plot-data exports."""
import logging
import os
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.metrics import auc as trapezoid_auc
from sklearn.metrics import roc_curve

from common.errors import ConfigurationError, NumericalError
from common.settings import load_package_config, write_frame
from flows.record import AttackType, format_stamps

logger = logging.getLogger(__name__)

CONFIG = load_package_config(os.path.dirname(__file__))["evaluation"]


def _positives(labels):
    labels = list(labels)
    if labels and hasattr(labels[0], "is_anomalous"):
        return np.array([label.is_anomalous for label in labels], dtype=bool)
    return np.asarray(labels, dtype=bool)


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def to_frame(self):
        return pd.DataFrame({"threshold": self.thresholds, "fpr": self.fpr, "tpr": self.tpr})


def mann_whitney_auc(scores, positives):
    """U / (P * N) with ties counted as 1/2."""
    statistic = stats.mannwhitneyu(scores[positives], scores[~positives], alternative="two-sided").statistic
    return float(statistic) / (positives.sum() * (~positives).sum())


def roc_auc(scores, labels):
    """
    ROC curve over distinct scores, higher = more anomalous.

    Args:
        scores: one score per window
        labels: WindowLabels or booleans (True = ANOMALOUS); all anomalous windows are positives
    Returns:
        RocCurve; the trapezoidal AUC is cross-checked against the Mann-Whitney statistic
    """
    scores = np.asarray(scores, dtype=float)
    positives = _positives(labels)
    if len(scores) != len(positives):
        raise ConfigurationError(f"{len(scores)} scores for {len(positives)} labels")
    if positives.all() or not positives.any():
        raise NumericalError("ROC needs both NORMAL and ANOMALOUS windows")
    if not np.all(np.isfinite(scores)):
        raise NumericalError("scores contain non-finite values")

    fpr, tpr, thresholds = roc_curve(positives, scores, drop_intermediate=False)
    area = float(trapezoid_auc(fpr, tpr))
    check = mann_whitney_auc(scores, positives)
    if abs(area - check) > CONFIG["auc_crosscheck_tolerance"]:
        raise NumericalError(f"trapezoidal AUC {area!r} disagrees with Mann-Whitney AUC {check!r}")
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=area)


def auc_per_attack(scores, window_labels):
    """AUC of every attack type present: its windows against the NORMAL windows only."""
    scores = np.asarray(scores, dtype=float)
    window_labels = list(window_labels)
    normal = np.array([not label.is_anomalous for label in window_labels], dtype=bool)
    if not normal.any():
        raise NumericalError("per-attack AUC needs at least one NORMAL window")
    result = {}
    for attack in AttackType:
        hits = np.array([attack in label.attack_types for label in window_labels], dtype=bool)
        if not hits.any():
            continue
        keep = hits | normal
        result[attack] = roc_auc(scores[keep], hits[keep]).auc
    return result


class Alternative(str, Enum):
    TWO_SIDED = "TWO_SIDED"
    GREATER = "GREATER"


@dataclass(frozen=True)
class TTestResult:
    t_stat: float
    dof: float
    p_value: float
    alternative: Alternative
    degenerate: bool = False

    def to_dict(self):
        return {"t_stat": self.t_stat, "dof": self.dof, "p_value": self.p_value,
                "alternative": self.alternative.value, "degenerate": self.degenerate}


def welch_ttest(sample_a, sample_b, alternative=Alternative.GREATER):
    """
    Welch's unequal-variance t-test with Satterthwaite degrees of freedom.

    GREATER tests mean(a) > mean(b). When both variances are 0 the result is
    flagged degenerate: equal means give t 0 and p 1.
    """
    alternative = Alternative(str(getattr(alternative, "value", alternative)).upper())
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ConfigurationError(f"t-test needs at least 2 values per sample, got {len(a)} and {len(b)}")

    mean_a, mean_b = a.mean(), b.mean()
    share_a = a.var(ddof=1) / len(a)
    share_b = b.var(ddof=1) / len(b)
    spread = share_a + share_b
    if spread == 0:
        dof = float(len(a) + len(b) - 2)
        if mean_a == mean_b:
            return TTestResult(0.0, dof, 1.0, alternative, degenerate=True)
        t_stat = np.inf if mean_a > mean_b else -np.inf
        p_value = 0.0 if alternative is Alternative.TWO_SIDED or mean_a > mean_b else 1.0
        return TTestResult(float(t_stat), dof, p_value, alternative, degenerate=True)

    t_stat = (mean_a - mean_b) / np.sqrt(spread)
    dof = spread ** 2 / (share_a ** 2 / (len(a) - 1) + share_b ** 2 / (len(b) - 1))
    if alternative is Alternative.GREATER:
        p_value = stats.t.sf(t_stat, dof)
    else:
        p_value = min(1.0, 2.0 * stats.t.sf(abs(t_stat), dof))
    return TTestResult(float(t_stat), float(dof), float(p_value), alternative)


@dataclass(frozen=True)
class BoxplotStats:
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple

    def row(self, group):
        return {"group": group, "q1": self.q1, "median": self.median, "q3": self.q3,
                "whisker_low": self.whisker_low, "whisker_high": self.whisker_high,
                "n_outliers": len(self.outliers)}


def boxplot_stats(values, whisker_factor=None):
    """Quartiles by linear interpolation; whiskers at the extreme values within factor * IQR."""
    factor = CONFIG["whisker_factor"] if whisker_factor is None else whisker_factor
    values = np.sort(np.asarray(values, dtype=float))
    if not len(values):
        raise ConfigurationError("boxplot statistics need at least one value")
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    low_fence, high_fence = q1 - factor * iqr, q3 + factor * iqr
    inside = values[(values >= low_fence) & (values <= high_fence)]
    outliers = values[(values < low_fence) | (values > high_fence)]
    return BoxplotStats(
        q1=float(q1),
        median=float(median),
        q3=float(q3),
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
        outliers=tuple(outliers.tolist()),
    )


@dataclass(frozen=True)
class FeatureComparison:
    feature: str
    background: BoxplotStats
    positive: BoxplotStats
    test: TTestResult

    def to_frame(self):
        return pd.DataFrame([self.background.row("background"), self.positive.row("positive")])


def compare_feature(matrix, feature, positives, alternative=Alternative.GREATER):
    """Boxplots and a Welch test of one feature: positive windows against NORMAL windows."""
    positives = np.asarray(positives, dtype=bool)
    values = matrix.column(feature)
    background = ~matrix.anomalous & ~positives
    if not positives.any() or not background.any():
        raise ConfigurationError(f"comparison of {feature} needs both positive and background windows")
    return FeatureComparison(
        feature=feature,
        background=boxplot_stats(values[background]),
        positive=boxplot_stats(values[positives]),
        test=welch_ttest(values[positives], values[background], alternative),
    )


def write_comparison_csv(comparison, target):
    write_frame(comparison.to_frame(), target)


def export_timeseries(matrix, names, target, start=None, end=None):
    """CSV window_start,<feature...> over [start, end) (the whole matrix by default)."""
    names = list(names)
    columns = matrix.feature_index(names)
    keep = np.ones(matrix.n_windows, dtype=bool)
    if start is not None:
        keep &= matrix.window_starts >= start
    if end is not None:
        keep &= matrix.window_starts < end
    frame = pd.DataFrame(matrix.counts[keep][:, columns], columns=names)
    frame.insert(0, "window_start", format_stamps(matrix.window_starts[keep]))
    write_frame(frame, target)
    return int(keep.sum())


def write_roc_csv(curve, target):
    write_frame(curve.to_frame(), target)


def write_attack_auc_csv(per_attack, target):
    frame = pd.DataFrame({"attack": [a.value.lower() for a in per_attack],
                          "auc": [per_attack[a] for a in per_attack]})
    write_frame(frame, target)


def write_auc_summary(rows, target):
    """rows: dicts with variant, detector, attack, auc."""
    frame = pd.DataFrame(list(rows), columns=["variant", "detector", "attack", "auc"])
    write_frame(frame, target)
