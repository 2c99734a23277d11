"""U-Squared diagnosis: signed squared z-scores of anomalous observations against a reference."""
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from common.errors import ConfigurationError, EmptySelectionError, InputError
from common.settings import load_package_config, write_frame, write_json
from flows.record import AttackType

logger = logging.getLogger(__name__)

CONFIG = load_package_config(os.path.dirname(__file__))["diagnosis"]


@dataclass(frozen=True)
class RankedFeature:
    name: str
    accumulated: float
    sign: int


@dataclass(frozen=True)
class DiagnosisReport:
    feature_names: tuple
    per_observation: np.ndarray
    accumulated: np.ndarray
    reference_id: str = "reference"
    zero_sigma_features: frozenset = frozenset()
    window_starts: np.ndarray = field(default=None, compare=False)

    @property
    def ranking(self):
        # stable sort keeps column order among equal magnitudes
        order = np.argsort(-np.abs(self.accumulated), kind="stable")
        return tuple(self.feature_names[i] for i in order)

    def to_dict(self, include_per_observation=False):
        payload = {
            "reference_id": self.reference_id,
            "n_observations": int(self.per_observation.shape[0]),
            "feature_names": list(self.feature_names),
            "accumulated": self.accumulated.tolist(),
            "ranking": list(self.ranking),
            "zero_sigma_features": sorted(self.zero_sigma_features),
        }
        if include_per_observation:
            payload["per_observation"] = self.per_observation.tolist()
        return payload


def u_squared(observations, reference, reference_id="reference"):
    """
    Per-feature U-Squared of a set of observations.

    Args:
        observations: ObservationMatrix holding the selected (anomalous) rows
        reference: AutoscaleParams of the reference dataset
        reference_id: name of the reference, carried into the report
    Returns:
        DiagnosisReport; d = z * |z| per observation, accumulated over rows
    """
    if observations.n_windows == 0:
        raise EmptySelectionError("U-Squared needs at least one observation")
    reference.check_features(observations.feature_names)
    z = reference.transform(observations.counts)
    per_observation = z * np.abs(z)
    # ascending observation order
    accumulated = np.cumsum(per_observation, axis=0)[-1]
    return DiagnosisReport(
        feature_names=tuple(observations.feature_names),
        per_observation=per_observation,
        accumulated=accumulated,
        reference_id=reference_id,
        zero_sigma_features=reference.zero_sigma_features,
        window_starts=observations.window_starts,
    )


def rank_features(report, top_k=None):
    top_k = CONFIG["top_k"] if top_k is None else top_k
    if top_k < 1:
        raise ConfigurationError(f"top_k must be at least 1, got {top_k}")
    lookup = {name: i for i, name in enumerate(report.feature_names)}
    ranked = []
    for name in report.ranking[:top_k]:
        value = float(report.accumulated[lookup[name]])
        ranked.append(RankedFeature(name=name, accumulated=value, sign=int(np.sign(value))))
    return ranked


def attack_windows(matrix, attack_type):
    """Rows of the matrix whose label contains the attack type."""
    attack_type = AttackType(str(getattr(attack_type, "value", attack_type)).upper())
    selected = matrix.take(matrix.has_attack(attack_type))
    if selected.n_windows == 0:
        raise EmptySelectionError(f"no windows contain {attack_type.value}")
    return selected


def export_bars(report, target):
    """Bar-plot data: CSV feature,accumulated in feature order."""
    frame = pd.DataFrame({"feature": list(report.feature_names), "accumulated": report.accumulated})
    write_frame(frame, target)


def read_bars(source):
    try:
        frame = pd.read_csv(source, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as e:
        raise InputError(f"cannot read {source}: {e}") from e
    return dict(zip(frame["feature"], frame["accumulated"].astype(float)))


def write_report(report, path, include_per_observation=False):
    write_json(path, report.to_dict(include_per_observation))
