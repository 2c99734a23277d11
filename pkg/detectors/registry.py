"""Detector dispatch, model files and score CSVs."""
import io
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd

from common.errors import ConfigurationError, InputError
from common.settings import read_json, write_frame, write_json
from detectors.msnm import MsnmModel, fit_msnm, score_msnm
from detectors.ocsvm import OcsvmModel, fit_ocsvm, score_ocsvm
from faac.matrix import WindowLabel
from flows.record import format_stamps, parse_stamps


class Detector(str, Enum):
    MSNM = "MSNM"
    OCSVM = "OCSVM"


MODEL_TYPES = {"msnm": MsnmModel, "ocsvm": OcsvmModel}


def detector_of(model):
    return Detector.MSNM if isinstance(model, MsnmModel) else Detector.OCSVM


def fit_detector(detector, calibration, **params):
    """Fit MSNM or OCSVM; params are passed through to fit_msnm / fit_ocsvm."""
    try:
        detector = Detector(str(getattr(detector, "value", detector)).upper())
    except ValueError as e:
        raise ConfigurationError(f"unknown detector {detector!r}") from e
    if detector is Detector.MSNM:
        return fit_msnm(calibration, **params)
    return fit_ocsvm(calibration, **params)


def score_detector(model, matrix):
    """Score column plus the detector's extra columns (d_stat, q_stat for MSNM)."""
    if isinstance(model, MsnmModel):
        scores = score_msnm(model, matrix)
        return scores.score, {"d_stat": scores.d_stat, "q_stat": scores.q_stat}
    return score_ocsvm(model, matrix), {}


def save_model(model, path):
    write_json(path, model.to_dict())


def load_model(path):
    payload = read_json(path)
    model_type = MODEL_TYPES.get(str(payload.get("detector", "")).lower())
    if model_type is None:
        raise InputError(f"{path} is not a detector model file")
    try:
        return model_type.from_dict(payload)
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"malformed model file {path}: {e}") from e


@dataclass(frozen=True)
class ScoredWindows:
    window_starts: np.ndarray
    scores: np.ndarray
    window_labels: tuple


def score_frame(matrix, scores, extra=None):
    frame = pd.DataFrame({"window_start": format_stamps(matrix.window_starts), "score": scores})
    for name, values in (extra or {}).items():
        frame[name] = values
    frame["label"] = [label.kind.value.lower() for label in matrix.window_labels]
    frame["attack_types"] = [label.token() for label in matrix.window_labels]
    return frame


def write_score_csv(matrix, scores, target, extra=None):
    write_frame(score_frame(matrix, scores, extra), target)


def dumps_scores(matrix, scores, extra=None):
    buffer = io.StringIO()
    write_score_csv(matrix, scores, buffer, extra)
    return buffer.getvalue()


def read_score_csv(source):
    try:
        frame = pd.read_csv(source, dtype={"window_start": str, "label": str, "attack_types": str},
                            keep_default_na=False, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as e:
        raise InputError(f"cannot read scores {source}: {e}") from e
    if not {"window_start", "score", "attack_types"} <= set(frame.columns):
        raise InputError(f"{source} is not a score CSV")
    starts = parse_stamps(frame["window_start"])
    if starts.isna().any():
        raise InputError(f"{source}: unparsable window_start")
    labels = tuple(
        WindowLabel.from_attacks(t.upper() for t in token.split(";") if t)
        for token in frame["attack_types"]
    )
    return ScoredWindows(
        window_starts=starts.to_numpy(dtype=np.int64),
        scores=frame["score"].to_numpy(dtype=float),
        window_labels=labels,
    )
