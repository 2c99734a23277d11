"""The windows x features observation matrix and its CSV form."""
import io
from dataclasses import dataclass, field
from enum import Enum
from functools import reduce
from math import gcd

import numpy as np
import pandas as pd

from common.errors import ConfigurationError, InputError
from common.settings import write_frame
from faac.features import CONFIG as FEATURE_CONFIG
from flows.record import AttackType, format_stamps, parse_stamps


class WindowKind(str, Enum):
    NORMAL = "NORMAL"
    ANOMALOUS = "ANOMALOUS"


@dataclass(frozen=True)
class WindowLabel:
    kind: WindowKind = WindowKind.NORMAL
    attack_types: frozenset = frozenset()

    def __post_init__(self):
        if (self.kind is WindowKind.NORMAL) != (not self.attack_types):
            raise ValueError("a window is NORMAL exactly when it holds no attack types")

    @classmethod
    def from_attacks(cls, attacks):
        attacks = frozenset(AttackType(a) for a in attacks)
        return cls(WindowKind.ANOMALOUS if attacks else WindowKind.NORMAL, attacks)

    @property
    def is_anomalous(self):
        return self.kind is WindowKind.ANOMALOUS

    def token(self):
        return ";".join(sorted(a.value.lower() for a in self.attack_types))


NORMAL = WindowLabel()


@dataclass(frozen=True)
class ObservationMatrix:
    window_starts: np.ndarray
    feature_names: tuple
    counts: np.ndarray
    window_labels: tuple
    window_length: int = FEATURE_CONFIG["features"]["window_length"]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        starts = np.asarray(self.window_starts, dtype=np.int64)
        counts = np.asarray(self.counts, dtype=float).reshape(len(starts), len(self.feature_names))
        object.__setattr__(self, "window_starts", starts)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "window_labels", tuple(self.window_labels))
        if len(self.window_labels) != len(starts):
            raise ValueError("one label per window is required")
        if len(starts) > 1 and np.any(np.diff(starts) <= 0):
            raise ValueError("window starts must be strictly increasing")
        if np.any(starts % self.window_length):
            raise ValueError(f"window starts must be aligned to {self.window_length} s")

    @property
    def n_windows(self):
        return len(self.window_starts)

    @property
    def n_features(self):
        return len(self.feature_names)

    @property
    def anomalous(self):
        return np.array([label.is_anomalous for label in self.window_labels], dtype=bool)

    def has_attack(self, attack_type):
        attack_type = AttackType(attack_type)
        return np.array([attack_type in label.attack_types for label in self.window_labels], dtype=bool)

    def feature_index(self, names):
        lookup = {name: i for i, name in enumerate(self.feature_names)}
        missing = [name for name in names if name not in lookup]
        if missing:
            raise ConfigurationError(f"unknown features: {missing}")
        return [lookup[name] for name in names]

    def column(self, name):
        return self.counts[:, self.feature_index([name])[0]]

    def take(self, rows):
        """Row subset by boolean mask or index array, order preserved."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        rows = rows.astype(np.int64)
        return ObservationMatrix(
            window_starts=self.window_starts[rows],
            feature_names=self.feature_names,
            counts=self.counts[rows],
            window_labels=[self.window_labels[i] for i in rows],
            window_length=self.window_length,
            meta=dict(self.meta),
        )

    def concat(self, other):
        if self.feature_names != other.feature_names or self.window_length != other.window_length:
            raise ConfigurationError("only matrices with the same features and window length concatenate")
        return ObservationMatrix(
            window_starts=np.concatenate([self.window_starts, other.window_starts]),
            feature_names=self.feature_names,
            counts=np.vstack([self.counts, other.counts]),
            window_labels=self.window_labels + other.window_labels,
            window_length=self.window_length,
            meta=dict(self.meta),
        )

    def equals(self, other):
        return (self.feature_names == other.feature_names
                and np.array_equal(self.window_starts, other.window_starts)
                and np.array_equal(self.counts, other.counts)
                and self.window_labels == other.window_labels)

    def to_frame(self):
        frame = pd.DataFrame(self.counts, columns=list(self.feature_names))
        frame.insert(0, "window_start", format_stamps(self.window_starts))
        frame["label"] = [label.kind.value.lower() for label in self.window_labels]
        frame["attack_types"] = [label.token() for label in self.window_labels]
        return frame

    def write_csv(self, target):
        write_frame(self.to_frame(), target)

    def dumps(self):
        buffer = io.StringIO()
        self.write_csv(buffer)
        return buffer.getvalue()


def _infer_window_length(starts):
    if len(starts) < 2:
        return FEATURE_CONFIG["features"]["window_length"]
    return int(reduce(gcd, (int(d) for d in np.diff(starts))))


def read_matrix_csv(source, window_length=None):
    try:
        frame = pd.read_csv(source, dtype={"window_start": str, "label": str, "attack_types": str},
                            keep_default_na=False, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as e:
        raise InputError(f"cannot read matrix {source}: {e}") from e
    if list(frame.columns[:1]) != ["window_start"] or list(frame.columns[-2:]) != ["label", "attack_types"]:
        raise InputError(f"{source} is not an observation matrix CSV")
    starts = parse_stamps(frame["window_start"])
    if starts.isna().any():
        raise InputError(f"{source}: unparsable window_start")
    starts = starts.to_numpy(dtype=np.int64)
    features = list(frame.columns[1:-2])
    labels = [
        WindowLabel.from_attacks(t.upper() for t in token.split(";") if t)
        for token in frame["attack_types"]
    ]
    for label, kind in zip(labels, frame["label"]):
        if label.kind.value.lower() != kind.lower():
            raise InputError(f"{source}: label column disagrees with attack_types")
    return ObservationMatrix(
        window_starts=starts,
        feature_names=features,
        counts=frame[features].to_numpy(dtype=float),
        window_labels=labels,
        window_length=window_length or _infer_window_length(starts),
    )
