"""Featurization of flows into observation matrices, and the dataset-variant operations."""
import logging

import numpy as np

from common.errors import ConfigurationError, EmptySelectionError, InputError
from faac.features import FlowField, Weight, default_feature_config
from faac.matrix import ObservationMatrix, WindowLabel
from flows.exclusion import load_predicate
from flows.record import AttackType

logger = logging.getLogger(__name__)

ATTACK_ORDER = tuple(AttackType)


class FlowColumns:
    """Numpy columns of a flow sequence, the form featurization works on."""

    def __init__(self, flows):
        flows = list(flows)
        self.size = len(flows)
        self.start_time = np.fromiter((f.start_time for f in flows), dtype=np.int64, count=self.size)
        self.src_port = np.fromiter((f.src_port for f in flows), dtype=np.int64, count=self.size)
        self.dst_port = np.fromiter((f.dst_port for f in flows), dtype=np.int64, count=self.size)
        self.protocol = np.array([f.protocol.value for f in flows], dtype=object)
        self.fwd_packets = np.fromiter((f.fwd_packets for f in flows), dtype=np.int64, count=self.size)
        self.fwd_bytes = np.fromiter((f.fwd_bytes for f in flows), dtype=np.int64, count=self.size)
        self.rev_packets = np.fromiter((f.rev_packets for f in flows), dtype=np.int64, count=self.size)
        self.rev_bytes = np.fromiter((f.rev_bytes for f in flows), dtype=np.int64, count=self.size)
        self.flow_count = np.ones(self.size, dtype=np.int64)
        self.attack = np.array(
            [ATTACK_ORDER.index(f.label.attack_type) if f.label.is_anomaly else -1 for f in flows],
            dtype=np.int64,
        )

    def values(self, flow_field):
        return getattr(self, FlowField(flow_field).value)


def _spec_mask(spec, values):
    if spec.exact is not None:
        target = str(spec.exact).upper() if spec.field is FlowField.PROTOCOL else spec.exact
        return values == target
    if spec.values is not None:
        targets = [str(v).upper() for v in spec.values] if spec.field is FlowField.PROTOCOL else list(spec.values)
        return np.isin(values, targets)
    low, high = spec.range
    return (values >= low) & (values <= high)


def _feature_masks(config, columns):
    masks = {}
    for spec in config.specs:
        if not spec.other:
            masks[spec.name] = _spec_mask(spec, columns.values(spec.field))
    for spec in config.specs:
        if spec.other:
            claimed = np.zeros(columns.size, dtype=bool)
            for peer in config.specs:
                if not peer.other and peer.field is spec.field and peer.weight is spec.weight:
                    claimed |= masks[peer.name]
            masks[spec.name] = ~claimed
    return masks


def featurize(flows, config=None, start=None, end=None):
    """
    Count features per window (feature-as-a-counter).

    Args:
        flows: FlowRecords sorted by start_time
        config: FeatureConfig (the shipped dictionary by default)
        start, end: optional explicit epoch range [start, end); both must be
            aligned to the window length and every flow must fall inside it
    Returns:
        ObservationMatrix with one row per window, empty windows included
    """
    config = config or default_feature_config()
    columns = flows if isinstance(flows, FlowColumns) else FlowColumns(flows)
    length = config.window_length

    if columns.size and np.any(np.diff(columns.start_time) < 0):
        raise InputError("flows must be sorted by start_time before featurization")
    if (start is None) != (end is None):
        raise ConfigurationError("give both ends of the featurization range or neither")
    if start is not None:
        if start % length or end % length or start >= end:
            raise ConfigurationError(f"featurization range must be aligned to {length} s and non-empty")
        if columns.size and (columns.start_time[0] < start or columns.start_time[-1] >= end):
            raise InputError("flows found outside the configured featurization range")
    elif columns.size:
        start = int(columns.start_time[0] // length * length)
        end = int(columns.start_time[-1] // length * length + length)
    else:
        start = end = 0

    n_windows = (end - start) // length
    rows = (columns.start_time - start) // length
    counts = np.zeros((n_windows, len(config.emitting)), dtype=float)
    masks = _feature_masks(config, columns)
    for j, spec in enumerate(config.emitting):
        mask = masks[spec.name]
        weights = None
        if spec.weight is Weight.SUM_FIELD:
            weights = columns.values(spec.field)[mask].astype(float)
        counts[:, j] = np.bincount(rows[mask], weights=weights, minlength=n_windows)

    attacks_per_type = [
        np.bincount(rows[columns.attack == k], minlength=n_windows) > 0 for k in range(len(ATTACK_ORDER))
    ]
    labels = [
        WindowLabel.from_attacks(ATTACK_ORDER[k] for k in range(len(ATTACK_ORDER)) if attacks_per_type[k][i])
        for i in range(n_windows)
    ]
    matrix = ObservationMatrix(
        window_starts=np.arange(start, end, length, dtype=np.int64),
        feature_names=config.feature_names,
        counts=counts,
        window_labels=labels,
        window_length=length,
    )
    logger.info(f"featurized {columns.size} flows into {n_windows} windows x {len(config.emitting)} features")
    return matrix


def select_time_range(matrix, start, end):
    if start >= end:
        raise ConfigurationError("selection start must precede end")
    keep = (matrix.window_starts >= start) & (matrix.window_starts < end)
    if not keep.any():
        raise EmptySelectionError(f"no windows in [{start}, {end})")
    return matrix.take(keep)


def drop_features(matrix, names):
    names = list(names)
    unknown = [name for name in names if name not in matrix.feature_names]
    if unknown:
        raise ConfigurationError(f"cannot drop unknown features: {unknown}")
    keep = [i for i, name in enumerate(matrix.feature_names) if name not in set(names)]
    return ObservationMatrix(
        window_starts=matrix.window_starts,
        feature_names=[matrix.feature_names[i] for i in keep],
        counts=matrix.counts[:, keep],
        window_labels=matrix.window_labels,
        window_length=matrix.window_length,
        meta=dict(matrix.meta),
    )


def union_features(a, b, prefixes=("uni_", "bid_")):
    """Side-by-side columns of two matrices over the same windows, names prefixed."""
    first_prefix, second_prefix = prefixes
    n = min(a.n_windows, b.n_windows)
    mismatch = np.flatnonzero(a.window_starts[:n] != b.window_starts[:n])
    if len(mismatch):
        stamp = a.window_starts[mismatch[0]]
        raise ConfigurationError(f"window misalignment at {stamp}")
    if a.n_windows != b.n_windows:
        longer = a if a.n_windows > b.n_windows else b
        raise ConfigurationError(f"window misalignment at {longer.window_starts[n]}")
    for stamp, label_a, label_b in zip(a.window_starts, a.window_labels, b.window_labels):
        if label_a != label_b:
            raise ConfigurationError(f"window label mismatch at {stamp}")
    names = [first_prefix + n for n in a.feature_names] + [second_prefix + n for n in b.feature_names]
    if len(set(names)) != len(names):
        raise ConfigurationError("prefixes do not keep feature names unique")
    return ObservationMatrix(
        window_starts=a.window_starts,
        feature_names=names,
        counts=np.hstack([a.counts, b.counts]),
        window_labels=a.window_labels,
        window_length=a.window_length,
    )


def exclude_observations(matrix, timestamps):
    """Drop the listed windows; stamps that are not windows of the matrix are reported and ignored."""
    timestamps = np.asarray(sorted(set(int(t) for t in timestamps)), dtype=np.int64)
    present = np.isin(timestamps, matrix.window_starts)
    if not present.all():
        logger.warning(f"{int((~present).sum())} exclusion stamps are not windows of the matrix")
    keep = ~np.isin(matrix.window_starts, timestamps)
    logger.info(f"excluded {int((~keep).sum())} observations")
    return matrix.take(keep)


def windows_matching(flows, predicate, window_length):
    """Window stamps holding at least one flow that matches the predicate."""
    matches = load_predicate(predicate).compile()
    return sorted({flow.start_time // window_length * window_length for flow in flows if matches(flow)})


def feature_config_for(matrix_or_names, config=None):
    """The config restricted to the given feature names (used to re-featurize ablations)."""
    config = config or default_feature_config()
    names = getattr(matrix_or_names, "feature_names", matrix_or_names)
    return config.without(set(config.feature_names) - set(names))
