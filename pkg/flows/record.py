"""Canonical flow record and the flow CSV codec."""
import io
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum

import numpy as np
import pandas as pd

from common.errors import FlowParseError, InputError
from common.settings import load_package_config, write_frame

logger = logging.getLogger(__name__)

CONFIG = load_package_config(os.path.dirname(__file__))
HEADER = tuple(CONFIG["csv"]["header"])
STAMP_FORMAT = CONFIG["csv"]["timestamp_format"]
PORTLESS_PROTOCOLS = {"ICMP", "OTHER"}
INT64_MAX = str(np.iinfo(np.int64).max)


class Protocol(str, Enum):
    TCP = "TCP"
    UDP = "UDP"
    ICMP = "ICMP"
    OTHER = "OTHER"


class LabelKind(str, Enum):
    BACKGROUND = "BACKGROUND"
    ANOMALY = "ANOMALY"


class AttackType(str, Enum):
    DOS = "DOS"
    SCAN11 = "SCAN11"
    SCAN44 = "SCAN44"
    NERISBOTNET = "NERISBOTNET"
    OTHER = "OTHER"


@dataclass(frozen=True)
class FlowLabel:
    kind: LabelKind = LabelKind.BACKGROUND
    attack_type: AttackType | None = None

    def __post_init__(self):
        if (self.kind is LabelKind.ANOMALY) != (self.attack_type is not None):
            raise ValueError("attack_type must be present exactly when kind is ANOMALY")

    @property
    def is_anomaly(self):
        return self.kind is LabelKind.ANOMALY


BACKGROUND = FlowLabel()


def anomaly(attack_type):
    return FlowLabel(LabelKind.ANOMALY, AttackType(attack_type))


@dataclass(frozen=True, slots=True)
class FlowRecord:
    """
    One flow, unidirectional (rev counters 0) or merged bidirectional.

    start_time is UTC epoch seconds; the CSV carries it as YYYYMMDDhhmmss.
    """
    start_time: int
    duration: float
    src_addr: str
    dst_addr: str
    src_port: int
    dst_port: int
    protocol: Protocol
    fwd_packets: int
    fwd_bytes: int
    rev_packets: int = 0
    rev_bytes: int = 0
    label: FlowLabel = field(default=BACKGROUND)

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError(f"Invalid duration: {self.duration}")
        for name in ("fwd_packets", "fwd_bytes", "rev_packets", "rev_bytes"):
            if getattr(self, name) < 0:
                raise ValueError(f"Invalid {name}: {getattr(self, name)}")
        for name in ("src_port", "dst_port"):
            port = getattr(self, name)
            if not 0 <= port <= 65535:
                raise ValueError(f"Invalid {name}: {port}")
            if port == 0 and self.protocol.value not in PORTLESS_PROTOCOLS:
                raise ValueError(f"{name} 0 is only valid for port-less protocols")

    @property
    def is_bidirectional(self):
        return self.rev_packets > 0 or self.rev_bytes > 0

    def five_tuple(self):
        return (self.src_addr, self.dst_addr, self.src_port, self.dst_port, self.protocol)

    def reverse_tuple(self):
        return (self.dst_addr, self.src_addr, self.dst_port, self.src_port, self.protocol)


@dataclass
class ParseResult:
    records: list
    skipped: int = 0
    errors: list = field(default_factory=list)


def stamp_to_epoch(stamp):
    """'YYYYMMDDhhmmss' (or a 12-digit minute stamp) to UTC epoch seconds."""
    stamp = str(stamp)
    if len(stamp) == 12:
        stamp += "00"
    try:
        moment = datetime.strptime(stamp, STAMP_FORMAT).replace(tzinfo=timezone.utc)
    except ValueError as e:
        raise ValueError(f"unparsable timestamp {stamp!r}") from e
    return int(moment.timestamp())


def epoch_to_stamp(epoch):
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime(STAMP_FORMAT)


def format_stamps(epochs):
    """Vectorized epoch_to_stamp for CSV columns."""
    moments = pd.to_datetime(np.asarray(epochs, dtype=np.int64), unit="s", utc=True)
    return moments.strftime(STAMP_FORMAT)


def parse_stamps(column):
    """Vectorized stamp_to_epoch; unparsable entries become <NA>."""
    column = pd.Series(column, dtype="string")
    valid = column.str.fullmatch(r"\d{14}").fillna(False)
    moments = pd.to_datetime(column.where(valid), format=STAMP_FORMAT, errors="coerce", utc=True)
    epochs = (moments - pd.Timestamp(0, tz="UTC")) // pd.Timedelta(seconds=1)
    return epochs.astype("Int64")


def _line_errors(frame):
    """Per-row reason string for every malformed row ('' when the row is valid)."""
    reasons = pd.Series("", index=frame.index, dtype=object)

    def flag(mask, reason):
        mask = mask.fillna(True) & (reasons == "")
        reasons[mask] = reason

    flag(parse_stamps(frame["start_time"]).isna(), "unparsable timestamp")
    duration = pd.to_numeric(frame["duration"].astype(object), errors="coerce").astype(float)
    flag(duration.isna() | ~np.isfinite(duration) | (duration < 0), "invalid duration")
    ports = {}
    for name in ("src_port", "dst_port"):
        digits = frame[name].str.fullmatch(r"\d+")
        ports[name] = pd.to_numeric(frame[name].where(digits).astype(object), errors="coerce")
        flag(~digits | (ports[name] > 65535), f"invalid {name}")
    protocol = frame["protocol"].str.upper()
    flag(~protocol.isin([p.value for p in Protocol]), "unknown protocol token")
    for name in ("fwd_packets", "fwd_bytes", "rev_packets", "rev_bytes"):
        flag(~frame[name].str.fullmatch(r"\d+"), f"non-numeric counter {name}")
        # equal-length digit strings compare like the numbers they spell
        significant = frame[name].str.lstrip("0")
        width = significant.str.len()
        flag((width > len(INT64_MAX)) | ((width == len(INT64_MAX)) & (significant > INT64_MAX)),
             f"counter {name} out of range")
    label = frame["label"].str.upper()
    flag(~label.isin([k.value for k in LabelKind]), "unknown label token")
    attack = frame["attack_type"].str.upper()
    flag(~attack.isin([""] + [a.value for a in AttackType]), "unknown attack_type token")
    flag((label == "ANOMALY") != (attack != ""), "attack_type must be given exactly for anomaly labels")
    portless = protocol.isin(list(PORTLESS_PROTOCOLS))
    zero_port = (ports["src_port"] == 0) | (ports["dst_port"] == 0)
    flag(zero_port & ~portless, "port 0 on a port-based protocol")
    return reasons


def parse_flow_csv(stream, strict=False):
    """
    Parse the canonical flow CSV.

    Args:
        stream: text stream (or path) whose first line is the fixed header
        strict: abort at the first malformed line instead of skipping it
    Returns:
        ParseResult with records in file order and the skipped-line count
    """
    if isinstance(stream, (str, os.PathLike)):
        try:
            with open(stream, "r") as f:
                return parse_flow_csv(f, strict=strict)
        except (OSError, UnicodeDecodeError) as e:
            raise InputError(f"cannot read {stream}: {e}") from e

    lines = stream.read().splitlines()
    if not lines or lines[0].strip() != ",".join(HEADER):
        raise FlowParseError(1, "header does not match the canonical flow schema")

    rows, numbers, bad = [], [], []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(HEADER):
            bad.append((number, f"expected {len(HEADER)} fields, got {len(parts)}"))
            continue
        rows.append(parts)
        numbers.append(number)

    frame = pd.DataFrame(rows, columns=list(HEADER), dtype="string")
    if len(frame):
        reasons = _line_errors(frame)
        for number, reason in zip(np.asarray(numbers)[(reasons != "").to_numpy()], reasons[reasons != ""]):
            bad.append((int(number), reason))
        frame = frame[(reasons == "").to_numpy()]
    bad.sort()

    if strict and bad:
        raise FlowParseError(*bad[0])
    for number, reason in bad:
        logger.debug(f"skipping line {number}: {reason}")
    if bad:
        logger.warning(f"skipped {len(bad)} malformed flow lines")

    records = list(_records_from_frame(frame))
    return ParseResult(records=records, skipped=len(bad), errors=bad)


def _records_from_frame(frame):
    if not len(frame):
        return
    starts = parse_stamps(frame["start_time"]).to_numpy(dtype=np.int64)
    durations = frame["duration"].astype(float).to_numpy()
    ints = {name: frame[name].astype("int64").to_numpy()
            for name in ("src_port", "dst_port", "fwd_packets", "fwd_bytes", "rev_packets", "rev_bytes")}
    labels = {}
    for i, (addr_s, addr_d, proto, kind, attack) in enumerate(zip(
            frame["src_addr"], frame["dst_addr"], frame["protocol"].str.upper(),
            frame["label"].str.upper(), frame["attack_type"].str.upper())):
        key = (kind, attack)
        if key not in labels:
            labels[key] = anomaly(attack) if kind == "ANOMALY" else BACKGROUND
        yield FlowRecord(
            start_time=int(starts[i]),
            duration=float(durations[i]),
            src_addr=str(addr_s),
            dst_addr=str(addr_d),
            src_port=int(ints["src_port"][i]),
            dst_port=int(ints["dst_port"][i]),
            protocol=Protocol(proto),
            fwd_packets=int(ints["fwd_packets"][i]),
            fwd_bytes=int(ints["fwd_bytes"][i]),
            rev_packets=int(ints["rev_packets"][i]),
            rev_bytes=int(ints["rev_bytes"][i]),
            label=labels[key],
        )


def to_frame(records):
    """Columnar view of flow records (numeric columns, label columns as strings)."""
    columns = {name: [] for name in HEADER}
    for r in records:
        columns["start_time"].append(r.start_time)
        columns["duration"].append(r.duration)
        columns["src_addr"].append(r.src_addr)
        columns["dst_addr"].append(r.dst_addr)
        columns["src_port"].append(r.src_port)
        columns["dst_port"].append(r.dst_port)
        columns["protocol"].append(r.protocol.value)
        columns["fwd_packets"].append(r.fwd_packets)
        columns["fwd_bytes"].append(r.fwd_bytes)
        columns["rev_packets"].append(r.rev_packets)
        columns["rev_bytes"].append(r.rev_bytes)
        columns["label"].append(r.label.kind.value)
        columns["attack_type"].append(r.label.attack_type.value if r.label.attack_type else "")
    frame = pd.DataFrame(columns)
    return frame.astype({"start_time": "int64", "duration": "float64", "src_port": "int64",
                         "dst_port": "int64", "fwd_packets": "int64", "fwd_bytes": "int64",
                         "rev_packets": "int64", "rev_bytes": "int64"})


def write_flow_csv(records, target):
    """Serialize records in the canonical schema; floats use shortest round-trip repr."""
    frame = to_frame(records)
    frame["start_time"] = format_stamps(frame["start_time"])
    frame["duration"] = [repr(float(d)) for d in frame["duration"]]
    frame["protocol"] = frame["protocol"].str.lower()
    frame["label"] = frame["label"].str.lower()
    frame["attack_type"] = frame["attack_type"].str.lower()
    write_frame(frame, target)


def dumps_flow_csv(records):
    buffer = io.StringIO()
    write_flow_csv(records, buffer)
    return buffer.getvalue()
