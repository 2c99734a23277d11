"""Pairing of unidirectional flows into bidirectional flows."""
import logging
import os
from collections import defaultdict, deque
from dataclasses import replace
from enum import Enum

from pydantic import BaseModel, ConfigDict, Field

from common.errors import InputError
from common.settings import load_package_config
from flows.record import FlowLabel

logger = logging.getLogger(__name__)

CONFIG = load_package_config(os.path.dirname(__file__))


class Pairing(str, Enum):
    FIRST_SEEN = "first_seen"
    LOW_PORT_SERVER = "low_port_server"


class MergePolicy(BaseModel):
    """
    How reverse flows are paired.

    time_tolerance None means "the earlier flow's duration + tolerance_slack seconds".
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    pairing: Pairing = Pairing(CONFIG["merge"]["pairing"])
    time_tolerance: float | None = Field(default=None, ge=0)

    def tolerance_for(self, flow):
        if self.time_tolerance is not None:
            return self.time_tolerance
        return flow.duration + CONFIG["merge"]["tolerance_slack"]


def _order_key(flow):
    # start_time first; the rest only makes ties independent of input order
    return (flow.start_time, flow.src_addr, flow.dst_addr, flow.src_port, flow.dst_port,
            flow.protocol.value, flow.duration, flow.fwd_packets, flow.fwd_bytes)


def _source_is_first(first, pairing):
    """True when the earlier record's source endpoint becomes the merged source."""
    if pairing is Pairing.LOW_PORT_SERVER and first.src_port != first.dst_port:
        # the lower port is the server, the merged source is the other side
        return first.src_port > first.dst_port
    return True


def _merged_label(source, other):
    if source.label.is_anomaly:
        return source.label
    if other.label.is_anomaly:
        return other.label
    return FlowLabel()


def _merge_pair(first, second, pairing):
    source, other = (first, second) if _source_is_first(first, pairing) else (second, first)
    end = max(first.start_time + first.duration, second.start_time + second.duration)
    return replace(
        source,
        start_time=first.start_time,
        duration=float(end - first.start_time),
        rev_packets=other.fwd_packets,
        rev_bytes=other.fwd_bytes,
        label=_merged_label(source, other),
    )


def merge_bidirectional(flows, policy=None, allow_bidirectional=False):
    """
    Merge reverse-direction flow pairs into single bidirectional records.

    Greedy earliest-candidate-first: every record is matched against the oldest
    still-open record whose 5-tuple is its exact reverse and whose start lies
    within the tolerance. A record merges at most once.

    Args:
        flows: unidirectional FlowRecords, any order
        policy: MergePolicy (defaults to FIRST_SEEN with duration-based tolerance)
        allow_bidirectional: pass already-merged records through untouched
            instead of rejecting them, which makes re-merging a no-op
    Returns:
        list of FlowRecord sorted by start_time
    """
    policy = policy or MergePolicy()
    ordered = sorted(flows, key=_order_key)

    output = [None] * len(ordered)
    open_by_tuple = defaultdict(deque)
    merged = 0
    for position, flow in enumerate(ordered):
        if flow.is_bidirectional:
            if not allow_bidirectional:
                raise InputError(f"flow at {flow.start_time} already carries reverse counters")
            output[position] = flow
            continue

        candidates = open_by_tuple.get(flow.reverse_tuple())
        partner = None
        while candidates:
            head_position, head = candidates[0]
            if flow.start_time - head.start_time > policy.tolerance_for(head):
                # stale for this and every later record
                candidates.popleft()
                continue
            partner = candidates.popleft()
            break

        if partner is None:
            open_by_tuple[flow.five_tuple()].append((position, flow))
            output[position] = flow
            continue

        head_position, head = partner
        output[head_position] = _merge_pair(head, flow, policy.pairing)
        merged += 1

    result = [flow for flow in output if flow is not None]
    logger.info(f"merged {merged} flow pairs ({len(ordered)} -> {len(result)} records, {policy.pairing.value})")
    return result
