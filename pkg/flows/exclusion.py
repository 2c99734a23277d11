"""Flow-level exclusion of known anomalies."""
import logging
from dataclasses import dataclass

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from common.errors import ConfigurationError
from flows.record import AttackType, LabelKind, Protocol, stamp_to_epoch

logger = logging.getLogger(__name__)


class FlowPredicate(BaseModel):
    """
    Conjunction of flow-field conditions; unset fields match everything.

    time_range is [start, end) in YYYYMMDDhhmmss; endpoints matches either side.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    time_range: tuple[str, str] | None = None
    src_port: frozenset[int] | None = None
    dst_port: frozenset[int] | None = None
    src_addr: frozenset[str] | None = None
    dst_addr: frozenset[str] | None = None
    endpoints: frozenset[str] | None = None
    protocol: frozenset[Protocol] | None = None
    label: LabelKind | None = None
    attack_type: frozenset[AttackType] | None = None

    @field_validator("label", mode="before")
    @classmethod
    def _upper_label(cls, value):
        return value.upper() if isinstance(value, str) else value

    @field_validator("protocol", "attack_type", mode="before")
    @classmethod
    def _upper_tokens(cls, value):
        if value is None:
            return value
        return [v.upper() if isinstance(v, str) else v for v in value]

    @model_validator(mode="after")
    def _check_range(self):
        if self.time_range is not None:
            start, end = (stamp_to_epoch(s) for s in self.time_range)
            if start >= end:
                raise ValueError("time_range start must precede end")
        return self

    def epoch_range(self):
        if self.time_range is None:
            return None
        return tuple(stamp_to_epoch(s) for s in self.time_range)

    def compile(self):
        """Return a callable flow -> bool for this predicate."""
        window = self.epoch_range()

        def matches(flow):
            if window is not None and not window[0] <= flow.start_time < window[1]:
                return False
            if self.src_port is not None and flow.src_port not in self.src_port:
                return False
            if self.dst_port is not None and flow.dst_port not in self.dst_port:
                return False
            if self.src_addr is not None and flow.src_addr not in self.src_addr:
                return False
            if self.dst_addr is not None and flow.dst_addr not in self.dst_addr:
                return False
            if self.endpoints is not None and not (
                    flow.src_addr in self.endpoints or flow.dst_addr in self.endpoints):
                return False
            if self.protocol is not None and flow.protocol not in self.protocol:
                return False
            if self.label is not None and flow.label.kind is not self.label:
                return False
            if self.attack_type is not None and flow.label.attack_type not in self.attack_type:
                return False
            return True

        return matches


def load_predicate(description):
    """Build a FlowPredicate from a dict; unknown fields are configuration errors."""
    if isinstance(description, FlowPredicate):
        return description
    try:
        return FlowPredicate.model_validate(description)
    except ValidationError as e:
        raise ConfigurationError(f"invalid flow predicate: {e}") from e


@dataclass
class ExclusionResult:
    flows: list
    removed: int


def exclude_flows(flows, predicate):
    flows = list(flows)
    matches = load_predicate(predicate).compile()
    kept = [flow for flow in flows if not matches(flow)]
    removed = len(flows) - len(kept)
    logger.info(f"excluded {removed} of {len(flows)} flows at flow level")
    return ExclusionResult(flows=kept, removed=removed)
