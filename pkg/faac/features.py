"""Feature-as-a-counter vocabulary: which flow properties are counted per window."""
import os
from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, model_validator

from common.settings import load_package_config, read_json, validate
from flows.record import Protocol

CONFIG = load_package_config(os.path.dirname(__file__))

NUMERIC_FIELDS = {"fwd_packets", "fwd_bytes", "rev_packets", "rev_bytes"}


class FlowField(str, Enum):
    SRC_PORT = "src_port"
    DST_PORT = "dst_port"
    PROTOCOL = "protocol"
    FWD_PACKETS = "fwd_packets"
    FWD_BYTES = "fwd_bytes"
    REV_PACKETS = "rev_packets"
    REV_BYTES = "rev_bytes"
    FLOW_COUNT = "flow_count"


class Weight(str, Enum):
    COUNT_FLOWS = "count_flows"
    SUM_FIELD = "sum_field"


class FeatureSpec(BaseModel):
    """
    One counter feature. Exactly one matcher is set:
    exact (single value), values (value set), range ([low, high] inclusive)
    or other (catch-all: flows matched by no other spec with the same field and weight).

    A spec with emit=False produces no column but still claims its values
    from the catch-all; feature ablation leaves dropped matchers in that state.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = Field(min_length=1)
    field: FlowField
    exact: int | str | None = None
    values: tuple[int | str, ...] | None = None
    range: tuple[int, int] | None = None
    other: bool = False
    weight: Weight = Weight.COUNT_FLOWS
    emit: bool = True

    @model_validator(mode="after")
    def _check_matcher(self):
        chosen = [self.exact is not None, self.values is not None, self.range is not None, self.other]
        if sum(chosen) != 1:
            raise ValueError(f"feature {self.name}: exactly one of exact/values/range/other is required")
        if self.range is not None and self.range[0] > self.range[1]:
            raise ValueError(f"feature {self.name}: empty range {self.range}")
        if self.field is FlowField.PROTOCOL:
            if self.range is not None:
                raise ValueError(f"feature {self.name}: protocol cannot be matched by range")
            tokens = [self.exact] if self.exact is not None else list(self.values or [])
            for token in tokens:
                Protocol(str(token).upper())
        if self.weight is Weight.SUM_FIELD and self.field.value not in NUMERIC_FIELDS:
            raise ValueError(f"feature {self.name}: sum_field needs a packet/byte counter field")
        if self.other and not self.emit:
            raise ValueError(f"feature {self.name}: a catch-all claims nothing and must emit")
        return self


class FeatureConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    specs: tuple[FeatureSpec, ...]
    window_length: int = Field(default=CONFIG["features"]["window_length"], gt=0)

    @model_validator(mode="after")
    def _check_specs(self):
        names = [spec.name for spec in self.specs]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"duplicate feature names: {duplicates}")
        catch_alls = [spec.field for spec in self.specs if spec.other]
        if len(catch_alls) != len(set(catch_alls)):
            raise ValueError("at most one catch-all feature per field")
        return self

    @property
    def feature_names(self):
        return tuple(spec.name for spec in self.emitting)

    @property
    def emitting(self):
        return tuple(spec for spec in self.specs if spec.emit)

    def without(self, names):
        """Drop features from the output; dropped matchers keep their values out of the catch-all."""
        names = set(names)
        specs = []
        for spec in self.specs:
            if spec.name not in names:
                specs.append(spec)
            elif not spec.other:
                specs.append(spec.model_copy(update={"emit": False}))
        return self.model_copy(update={"specs": tuple(specs)})


def default_feature_config(window_length=None):
    payload = dict(CONFIG["features"])
    if window_length is not None:
        payload["window_length"] = window_length
    return validate(FeatureConfig, payload, "default feature dictionary")


def load_feature_config(path):
    return validate(FeatureConfig, read_json(path), f"feature config {path}")
