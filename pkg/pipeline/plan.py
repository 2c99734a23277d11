"""Experiment plans: dataset variants, detectors and the analyses run on them."""
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from common.settings import read_json, validate
from detectors.registry import Detector
from flows.exclusion import FlowPredicate
from flows.merge import MergePolicy
from flows.record import AttackType, stamp_to_epoch

IDENTIFIER = r"^[A-Za-z0-9][A-Za-z0-9_.-]*$"

MSNM_PARAMS = {"n_components", "variance_fraction", "limit_percentile"}
OCSVM_PARAMS = {"nu", "gamma", "tol", "max_iter", "max_rows"}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _check_range(value):
    if value is not None:
        start, end = (stamp_to_epoch(s) for s in value)
        if start >= end:
            raise ValueError(f"range {value} is empty")
    return value


class UnionSpec(_Strict):
    """Unidirectional and bidirectional featurizations side by side."""
    merge: MergePolicy = MergePolicy()
    prefixes: tuple[str, str] = ("uni_", "bid_")


class VariantSpec(_Strict):
    """
    One dataset variant. Exactly one of scenario and flows names the source;
    calibration and test default to the scenario's ranges.
    """
    id: str = Field(pattern=IDENTIFIER)
    scenario: str | None = None
    seed: int | None = Field(default=None, ge=0)
    flows: str | None = None
    merge: MergePolicy | None = None
    union: UnionSpec | None = None
    calibration: tuple[str, str] | None = None
    test: tuple[str, str] | None = None
    feature_config: str | None = None
    window_length: int | None = Field(default=None, gt=0)
    flow_exclusions: tuple[FlowPredicate, ...] = ()
    observation_exclusions: tuple[FlowPredicate, ...] = ()
    drop_features: tuple[str, ...] = ()

    @field_validator("calibration", "test")
    @classmethod
    def _ranges(cls, value):
        return _check_range(value)

    @model_validator(mode="after")
    def _check_source(self):
        if (self.scenario is None) == (self.flows is None):
            raise ValueError(f"variant {self.id}: give exactly one of scenario or flows")
        if self.flows is not None and (self.calibration is None or self.test is None):
            raise ValueError(f"variant {self.id}: a flow file needs explicit calibration and test ranges")
        if self.merge is not None and self.union is not None:
            raise ValueError(f"variant {self.id}: merge and union are exclusive")
        return self


class DetectorSpec(_Strict):
    name: Detector
    params: dict[str, float | int | None] = {}

    @field_validator("name", mode="before")
    @classmethod
    def _upper(cls, value):
        return value.upper() if isinstance(value, str) else value

    @model_validator(mode="after")
    def _check_params(self):
        allowed = MSNM_PARAMS if self.name is Detector.MSNM else OCSVM_PARAMS
        unknown = sorted(set(self.params) - allowed)
        if unknown:
            raise ValueError(f"{self.name.value} does not take {unknown}")
        return self


class DiagnosisSpec(_Strict):
    """U-Squared of a variant's test windows holding an attack, against a reference variant's calibration."""
    name: str = Field(pattern=IDENTIFIER)
    variant: str
    attack_type: AttackType
    reference: str | None = None
    top_k: int = Field(default=5, ge=1)

    @field_validator("attack_type", mode="before")
    @classmethod
    def _upper(cls, value):
        return value.upper() if isinstance(value, str) else value


class AuditSpec(_Strict):
    name: str = Field(pattern=IDENTIFIER)
    variant: str
    detector: Detector
    percentile: float | None = Field(default=None, gt=0, lt=100)
    threshold: float | None = None
    max_gap: int = Field(default=1, ge=1)
    top_k: int = Field(default=5, ge=1)
    export_flows: bool = False

    @field_validator("detector", mode="before")
    @classmethod
    def _upper(cls, value):
        return value.upper() if isinstance(value, str) else value


class ComparisonSpec(_Strict):
    """Boxplots and a one-sided Welch test of features: attack windows against background."""
    name: str = Field(pattern=IDENTIFIER)
    variant: str
    features: tuple[str, ...] = Field(min_length=1)
    attack_type: AttackType | None = None

    @field_validator("attack_type", mode="before")
    @classmethod
    def _upper(cls, value):
        return value.upper() if isinstance(value, str) else value


class TimeseriesSpec(_Strict):
    name: str = Field(pattern=IDENTIFIER)
    variant: str
    features: tuple[str, ...] = Field(min_length=1)
    range: tuple[str, str] | None = None

    @field_validator("range")
    @classmethod
    def _range(cls, value):
        return _check_range(value)


class ExperimentPlan(_Strict):
    name: str = "plan"
    seed: int | None = Field(default=None, ge=0)
    variants: tuple[VariantSpec, ...] = Field(min_length=1)
    detectors: tuple[DetectorSpec, ...] = Field(min_length=1)
    diagnoses: tuple[DiagnosisSpec, ...] = ()
    audits: tuple[AuditSpec, ...] = ()
    comparisons: tuple[ComparisonSpec, ...] = ()
    timeseries: tuple[TimeseriesSpec, ...] = ()
    workers: int | None = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_references(self):
        ids = [variant.id for variant in self.variants]
        if len(set(ids)) != len(ids):
            raise ValueError(f"variant ids must be unique: {ids}")
        names = [detector.name for detector in self.detectors]
        if len(set(names)) != len(names):
            raise ValueError("each detector may appear once")
        for item in self.diagnoses + self.comparisons + self.timeseries + self.audits:
            if item.variant not in ids:
                raise ValueError(f"{item.name} refers to unknown variant {item.variant}")
        for diagnosis in self.diagnoses:
            if diagnosis.reference is not None and diagnosis.reference not in ids:
                raise ValueError(f"{diagnosis.name} refers to unknown reference {diagnosis.reference}")
        for audit in self.audits:
            if audit.detector not in names:
                raise ValueError(f"{audit.name} audits {audit.detector.value}, which the plan does not fit")
        outputs = [item.name for item in self.diagnoses + self.audits + self.comparisons + self.timeseries]
        if len(set(outputs)) != len(outputs):
            raise ValueError("analysis names must be unique")
        return self

    def variant(self, variant_id):
        return next(variant for variant in self.variants if variant.id == variant_id)


def load_plan(path):
    return validate(ExperimentPlan, read_json(path), f"plan {path}")
