"""The per-subject feature document: construction, JSON (de)serialization and ablation.

Every float is rounded to six significant digits when a document is built,
so ``parse(serialize(doc)) == doc`` holds exactly.
"""

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from cim_llm.errors import DocumentValidationError, NonFiniteValueError, UnknownGroupError
from cim_llm.features.groups import (
    GROUP_NAMES,
    FeatureGroup,
    LocationFeatures,
    MassEffectFeatures,
    MismatchFeatures,
    MorphologyFeatures,
    VolumetricFeatures,
)
from cim_llm.volume_io import Sex

SCHEMA_VERSION = "cim-llm/1"
SIGNIFICANT_DIGITS = 6
SCHEMA_FILE = Path(__file__).parent / "schemas" / "cim-llm-1.schema.json"


def published_schema() -> Dict[str, Any]:
    return json.loads(SCHEMA_FILE.read_text(encoding="utf-8"))


def round_sig(value: float, digits: int = SIGNIFICANT_DIGITS) -> float:
    if not math.isfinite(value):
        raise NonFiniteValueError(f"non-finite value {value!r} in feature document")
    return float(f"{value:.{digits}g}")


def _round_tree(value: Any) -> Any:
    if isinstance(value, BaseModel):
        value = value.model_dump()
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, float):
        return round_sig(value)
    if isinstance(value, dict):
        return {k: _round_tree(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round_tree(v) for v in value]
    return value


class Clinical(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)

    age_years: Optional[float] = Field(None, ge=0.0)
    sex: Optional[Sex] = None


class Ablation(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    dropped_groups: List[str] = Field(default_factory=list)
    clinical_included: bool = True
    # "remove": dropped keys vanish from the JSON; "null": they stay as null
    mode: Literal["remove", "null"] = "remove"


class Provenance(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)

    extraction: Dict[str, Any] = Field(default_factory=dict)
    thresholds: Dict[str, float] = Field(default_factory=dict)
    min_voxels: Optional[int] = None
    cnwm_source: Optional[str] = None
    atlas_config_version: Optional[str] = None
    atlases: List[str] = Field(default_factory=list)
    ablation: Ablation = Field(default_factory=Ablation)


class SubjectFeatureDocument(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)

    schema_version: Literal["cim-llm/1"] = SCHEMA_VERSION
    subject_id: str
    clinical: Optional[Clinical] = None
    location: Optional[LocationFeatures] = None
    t2_flair_mismatch: Optional[MismatchFeatures] = None
    mass_effect: Optional[MassEffectFeatures] = None
    tumor_morphology: Optional[MorphologyFeatures] = None
    volumetric_measures: Optional[VolumetricFeatures] = None
    provenance: Provenance = Field(default_factory=Provenance)

    @model_validator(mode="before")
    @classmethod
    def _round_numbers(cls, data: Any) -> Any:
        if isinstance(data, dict):
            return {key: _round_tree(value) for key, value in data.items()}
        return data

    @model_validator(mode="after")
    def _ablation_consistent(self) -> "SubjectFeatureDocument":
        ablation = self.provenance.ablation
        unknown = set(ablation.dropped_groups) - set(GROUP_NAMES)
        if unknown:
            raise ValueError(f"unknown dropped groups {sorted(unknown)}")
        for group in ablation.dropped_groups:
            if getattr(self, group) is not None:
                raise ValueError(f"group '{group}' is marked dropped but carries data")
        if not ablation.clinical_included and self.clinical is not None:
            raise ValueError("clinical block present although the ablation excludes it")
        return self

    def group(self, name: str) -> Optional[FeatureGroup]:
        if name not in GROUP_NAMES:
            raise UnknownGroupError(f"unknown feature group '{name}'")
        return getattr(self, name)

    def null_groups(self) -> List[str]:
        dropped = set(self.provenance.ablation.dropped_groups)
        return [g for g in GROUP_NAMES if g not in dropped and getattr(self, g) is None]


def build_document(
    subject_id: str,
    groups: Dict[str, Optional[FeatureGroup]],
    provenance: Dict[str, Any],
    age_years: Optional[float] = None,
    sex: Optional[Sex] = None,
) -> SubjectFeatureDocument:
    unknown = set(groups) - set(GROUP_NAMES)
    if unknown:
        raise UnknownGroupError(f"unknown feature groups {sorted(unknown)}")
    try:
        return SubjectFeatureDocument(
            subject_id=subject_id,
            clinical=Clinical(age_years=age_years, sex=sex),
            provenance=provenance,
            **groups,
        )
    except ValidationError as e:
        raise DocumentValidationError(f"{subject_id}: {e}") from e


def _check_finite(value: Any, path: str = "$"):
    if isinstance(value, float) and not math.isfinite(value):
        raise NonFiniteValueError(f"non-finite value at {path}")
    if isinstance(value, dict):
        for k, v in value.items():
            _check_finite(v, f"{path}.{k}")
    elif isinstance(value, list):
        for i, v in enumerate(value):
            _check_finite(v, f"{path}[{i}]")


def to_payload(doc: SubjectFeatureDocument) -> Dict[str, Any]:
    _check_finite(doc.model_dump())
    payload = doc.model_dump(mode="json")
    ablation = doc.provenance.ablation
    if ablation.mode == "remove":
        for group in ablation.dropped_groups:
            payload.pop(group, None)
        if not ablation.clinical_included:
            payload.pop("clinical", None)
    return payload


def serialize(doc: SubjectFeatureDocument) -> str:
    """Deterministic JSON: sorted keys, two-space indent, no NaN/Inf tokens."""
    try:
        return json.dumps(to_payload(doc), sort_keys=True, indent=2, allow_nan=False, ensure_ascii=False)
    except ValueError as e:
        raise NonFiniteValueError(str(e)) from e


def parse(text: str) -> SubjectFeatureDocument:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise DocumentValidationError(f"document is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise DocumentValidationError("document must be a JSON object")
    try:
        doc = SubjectFeatureDocument.model_validate(payload)
    except (ValidationError, NonFiniteValueError) as e:
        raise DocumentValidationError(str(e)) from e
    ablation = doc.provenance.ablation
    for group in GROUP_NAMES:
        if group not in payload and not (ablation.mode == "remove" and group in ablation.dropped_groups):
            raise DocumentValidationError(f"{doc.subject_id}: group key '{group}' missing and not ablated")
    return doc


def apply_ablation(
    doc: SubjectFeatureDocument,
    drop: Iterable[str] = (),
    add_clinical: bool = False,
    nullify: bool = False,
) -> SubjectFeatureDocument:
    """Remove feature families (and optionally the clinical block) before prompting."""
    drop = set(drop)
    unknown = drop - set(GROUP_NAMES)
    if unknown:
        raise UnknownGroupError(f"unknown feature groups {sorted(unknown)}; expected a subset of {GROUP_NAMES}")
    previous = doc.provenance.ablation
    dropped = sorted(set(previous.dropped_groups) | drop)
    keep_clinical = add_clinical and doc.clinical is not None
    ablation = Ablation(
        dropped_groups=dropped,
        clinical_included=keep_clinical,
        mode="null" if nullify else "remove",
    )
    updates: Dict[str, Any] = {group: None for group in dropped}
    if not keep_clinical:
        updates["clinical"] = None
    updates["provenance"] = doc.provenance.model_copy(update={"ablation": ablation})
    return doc.model_copy(update=updates)


class AblationSpec(BaseModel):
    """One row of an ablation study: which groups to remove and whether to add the clinical block."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    label: str = "Baseline"
    drop: List[str] = Field(default_factory=list)
    with_clinical: bool = False
    nullify: bool = False

    @model_validator(mode="after")
    def _known_groups(self) -> "AblationSpec":
        unknown = set(self.drop) - set(GROUP_NAMES)
        if unknown:
            raise ValueError(f"unknown feature groups {sorted(unknown)}")
        return self

    @property
    def spec_hash(self) -> str:
        canonical = json.dumps(
            {"drop": sorted(set(self.drop)), "with_clinical": self.with_clinical, "nullify": self.nullify},
            sort_keys=True,
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def apply(self, doc: SubjectFeatureDocument) -> SubjectFeatureDocument:
        return apply_ablation(doc, self.drop, add_clinical=self.with_clinical, nullify=self.nullify)
