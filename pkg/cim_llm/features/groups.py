"""Typed feature groups, one per family; ranges are enforced on construction."""

from enum import Enum
from typing import Annotated, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

Fraction = Annotated[float, Field(ge=0.0, le=1.0)]
NonNegative = Annotated[float, Field(ge=0.0)]
Count = Annotated[int, Field(ge=0)]

GROUP_NAMES = (
    "location",
    "t2_flair_mismatch",
    "mass_effect",
    "tumor_morphology",
    "volumetric_measures",
)


class CnwmSource(str, Enum):
    PROVIDED_MASK = "provided_mask"
    MIRROR_FALLBACK = "mirror_fallback"


class FeatureGroup(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)


class RegionOverlap(FeatureGroup):
    tumor_in_region: Fraction
    regional_occupancy: Fraction


class EloquentProximity(FeatureGroup):
    region: str
    distance_mm: NonNegative


class LocationFeatures(FeatureGroup):
    tumor_regions: Dict[str, Dict[str, RegionOverlap]]
    eloquent_proximity: List[EloquentProximity] = Field(default_factory=list, max_length=5)
    deep_gray_involved: Optional[bool] = None
    bilateral_frontal: Optional[bool] = None
    edema_regions: Optional[Dict[str, Dict[str, RegionOverlap]]] = None


class MismatchFeatures(FeatureGroup):
    flair_suppression: Optional[bool] = None
    flair_rim_hyperintensity: Optional[bool] = None
    t2_flair_mismatch_ratio: Optional[NonNegative] = None
    cnwm_source: Optional[CnwmSource] = None


class MassEffectFeatures(FeatureGroup):
    tc_crosses_midline: Optional[bool] = None
    ed_crosses_midline: Optional[bool] = None
    # positive when the right ventricle is larger
    ventricular_asymmetry_index: Optional[Annotated[float, Field(ge=-1.0, le=1.0)]] = None


class MorphologyFeatures(FeatureGroup):
    tc_hollowness: Optional[Fraction] = None
    rim_core_adjacency: Optional[Fraction] = None
    enhancing_rim_thickness_mm: Optional[NonNegative] = None
    et_component_count: Optional[Count] = None
    net_component_count: Optional[Count] = None
    non_rim_enhancement_fraction: Optional[Fraction] = None
    sphericity_wt: Optional[Annotated[float, Field(gt=0.0, le=1.2)]] = None
    sphericity_tc: Optional[Annotated[float, Field(gt=0.0, le=1.2)]] = None
    boundary_sharpness_wt: Optional[NonNegative] = None
    boundary_sharpness_tc: Optional[NonNegative] = None
    transition_zone_thickness_mm: Optional[NonNegative] = None


class VolumetricFeatures(FeatureGroup):
    vol_wt_ml: NonNegative
    vol_net_ml: NonNegative
    vol_et_ml: NonNegative
    vol_ed_ml: NonNegative
    frac_net_of_wt: Fraction
    frac_et_of_wt: Fraction
    frac_et_of_tc: Optional[Fraction] = None
    edema_to_net_ratio: Optional[NonNegative] = None
    edema_to_tc_ratio: Optional[NonNegative] = None
    edema_extent_median_mm: Optional[NonNegative] = None
    edema_extent_p95_mm: Optional[NonNegative] = None


GROUP_MODELS = {
    "location": LocationFeatures,
    "t2_flair_mismatch": MismatchFeatures,
    "mass_effect": MassEffectFeatures,
    "tumor_morphology": MorphologyFeatures,
    "volumetric_measures": VolumetricFeatures,
}
