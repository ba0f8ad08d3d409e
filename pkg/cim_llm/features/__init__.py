from cim_llm.features.extract import extract_all
from cim_llm.features.groups import (
    GROUP_MODELS,
    GROUP_NAMES,
    CnwmSource,
    LocationFeatures,
    MassEffectFeatures,
    MismatchFeatures,
    MorphologyFeatures,
    VolumetricFeatures,
)
from cim_llm.features.location import extract_location
from cim_llm.features.mass_effect import extract_mass_effect
from cim_llm.features.mismatch import extract_mismatch
from cim_llm.features.morphology import extract_morphology
from cim_llm.features.params import AtlasConfig, ExtractionParams, load_atlas_config
from cim_llm.features.volumetrics import extract_volumetrics

__all__ = [
    "GROUP_MODELS",
    "GROUP_NAMES",
    "AtlasConfig",
    "CnwmSource",
    "ExtractionParams",
    "LocationFeatures",
    "MassEffectFeatures",
    "MismatchFeatures",
    "MorphologyFeatures",
    "VolumetricFeatures",
    "extract_all",
    "extract_location",
    "extract_mass_effect",
    "extract_mismatch",
    "extract_morphology",
    "extract_volumetrics",
    "load_atlas_config",
]
