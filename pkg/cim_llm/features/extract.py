import logging
from typing import Any, Callable, Dict, Optional, Tuple

from cim_llm.errors import AnalyticsError, FeatureError
from cim_llm.features.cnwm import CnwmReference
from cim_llm.features.groups import FeatureGroup
from cim_llm.features.location import extract_location
from cim_llm.features.mass_effect import extract_mass_effect
from cim_llm.features.mismatch import extract_mismatch
from cim_llm.features.morphology import extract_morphology
from cim_llm.features.params import AtlasConfig, ExtractionParams, load_atlas_config
from cim_llm.features.volumetrics import extract_volumetrics
from cim_llm.volume_io import SubjectBundle
from cim_llm.voxel_analytics import boundary, edt

logger = logging.getLogger(__name__)


def _guarded(subject_id: str, group: str, fn: Callable[[], FeatureGroup]) -> Optional[FeatureGroup]:
    try:
        return fn()
    except (FeatureError, AnalyticsError) as e:
        logger.warning(f"{subject_id}: {group} group reported as NULL ({e})")
        return None
    except Exception as e:
        logger.error(f"{subject_id}: {group} group failed, reported as NULL ({type(e).__name__}: {e})", exc_info=True)
        return None


def extract_all(
    bundle: SubjectBundle,
    params: ExtractionParams = ExtractionParams(),
    atlas_config: Optional[AtlasConfig] = None,
) -> Tuple[Dict[str, Optional[FeatureGroup]], Dict[str, Any]]:
    """Run the five feature families; returns the groups and the provenance block."""
    atlas_config = atlas_config or load_atlas_config()
    seg = bundle.segmentation
    tc = seg.tc
    # shared by location and volumetrics
    tc_distance = edt(boundary(tc, 6), bundle.grid.spacing) if tc.any() else None
    cnwm = CnwmReference(bundle, params)
    sid = bundle.subject_id

    groups = {
        "location": _guarded(sid, "location", lambda: extract_location(bundle, params, atlas_config, tc_distance)),
        "t2_flair_mismatch": _guarded(sid, "t2_flair_mismatch", lambda: extract_mismatch(bundle, params, cnwm)),
        "mass_effect": _guarded(sid, "mass_effect", lambda: extract_mass_effect(bundle, params)),
        "tumor_morphology": _guarded(sid, "tumor_morphology", lambda: extract_morphology(bundle, params, cnwm)),
        "volumetric_measures": _guarded(sid, "volumetric_measures", lambda: extract_volumetrics(bundle, tc_distance)),
    }
    provenance = {
        "extraction": params.model_dump(),
        "thresholds": params.thresholds(),
        "min_voxels": params.min_voxels,
        "cnwm_source": cnwm.source.value,
        "atlas_config_version": atlas_config.version,
        "atlases": sorted(bundle.atlases),
    }
    return groups, provenance
