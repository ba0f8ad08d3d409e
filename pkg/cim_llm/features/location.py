import logging
from typing import Dict, Optional

import numpy as np

from cim_llm.errors import EmptyRegionError, NoAtlasError
from cim_llm.features.groups import EloquentProximity, LocationFeatures, RegionOverlap
from cim_llm.features.params import AtlasConfig, AtlasSpec, ExtractionParams, load_atlas_config
from cim_llm.volume_io import SubjectBundle, VoxelGrid
from cim_llm.voxel_analytics import boundary, edt

logger = logging.getLogger(__name__)

MAX_PROXIMITIES = 5


def region_overlaps(mask: np.ndarray, labels: np.ndarray, spec: AtlasSpec) -> Dict[str, RegionOverlap]:
    """tumor-in-region |M∩R|/|M| and regional occupancy |M∩R|/|R| for every touched region."""
    total = int(np.count_nonzero(mask))
    inside = np.bincount(labels[mask], minlength=1)
    region_sizes = np.bincount(labels.ravel(), minlength=inside.size)
    overlaps = {}
    for region_id in np.flatnonzero(inside):
        if region_id == 0 or int(region_id) not in spec.regions:
            continue
        overlaps[spec.region_name(int(region_id))] = RegionOverlap(
            tumor_in_region=inside[region_id] / total,
            regional_occupancy=inside[region_id] / region_sizes[region_id],
        )
    return overlaps


def _hemisphere_counts(mask: np.ndarray, grid: VoxelGrid):
    idx = np.argwhere(mask)
    if idx.size == 0:
        return 0, 0
    x = grid.world_coordinates(idx)[:, 0]
    return int(np.count_nonzero(x < 0)), int(np.count_nonzero(x > 0))


def extract_location(
    bundle: SubjectBundle,
    params: ExtractionParams = ExtractionParams(),
    atlas_config: Optional[AtlasConfig] = None,
    tc_boundary_distance: Optional[np.ndarray] = None,
) -> LocationFeatures:
    if not bundle.atlases:
        raise NoAtlasError(f"{bundle.subject_id}: no atlas grids available")
    atlas_config = atlas_config or load_atlas_config()
    seg = bundle.segmentation
    tc, ed = seg.tc, seg.ed
    if not tc.any():
        raise EmptyRegionError(f"{bundle.subject_id}: tumor core is empty")
    if tc_boundary_distance is None:
        tc_boundary_distance = edt(boundary(tc, 6), bundle.grid.spacing)

    tumor_regions, edema_regions = {}, {}
    proximities = []
    deep_gray_voxels = None
    frontal_left = frontal_right = None
    for atlas_name in sorted(bundle.atlases):
        spec = atlas_config.atlases.get(atlas_name)
        if spec is None:
            logger.warning(f"{bundle.subject_id}: atlas '{atlas_name}' has no entry in the atlas config, skipped")
            continue
        labels = np.asarray(bundle.atlases[atlas_name].data, dtype=np.int64)
        tumor_regions[atlas_name] = region_overlaps(tc, labels, spec)
        if ed.any():
            edema_regions[atlas_name] = region_overlaps(ed, labels, spec)

        for region_id in spec.eloquent:
            region = labels == region_id
            if not region.any():
                continue
            distance = float(tc_boundary_distance[region].min())
            proximities.append((distance, f"{atlas_name}:{spec.region_name(region_id)}"))

        if spec.deep_gray:
            deep_gray_voxels = (deep_gray_voxels or 0) + int(np.count_nonzero(tc & np.isin(labels, spec.deep_gray)))

        if spec.frontal_left or spec.frontal_right or spec.frontal:
            left = int(np.count_nonzero(tc & np.isin(labels, spec.frontal_left)))
            right = int(np.count_nonzero(tc & np.isin(labels, spec.frontal_right)))
            if spec.frontal:
                split_left, split_right = _hemisphere_counts(tc & np.isin(labels, spec.frontal), bundle.grid)
                left += split_left
                right += split_right
            frontal_left = (frontal_left or 0) + left
            frontal_right = (frontal_right or 0) + right

    if not tumor_regions:
        raise NoAtlasError(f"{bundle.subject_id}: none of the atlases is described by the atlas config")

    proximities.sort()
    minimum = params.involvement_min_voxels
    return LocationFeatures(
        tumor_regions=tumor_regions,
        eloquent_proximity=[
            EloquentProximity(region=name, distance_mm=distance)
            for distance, name in proximities[:MAX_PROXIMITIES]
        ],
        deep_gray_involved=None if deep_gray_voxels is None else deep_gray_voxels >= minimum,
        bilateral_frontal=(
            None if frontal_left is None else (frontal_left >= minimum and frontal_right >= minimum)
        ),
        edema_regions=edema_regions if ed.any() else None,
    )
