import numpy as np

from cim_llm.features.groups import MassEffectFeatures
from cim_llm.features.params import ExtractionParams
from cim_llm.volume_io import SubjectBundle, VoxelGrid


def crosses_midline(mask: np.ndarray, grid: VoxelGrid, params: ExtractionParams) -> bool:
    """True when enough voxels lie beyond the dead-band on both sides of world x = 0."""
    idx = np.argwhere(mask)
    if idx.size == 0:
        return False
    x = grid.world_coordinates(idx)[:, 0]
    left = np.count_nonzero(x < -params.midline_deadband_mm)
    right = np.count_nonzero(x > params.midline_deadband_mm)
    return bool(left >= params.midline_min_voxels and right >= params.midline_min_voxels)


def asymmetry_index(left_volume: float, right_volume: float):
    total = left_volume + right_volume
    if total <= 0:
        return None
    return (right_volume - left_volume) / total


def extract_mass_effect(bundle: SubjectBundle, params: ExtractionParams = ExtractionParams()) -> MassEffectFeatures:
    seg = bundle.segmentation
    index = None
    if bundle.ventricle_masks is not None:
        left, right = bundle.ventricle_masks
        voxel = bundle.grid.voxel_volume_mm3
        index = asymmetry_index(np.count_nonzero(left) * voxel, np.count_nonzero(right) * voxel)
    return MassEffectFeatures(
        tc_crosses_midline=crosses_midline(seg.tc, bundle.grid, params),
        ed_crosses_midline=crosses_midline(seg.ed, bundle.grid, params),
        ventricular_asymmetry_index=index,
    )
