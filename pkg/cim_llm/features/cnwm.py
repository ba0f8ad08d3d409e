"""Contralateral normal-appearing white matter (CNWM) reference intensities."""

import logging
import math
from typing import Dict, Optional

import numpy as np

from cim_llm.features.groups import CnwmSource
from cim_llm.features.params import ExtractionParams
from cim_llm.volume_io import SubjectBundle, VoxelGrid
from cim_llm.voxel_analytics import bounding_box, edt

logger = logging.getLogger(__name__)


def mirror_mask(mask: np.ndarray, grid: VoxelGrid) -> np.ndarray:
    """Reflect ``mask`` across the world plane x = 0; voxels leaving the grid are dropped."""
    idx = np.argwhere(mask)
    out = np.zeros(mask.shape, dtype=bool)
    if idx.size == 0:
        return out
    world = grid.world_coordinates(idx)
    world[:, 0] *= -1.0
    mirrored = np.rint(np.linalg.solve(grid.affine[:3, :3], (world - grid.affine[:3, 3]).T).T).astype(int)
    inside = np.all((mirrored >= 0) & (mirrored < np.array(mask.shape)), axis=1)
    out[tuple(mirrored[inside].T)] = True
    return out


def hemisphere_mask(grid: VoxelGrid, left: bool) -> np.ndarray:
    """Voxels with world x < 0 (left) or x > 0 (right), assuming an axis-aligned affine."""
    i, j, k = (np.arange(n, dtype=np.float64) for n in grid.dims)
    a = grid.affine
    x = a[0, 0] * i[:, None, None] + a[0, 1] * j[None, :, None] + a[0, 2] * k[None, None, :] + a[0, 3]
    return x < 0 if left else x > 0


def mirror_fallback_region(bundle: SubjectBundle, params: ExtractionParams) -> np.ndarray:
    grid = bundle.grid
    wt = bundle.segmentation.wt
    if not wt.any():
        return np.zeros(grid.dims, dtype=bool)

    centroid_x = grid.world_coordinates(np.argwhere(wt))[:, 0].mean()
    contralateral = hemisphere_mask(grid, left=centroid_x > 0)

    excluded = wt | mirror_mask(wt, grid)
    if params.cnwm_exclusion_mm > 0:
        margin = int(math.ceil(params.cnwm_exclusion_mm / min(grid.spacing))) + 1
        box = bounding_box(excluded, margin=margin)
        near = np.zeros(grid.dims, dtype=bool)
        near[box] = edt(excluded[box], grid.spacing) <= params.cnwm_exclusion_mm
        excluded = near
    return contralateral & ~excluded


class CnwmReference:
    """Resolves the CNWM region once per subject and caches per-sequence medians."""

    def __init__(self, bundle: SubjectBundle, params: ExtractionParams):
        self.bundle = bundle
        if bundle.cnwm_mask is not None and bundle.cnwm_mask.any():
            self.region = np.asarray(bundle.cnwm_mask, dtype=bool)
            self.source = CnwmSource.PROVIDED_MASK
        else:
            self.region = mirror_fallback_region(bundle, params)
            self.source = CnwmSource.MIRROR_FALLBACK
            logger.info(f"{bundle.subject_id}: CNWM mask absent, using the mirrored contralateral region")
        self._medians: Dict[str, Optional[float]] = {}

    def median(self, sequence: str) -> Optional[float]:
        if sequence not in self._medians:
            self._medians[sequence] = self._compute(sequence)
        return self._medians[sequence]

    def _compute(self, sequence: str) -> Optional[float]:
        grid = self.bundle.sequence(sequence)
        if grid is None:
            return None
        values = np.asarray(grid.data)[self.region]
        if self.source is CnwmSource.MIRROR_FALLBACK:
            # brain voxels only, then the inter-quartile band as normal-appearing tissue
            values = values[values > 0]
            if values.size:
                lo, hi = np.percentile(values, [25, 75])
                values = values[(values >= lo) & (values <= hi)]
        if values.size == 0:
            logger.warning(f"{self.bundle.subject_id}: empty CNWM region for {sequence}")
            return None
        median = float(np.median(values))
        if median <= 0:
            logger.warning(f"{self.bundle.subject_id}: non-positive CNWM median for {sequence}")
            return None
        return median
