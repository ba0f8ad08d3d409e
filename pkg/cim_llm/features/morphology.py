import logging
import math
from typing import Optional

import numpy as np
from scipy import ndimage

from cim_llm.features.cnwm import CnwmReference
from cim_llm.features.groups import MorphologyFeatures
from cim_llm.features.params import ExtractionParams
from cim_llm.volume_io import SubjectBundle
from cim_llm.voxel_analytics import (
    bounding_box,
    boundary,
    count_components,
    edt,
    face_neighbours,
    gradient_magnitude,
    label_components,
    nearest_offsets,
    partial_derivatives,
    sphericity,
)

logger = logging.getLogger(__name__)

RAY_CROSSINGS = (0.25, 0.75)


def tc_hollowness(tc: np.ndarray, et: np.ndarray) -> Optional[float]:
    """Share of TC made of non-enhancing voxels the grid border cannot reach through non-ET space."""
    n_tc = np.count_nonzero(tc)
    if n_tc == 0:
        return None
    # one voxel of padding outside the TC box keeps every outside path open
    box = bounding_box(tc, margin=1)
    open_space = ~et[box]
    labels, _ = label_components(open_space, connectivity=6)
    faces = np.concatenate([
        labels[0].ravel(), labels[-1].ravel(),
        labels[:, 0].ravel(), labels[:, -1].ravel(),
        labels[:, :, 0].ravel(), labels[:, :, -1].ravel(),
    ])
    reachable = np.isin(labels, np.unique(faces[faces > 0]))
    enclosed = tc[box] & open_space & ~reachable
    return np.count_nonzero(enclosed) / n_tc


def rim_core_adjacency(net: np.ndarray, et: np.ndarray) -> Optional[float]:
    core_boundary = boundary(net, 6)
    n_boundary = np.count_nonzero(core_boundary)
    if n_boundary == 0:
        return None
    return np.count_nonzero(core_boundary & face_neighbours(et)) / n_boundary


def enhancing_rim_thickness(et: np.ndarray, spacing) -> Optional[float]:
    """Twice the median distance from ET voxels to the ET surface, in mm.

    Distances run voxel-centre to the nearest non-ET voxel centre. Half a voxel
    is taken off along that same direction, so a one-voxel plate measures one
    voxel of its own thickness whatever the spacing.
    """
    if not et.any():
        return None
    sub = np.pad(et[bounding_box(et)], 1)
    offsets = nearest_offsets(~sub, spacing)[:, sub].astype(np.float64)
    steps = np.asarray(spacing, dtype=np.float64).reshape(3, 1)
    d_vox = np.sqrt(np.sum(offsets * offsets, axis=0))
    d_mm = np.sqrt(np.sum((offsets * steps) ** 2, axis=0))
    depth = d_mm * (1.0 - 0.5 / d_vox)
    return 2.0 * float(np.median(depth))


def non_rim_enhancement_fraction(et: np.ndarray, net: np.ndarray) -> Optional[float]:
    n_et = np.count_nonzero(et)
    if n_et == 0:
        return None
    return np.count_nonzero(et & ~face_neighbours(net)) / n_et


def boundary_sharpness(bundle: SubjectBundle, mask: np.ndarray, sequence: str, cnwm: CnwmReference) -> Optional[float]:
    grid = bundle.sequence(sequence)
    if grid is None or not mask.any():
        return None
    reference = cnwm.median(sequence)
    if reference is None:
        return None
    box = bounding_box(mask, margin=1)
    gradient = np.asarray(gradient_magnitude(grid.crop(box)).data)
    return float(np.median(gradient[boundary(mask[box], 6)])) / reference


def _first_crossing(profile: np.ndarray, level: float, step: float):
    above = profile >= level
    hit = above.any(axis=1)
    k = np.argmax(above, axis=1)
    prev = np.clip(k - 1, 0, None)
    rows = np.arange(profile.shape[0])
    lo, hi = profile[rows, prev], profile[rows, k]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(hi > lo, (level - lo) / (hi - lo), 0.0)
    t = np.where(k == 0, 0.0, (prev + frac) * step)
    return np.where(hit, t, np.nan)


def transition_zone_thickness(bundle: SubjectBundle, params: ExtractionParams) -> Optional[float]:
    """Median ray length over which FLAIR moves from the TC level to the ED level.

    Rays start at a seeded sample of TC boundary voxels and follow the
    gradient of the distance-to-TC field; each profile is rescaled so the TC
    median maps to 0 and the ED median to 1, and the 25%-75% span is kept.
    """
    if bundle.flair is None:
        return None
    seg = bundle.segmentation
    tc, ed = seg.tc, seg.ed
    if not tc.any() or not ed.any():
        return None
    flair = np.asarray(bundle.flair.data)
    m_tc, m_ed = float(np.median(flair[tc])), float(np.median(flair[ed]))
    if abs(m_ed - m_tc) < 1e-9:
        return None

    spacing = np.asarray(bundle.grid.spacing)
    margin = int(math.ceil(params.ray_length_mm / spacing.min())) + 1
    box = bounding_box(tc, margin=margin)
    tc_sub = tc[box]
    flair_sub = flair[box]
    distance = edt(tc_sub, spacing)
    grads = partial_derivatives(distance, spacing)

    starts = np.argwhere(boundary(tc_sub, 6))
    rng = np.random.default_rng(params.seed)
    if len(starts) > params.max_rays:
        starts = starts[np.sort(rng.choice(len(starts), params.max_rays, replace=False))]
    directions = np.stack([g[tuple(starts.T)] for g in grads], axis=1)
    norms = np.linalg.norm(directions, axis=1)
    usable = norms > 1e-9
    if not usable.any():
        return None
    starts, directions = starts[usable], directions[usable] / norms[usable, None]

    ts = np.arange(0.0, params.ray_length_mm + 1e-9, params.ray_step_mm)
    # index-space position = start + t * direction / spacing
    points = starts[:, :, None] + (directions / spacing)[:, :, None] * ts[None, None, :]
    samples = ndimage.map_coordinates(
        flair_sub, points.transpose(1, 0, 2).reshape(3, -1), order=1, mode="nearest"
    ).reshape(len(starts), len(ts))
    profile = (samples - m_tc) / (m_ed - m_tc)

    low, high = (_first_crossing(profile, level, params.ray_step_mm) for level in RAY_CROSSINGS)
    lengths = np.abs(high - low)
    lengths = lengths[np.isfinite(lengths)]
    if lengths.size == 0:
        return None
    return float(np.median(lengths))


def extract_morphology(
    bundle: SubjectBundle,
    params: ExtractionParams = ExtractionParams(),
    cnwm: Optional[CnwmReference] = None,
) -> MorphologyFeatures:
    seg = bundle.segmentation
    spacing = bundle.grid.spacing
    et, net, tc, wt = seg.et, seg.net, seg.tc, seg.wt
    cnwm = cnwm or CnwmReference(bundle, params)
    return MorphologyFeatures(
        tc_hollowness=tc_hollowness(tc, et),
        rim_core_adjacency=rim_core_adjacency(net, et),
        enhancing_rim_thickness_mm=enhancing_rim_thickness(et, spacing),
        et_component_count=count_components(et, 26, params.min_voxels),
        net_component_count=count_components(net, 26, params.min_voxels),
        non_rim_enhancement_fraction=non_rim_enhancement_fraction(et, net),
        sphericity_wt=sphericity(wt, spacing) if wt.any() else None,
        sphericity_tc=sphericity(tc, spacing) if tc.any() else None,
        boundary_sharpness_wt=boundary_sharpness(bundle, wt, "flair", cnwm),
        boundary_sharpness_tc=boundary_sharpness(bundle, tc, "t1ce", cnwm),
        transition_zone_thickness_mm=transition_zone_thickness(bundle, params),
    )
