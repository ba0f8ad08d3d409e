import logging
import math
from typing import Optional

import numpy as np

from cim_llm.features.cnwm import CnwmReference
from cim_llm.features.groups import MismatchFeatures
from cim_llm.features.params import ExtractionParams
from cim_llm.volume_io import SubjectBundle
from cim_llm.voxel_analytics import bounding_box, edt

logger = logging.getLogger(__name__)


def outer_shell(mask: np.ndarray, spacing, thickness_mm: float) -> np.ndarray:
    """Voxels outside ``mask`` within ``thickness_mm`` of it."""
    margin = int(math.ceil(thickness_mm / min(spacing))) + 1
    box = bounding_box(mask, margin=margin)
    shell = np.zeros(mask.shape, dtype=bool)
    sub = mask[box]
    shell[box] = ~sub & (edt(sub, spacing) <= thickness_mm)
    return shell


def extract_mismatch(
    bundle: SubjectBundle,
    params: ExtractionParams = ExtractionParams(),
    cnwm: Optional[CnwmReference] = None,
) -> MismatchFeatures:
    if bundle.t2 is None or bundle.flair is None:
        logger.warning(f"{bundle.subject_id}: T2 or FLAIR absent, mismatch features NULL")
        return MismatchFeatures()
    cnwm = cnwm or CnwmReference(bundle, params)
    m_t2, m_flair = cnwm.median("t2"), cnwm.median("flair")
    if m_t2 is None or m_flair is None:
        return MismatchFeatures(cnwm_source=cnwm.source)

    net = bundle.segmentation.net
    n_net = int(np.count_nonzero(net))
    if n_net == 0:
        logger.warning(f"{bundle.subject_id}: NET is empty, mismatch features NULL")
        return MismatchFeatures(cnwm_source=cnwm.source)

    t2 = np.asarray(bundle.t2.data)
    flair = np.asarray(bundle.flair.data)
    t2_net = t2[net]
    flair_norm_median = float(np.median(flair[net] / m_flair))
    t2_norm_median = float(np.median(t2_net / m_t2))

    ratio = None
    suppression = None
    if n_net >= params.tiny_net_voxels and flair_norm_median > 0 and t2_norm_median >= 0:
        ratio = t2_norm_median / flair_norm_median
        mean = float(t2_net.mean())
        homogeneity = float(t2_net.std() / mean) if mean > 0 else math.inf
        suppression = bool(
            ratio > params.theta_ratio
            and homogeneity < params.theta_homog
            and flair_norm_median < params.theta_supp
        )
    elif n_net < params.tiny_net_voxels:
        logger.info(f"{bundle.subject_id}: NET has {n_net} voxels, mismatch ratio NULL")
    else:
        logger.warning(f"{bundle.subject_id}: non-positive NET intensity medians, mismatch ratio NULL")

    rim = None
    shell = outer_shell(net, bundle.grid.spacing, params.rim_shell_mm)
    if shell.any():
        rim_median = float(np.median(flair[shell] / m_flair))
        rim = bool(rim_median > params.theta_rim * flair_norm_median)

    return MismatchFeatures(
        flair_suppression=suppression,
        flair_rim_hyperintensity=rim,
        t2_flair_mismatch_ratio=ratio,
        cnwm_source=cnwm.source,
    )
