from typing import Optional, Tuple

import numpy as np

from cim_llm.errors import EmptyRegionError
from cim_llm.features.groups import VolumetricFeatures
from cim_llm.volume_io import SubjectBundle
from cim_llm.voxel_analytics import boundary, edt


def nearest_rank(values: np.ndarray, percentile: float) -> float:
    return float(np.percentile(values, percentile, method="inverted_cdf"))


def edema_extent(
    bundle: SubjectBundle, tc_boundary_distance: Optional[np.ndarray] = None
) -> Tuple[Optional[float], Optional[float]]:
    """Median and nearest-rank 95th percentile of ED-voxel distances to the TC boundary (mm)."""
    seg = bundle.segmentation
    tc, ed = seg.tc, seg.ed
    if not tc.any() or not ed.any():
        return None, None
    if tc_boundary_distance is None:
        tc_boundary_distance = edt(boundary(tc, 6), bundle.grid.spacing)
    distances = tc_boundary_distance[ed]
    return float(np.median(distances)), nearest_rank(distances, 95)


def extract_volumetrics(
    bundle: SubjectBundle, tc_boundary_distance: Optional[np.ndarray] = None
) -> VolumetricFeatures:
    counts = bundle.segmentation.counts()
    if counts["wt"] == 0:
        raise EmptyRegionError(f"{bundle.subject_id}: whole tumor is empty")
    ml = bundle.grid.voxel_volume_mm3 / 1000.0
    vol_net, vol_et, vol_ed = counts["net"] * ml, counts["et"] * ml, counts["ed"] * ml

    def edema_ratio(denominator: int) -> Optional[float]:
        if counts["ed"] == 0:
            return 0.0
        return counts["ed"] / denominator if denominator else None

    median, p95 = edema_extent(bundle, tc_boundary_distance)
    return VolumetricFeatures(
        vol_wt_ml=vol_net + vol_et + vol_ed,
        vol_net_ml=vol_net,
        vol_et_ml=vol_et,
        vol_ed_ml=vol_ed,
        frac_net_of_wt=counts["net"] / counts["wt"],
        frac_et_of_wt=counts["et"] / counts["wt"],
        frac_et_of_tc=counts["et"] / counts["tc"] if counts["tc"] else None,
        edema_to_net_ratio=edema_ratio(counts["net"]),
        edema_to_tc_ratio=edema_ratio(counts["tc"]),
        edema_extent_median_mm=median,
        edema_extent_p95_mm=p95,
    )
