import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from cim_llm.volume_io import SegmentationMap, SubjectBundle, VoxelGrid, save_nifti  # noqa: E402

DIMS = (40, 40, 40)


def centered_affine(dims, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """RAS affine whose world origin sits midway between the two central voxel columns."""
    affine = np.diag([*map(float, spacing), 1.0])
    affine[:3, 3] = [-(d - 1) / 2.0 * s for d, s in zip(dims, spacing)]
    return affine


def make_grid(data, spacing=(1.0, 1.0, 1.0)) -> VoxelGrid:
    data = np.asarray(data, dtype=np.float64)
    return VoxelGrid(data=data, affine=centered_affine(data.shape, spacing))


def ball(dims, center, radius) -> np.ndarray:
    i, j, k = np.indices(dims)
    c = np.asarray(center, dtype=float)
    return (i - c[0]) ** 2 + (j - c[1]) ** 2 + (k - c[2]) ** 2 <= radius ** 2


def make_bundle(labels, subject_id="sub-001", spacing=(1.0, 1.0, 1.0), **kwargs) -> SubjectBundle:
    sequences = {}
    for name in ("flair", "t1", "t1ce", "t2"):
        volume = kwargs.pop(name, None)
        if volume is not None:
            sequences[name] = make_grid(volume, spacing)
    atlases = {name: make_grid(vol, spacing) for name, vol in kwargs.pop("atlases", {}).items()}
    return SubjectBundle(
        subject_id=subject_id,
        segmentation=SegmentationMap(make_grid(labels, spacing)),
        atlases=atlases,
        **sequences,
        **kwargs,
    )


def phantom(center=(28, 20, 20), net_radius=5, et_radius=7, ed_radius=10, dims=DIMS, enhancing=True):
    """A spherical glioma: NET core, optional ET rim, ED halo, four sequences on a brain-valued background."""
    net = ball(dims, center, net_radius)
    tc = ball(dims, center, et_radius)
    wt = ball(dims, center, ed_radius)
    labels = np.zeros(dims, dtype=np.int16)
    labels[wt] = 2
    if enhancing:
        labels[tc] = 4
        labels[net] = 1
    else:
        labels[tc] = 1

    flair = np.full(dims, 100.0)
    t2 = np.full(dims, 100.0)
    t1 = np.full(dims, 100.0)
    t1ce = np.full(dims, 100.0)
    flair[labels == 2] = 180.0
    t2[labels == 2] = 170.0
    flair[labels == 1] = 90.0 if not enhancing else 130.0
    t2[labels == 1] = 220.0
    t1[labels > 0] = 80.0
    t1ce[labels == 4] = 300.0
    return SimpleNamespace(labels=labels, flair=flair, t1=t1, t1ce=t1ce, t2=t2)


def write_cohort(root: Path, n: int = 10, drop_flair_for=("sub-003",)) -> Path:
    """Write n synthetic subjects as NIfTI files plus a manifest CSV; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    subtypes = ("astro", "oligo", "gbm")
    rows = []
    for i in range(n):
        sid = f"sub-{i + 1:03d}"
        subtype = subtypes[i % 3]
        mutant = subtype != "gbm"
        ph = phantom(center=(26 + i % 4, 20, 18 + i % 3), net_radius=4 + i % 2, enhancing=not mutant)
        row = {"subject_id": sid, "age": str(40 + 3 * i), "sex": "M" if i % 2 else "F",
               "idh": "mutant" if mutant else "wildtype", "subtype": subtype,
               "cohort": "cohort-a" if i < n // 2 else "cohort-b"}
        for name in ("seg", "flair", "t1", "t1ce", "t2"):
            if name == "flair" and sid in drop_flair_for:
                row[name] = ""
                continue
            volume = ph.labels if name == "seg" else getattr(ph, name)
            path = root / f"{sid}_{name}.nii.gz"
            save_nifti(make_grid(volume), path, dtype=np.int16 if name == "seg" else np.float32)
            row[name] = path.name
        rows.append(row)
    manifest = root / "manifest.csv"
    pd.DataFrame(rows).to_csv(manifest, index=False)
    return manifest


@pytest.fixture
def synth():
    return SimpleNamespace(
        DIMS=DIMS,
        centered_affine=centered_affine,
        make_grid=make_grid,
        ball=ball,
        make_bundle=make_bundle,
        phantom=phantom,
        write_cohort=write_cohort,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
