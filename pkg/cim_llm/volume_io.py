"""NIfTI-1 loading, geometry checks and subject bundle assembly."""

import gzip
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import nibabel as nib
import numpy as np
import pandas as pd
from nibabel import orientations
from nibabel.affines import apply_affine
from nibabel.filebasedimages import ImageFileError
from nibabel.spatialimages import HeaderDataError

from cim_llm.errors import (
    CorruptHeaderError,
    DimensionalityNot3DError,
    GeometryMismatchError,
    LabelVocabularyError,
    ManifestError,
    MissingRequiredModalityError,
    NonFiniteIntensityError,
    UnsupportedDatatypeError,
    UnsupportedFormatError,
)

logger = logging.getLogger(__name__)

GEOMETRY_TOL_MM = 1e-3

# NIfTI-1 datatype codes accepted on load
SUPPORTED_DATATYPES = {
    2: "uint8",
    4: "int16",
    8: "int32",
    16: "float32",
    64: "float64",
    256: "int8",
    512: "uint16",
}

NIFTI1_MAGICS = (b"n+1\x00", b"ni1\x00")
SEGMENTATION_LABELS = (0, 1, 2, 4)
NET_LABEL, ED_LABEL, ET_LABEL = 1, 2, 4

SEQUENCES = ("flair", "t1", "t1ce", "t2")
MANIFEST_COLUMNS = (
    "subject_id", "flair", "t1", "t1ce", "t2", "seg",
    "cnwm", "vent_left", "vent_right", "age", "sex", "idh", "subtype",
)


class Sex(str, Enum):
    MALE = "male"
    FEMALE = "female"


class IDHLabel(str, Enum):
    MUTANT = "mutant"
    WILDTYPE = "wildtype"
    UNPARSEABLE = "unparseable"

    @property
    def binary(self) -> Optional[int]:
        return {"mutant": 1, "wildtype": 0}.get(self.value)


class Subtype(str, Enum):
    ASTROCYTOMA = "astrocytoma"
    OLIGODENDROGLIOMA = "oligodendroglioma"
    GLIOBLASTOMA = "glioblastoma"

    @property
    def short(self) -> str:
        return {"astrocytoma": "astro", "oligodendroglioma": "oligo", "glioblastoma": "gbm"}[self.value]


_SEX_TOKENS = {"m": Sex.MALE, "male": Sex.MALE, "f": Sex.FEMALE, "female": Sex.FEMALE}
_IDH_TOKENS = {"mutant": IDHLabel.MUTANT, "wildtype": IDHLabel.WILDTYPE}
_SUBTYPE_TOKENS = {
    "astro": Subtype.ASTROCYTOMA,
    "astrocytoma": Subtype.ASTROCYTOMA,
    "oligo": Subtype.OLIGODENDROGLIOMA,
    "oligodendroglioma": Subtype.OLIGODENDROGLIOMA,
    "gbm": Subtype.GLIOBLASTOMA,
    "glioblastoma": Subtype.GLIOBLASTOMA,
}


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A 3D scalar volume with its voxel-to-world (mm) affine.

    Spacing is derived from the affine's column norms so the two can never
    disagree. The data array is made read-only on construction.
    """
    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DimensionalityNot3DError(f"expected a 3D array, got shape {data.shape}")
        affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise CorruptHeaderError(f"affine must be 4x4, got {affine.shape}")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise CorruptHeaderError("affine is not invertible")
        if data.dtype.kind == "f" and not np.isfinite(data).all():
            raise NonFiniteIntensityError("volume contains NaN or Inf intensities")
        data = data.view()
        data.flags.writeable = False
        affine = affine.copy()
        affine.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def spacing(self) -> Tuple[float, float, float]:
        return tuple(float(s) for s in np.linalg.norm(self.affine[:3, :3], axis=0))

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def with_data(self, data: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(data=data, affine=self.affine)

    def crop(self, box: Tuple[slice, slice, slice]) -> "VoxelGrid":
        start = np.array([s.start or 0 for s in box], dtype=np.float64)
        affine = np.array(self.affine)
        affine[:3, 3] = apply_affine(self.affine, start)
        return VoxelGrid(data=self.data[box], affine=affine)

    def same_geometry(self, other: "VoxelGrid", tol: float = GEOMETRY_TOL_MM) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol, rtol=0)
            and np.allclose(self.affine, other.affine, atol=tol, rtol=0)
        )

    def world_coordinates(self, index: np.ndarray) -> np.ndarray:
        """Map an (N, 3) array of voxel indices to world millimetres."""
        return apply_affine(self.affine, np.asarray(index, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class SegmentationMap:
    grid: VoxelGrid
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        values = np.asarray(self.grid.data)
        if not np.array_equal(values, np.rint(values)):
            raise LabelVocabularyError("segmentation contains non-integer labels")
        labels = values.astype(np.int16)
        found = set(np.unique(labels).tolist())
        extra = found - set(SEGMENTATION_LABELS)
        if extra:
            raise LabelVocabularyError(
                f"segmentation labels {sorted(extra)} outside vocabulary {SEGMENTATION_LABELS}"
            )
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def net(self) -> np.ndarray:
        return self.labels == NET_LABEL

    @property
    def ed(self) -> np.ndarray:
        return self.labels == ED_LABEL

    @property
    def et(self) -> np.ndarray:
        return self.labels == ET_LABEL

    @property
    def tc(self) -> np.ndarray:
        return (self.labels == NET_LABEL) | (self.labels == ET_LABEL)

    @property
    def wt(self) -> np.ndarray:
        return self.labels > 0

    def counts(self) -> Dict[str, int]:
        c = {label: int(np.count_nonzero(self.labels == label)) for label in (1, 2, 4)}
        return {"net": c[1], "ed": c[2], "et": c[4], "tc": c[1] + c[4], "wt": c[1] + c[2] + c[4]}


@dataclass(frozen=True)
class ManifestRow:
    subject_id: str
    paths: Mapping[str, Path]
    age_years: Optional[float] = None
    sex: Optional[Sex] = None
    idh_label: Optional[IDHLabel] = None
    subtype: Optional[Subtype] = None
    cohort: str = "default"


@dataclass(frozen=True, eq=False)
class SubjectBundle:
    subject_id: str
    segmentation: SegmentationMap
    flair: Optional[VoxelGrid] = None
    t1: Optional[VoxelGrid] = None
    t1ce: Optional[VoxelGrid] = None
    t2: Optional[VoxelGrid] = None
    atlases: Mapping[str, VoxelGrid] = field(default_factory=dict)
    cnwm_mask: Optional[np.ndarray] = None
    ventricle_masks: Optional[Tuple[np.ndarray, np.ndarray]] = None
    age_years: Optional[float] = None
    sex: Optional[Sex] = None
    idh_label: Optional[IDHLabel] = None
    subtype: Optional[Subtype] = None
    cohort: str = "default"

    @property
    def grid(self) -> VoxelGrid:
        return self.segmentation.grid

    def sequence(self, name: str) -> Optional[VoxelGrid]:
        return getattr(self, name)

    @property
    def has_full_battery(self) -> bool:
        return all(getattr(self, name) is not None for name in SEQUENCES)


def _probe_sizeof_hdr(raw: bytes) -> str:
    if len(raw) < 348:
        raise CorruptHeaderError(f"header truncated ({len(raw)} bytes)")
    for endian in ("<", ">"):
        (sizeof_hdr,) = struct.unpack(endian + "i", raw[:4])
        if sizeof_hdr == 348:
            return endian
        if sizeof_hdr == 540:
            raise UnsupportedFormatError("NIfTI-2 files are not supported; convert to NIfTI-1")
    raise CorruptHeaderError("sizeof_hdr is neither 348 nor 540")


def _select_affine(header: nib.Nifti1Header) -> np.ndarray:
    """sform wins unless qform carries a strictly higher code."""
    sform, sform_code = header.get_sform(coded=True)
    qform, qform_code = header.get_qform(coded=True)
    sform_code = int(sform_code or 0)
    qform_code = int(qform_code or 0)
    if sform is not None and sform_code > 0 and sform_code >= qform_code:
        return np.asarray(sform, dtype=np.float64)
    if qform is not None and qform_code > 0:
        return np.asarray(qform, dtype=np.float64)
    logger.warning("Neither sform nor qform is set, falling back to the pixdim base affine")
    return np.asarray(header.get_base_affine(), dtype=np.float64)


def canonicalize(grid: VoxelGrid) -> VoxelGrid:
    """Reorder axes to the closest canonical RAS+ orientation."""
    current = orientations.io_orientation(grid.affine)
    transform = orientations.ornt_transform(current, orientations.axcodes2ornt(("R", "A", "S")))
    if np.array_equal(transform, [[0, 1], [1, 1], [2, 1]]):
        return grid
    data = orientations.apply_orientation(grid.data, transform)
    affine = grid.affine @ orientations.inv_ornt_aff(transform, grid.dims)
    return VoxelGrid(data=np.ascontiguousarray(data), affine=affine)


def load_nifti(path) -> VoxelGrid:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise CorruptHeaderError(f"{path}: broken gzip stream: {e}") from e
    endian = _probe_sizeof_hdr(raw)

    magic = raw[344:348]
    if magic not in NIFTI1_MAGICS:
        raise CorruptHeaderError(f"{path}: bad NIfTI-1 magic {magic!r}")
    (datatype,) = struct.unpack(endian + "h", raw[70:72])
    if datatype not in SUPPORTED_DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: NIfTI datatype code {datatype} is not supported")
    dim = struct.unpack(endian + "8h", raw[40:56])
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4:ndim + 1]):
        raise DimensionalityNot3DError(f"{path}: expected a 3D volume, header dim={dim}")

    try:
        if magic == b"n+1\x00":
            img = nib.Nifti1Image.from_bytes(raw)
        else:
            # ni1 is the two-file .hdr/.img pair
            img = nib.load(str(path))
        header = img.header
        affine = _select_affine(header)
        data = np.asarray(img.get_fdata(dtype=np.float64)).reshape(dim[1:4])
    except (ImageFileError, HeaderDataError, ValueError) as e:
        raise CorruptHeaderError(f"{path}: {e}") from e

    if not np.isfinite(data).all():
        raise NonFiniteIntensityError(f"{path}: NaN or Inf intensities")
    grid = canonicalize(VoxelGrid(data=data, affine=affine))
    logger.debug(f"Loaded {path.name}: dims={grid.dims} spacing={grid.spacing}")
    return grid


def save_nifti(grid: VoxelGrid, path, dtype=np.float32) -> Path:
    path = Path(path)
    img = nib.Nifti1Image(np.asarray(grid.data, dtype=dtype), grid.affine)
    img.header.set_data_dtype(dtype)
    img.header.set_sform(grid.affine, code=1)
    img.header.set_qform(grid.affine, code=1)
    nib.save(img, str(path))
    return path


def resample_nearest(grid: VoxelGrid, reference: VoxelGrid) -> VoxelGrid:
    """Pad or crop ``grid`` onto ``reference`` when they differ by a whole-voxel shift.

    Only the translation may differ; any rotation, scaling or fractional offset
    is a GeometryMismatchError (deformable alignment is not done here).
    """
    if not np.allclose(grid.affine[:3, :3], reference.affine[:3, :3], atol=GEOMETRY_TOL_MM, rtol=0):
        raise GeometryMismatchError("grids differ in spacing or orientation")
    offset = np.linalg.solve(reference.affine[:3, :3], grid.affine[:3, 3] - reference.affine[:3, 3])
    shift = np.rint(offset)
    if not np.allclose(offset, shift, atol=1e-3):
        raise GeometryMismatchError(f"grids are offset by a fractional voxel shift {offset}")
    shift = shift.astype(int)

    out = np.zeros(reference.dims, dtype=grid.data.dtype)
    src, dst = [], []
    for axis in range(3):
        lo = max(0, shift[axis])
        hi = min(reference.dims[axis], shift[axis] + grid.dims[axis])
        if hi <= lo:
            return reference.with_data(out)
        dst.append(slice(lo, hi))
        src.append(slice(lo - shift[axis], hi - shift[axis]))
    out[tuple(dst)] = grid.data[tuple(src)]
    return reference.with_data(out)


@lru_cache(maxsize=16)
def load_atlas(path: str) -> VoxelGrid:
    grid = load_nifti(path)
    return grid.with_data(np.rint(grid.data).astype(np.int32))


def _parse_token(value: str, table: Mapping[str, Enum], column: str, subject_id: str):
    if not value:
        return None
    try:
        return table[value.strip().lower()]
    except KeyError:
        raise ManifestError(f"{subject_id}: unknown {column} value '{value}'") from None


def read_manifest(path) -> List[ManifestRow]:
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    missing = [c for c in ("subject_id", "seg") if c not in frame.columns]
    if missing:
        raise ManifestError(f"manifest {path} lacks required columns {missing}")

    rows = []
    for record in frame.to_dict(orient="records"):
        subject_id = record["subject_id"].strip()
        if not subject_id:
            raise ManifestError(f"manifest {path} has a row without subject_id")
        paths = {}
        for column in ("flair", "t1", "t1ce", "t2", "seg", "cnwm", "vent_left", "vent_right"):
            value = record.get(column, "").strip()
            if value:
                candidate = Path(value)
                paths[column] = candidate if candidate.is_absolute() else path.parent / candidate
        age_text = record.get("age", "").strip()
        try:
            age = float(age_text) if age_text else None
        except ValueError:
            raise ManifestError(f"{subject_id}: age '{age_text}' is not a number") from None
        rows.append(
            ManifestRow(
                subject_id=subject_id,
                paths=paths,
                age_years=age,
                sex=_parse_token(record.get("sex", ""), _SEX_TOKENS, "sex", subject_id),
                idh_label=_parse_token(record.get("idh", ""), _IDH_TOKENS, "idh", subject_id),
                subtype=_parse_token(record.get("subtype", ""), _SUBTYPE_TOKENS, "subtype", subject_id),
                cohort=record.get("cohort", "").strip() or "default",
            )
        )
    logger.info(f"Read {len(rows)} subjects from manifest {path}")
    return rows


def _check_geometry(name: str, grid: VoxelGrid, reference: VoxelGrid, subject_id: str):
    if not grid.same_geometry(reference):
        raise GeometryMismatchError(
            f"{subject_id}: {name} geometry dims={grid.dims} spacing={grid.spacing} "
            f"differs from segmentation dims={reference.dims} spacing={reference.spacing}"
        )


def _load_mask(path: Path, name: str, reference: VoxelGrid, subject_id: str) -> np.ndarray:
    grid = load_nifti(path)
    _check_geometry(name, grid, reference, subject_id)
    return np.asarray(grid.data) > 0


def assemble_bundle(row: ManifestRow, atlas_paths: Optional[Mapping[str, str]] = None) -> SubjectBundle:
    if "seg" not in row.paths:
        raise MissingRequiredModalityError(f"{row.subject_id}: segmentation path is required")
    seg_grid = load_nifti(row.paths["seg"])
    segmentation = SegmentationMap(seg_grid)

    sequences = {}
    for name in SEQUENCES:
        if name in row.paths:
            grid = load_nifti(row.paths[name])
            _check_geometry(name, grid, seg_grid, row.subject_id)
            sequences[name] = grid
        else:
            logger.info(f"{row.subject_id}: {name} absent")
    if not sequences:
        raise MissingRequiredModalityError(f"{row.subject_id}: no MRI sequence provided")

    atlases = {}
    for atlas_name, atlas_path in (atlas_paths or {}).items():
        atlas = load_atlas(str(atlas_path))
        if not atlas.same_geometry(seg_grid):
            # whole-voxel pad/crop onto the subject grid, or GeometryMismatchError
            atlas = resample_nearest(atlas, seg_grid)
        atlases[atlas_name] = atlas

    cnwm = None
    if "cnwm" in row.paths:
        cnwm = _load_mask(row.paths["cnwm"], "cnwm", seg_grid, row.subject_id)

    ventricles = None
    if "vent_left" in row.paths and "vent_right" in row.paths:
        ventricles = (
            _load_mask(row.paths["vent_left"], "vent_left", seg_grid, row.subject_id),
            _load_mask(row.paths["vent_right"], "vent_right", seg_grid, row.subject_id),
        )
    elif "vent_left" in row.paths or "vent_right" in row.paths:
        logger.warning(f"{row.subject_id}: only one ventricle mask given, treating both as absent")

    return SubjectBundle(
        subject_id=row.subject_id,
        segmentation=segmentation,
        atlases=atlases,
        cnwm_mask=cnwm,
        ventricle_masks=ventricles,
        age_years=row.age_years,
        sex=row.sex,
        idh_label=row.idh_label,
        subtype=row.subtype,
        cohort=row.cohort,
        **sequences,
    )
