import gzip

import nibabel as nib
import numpy as np
import pandas as pd
import pytest

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
from cim_llm.volume_io import (
    IDHLabel,
    SegmentationMap,
    Sex,
    Subtype,
    VoxelGrid,
    assemble_bundle,
    canonicalize,
    load_nifti,
    read_manifest,
    resample_nearest,
    save_nifti,
)


def nifti_bytes(data, dtype=np.float32, sform=None, sform_code=0, qform=None, qform_code=0, **fields):
    """Single-file NIfTI-1 bytes built field by field, so header quirks survive untouched."""
    data = np.asarray(data)
    header = nib.Nifti1Header()
    header.set_data_shape(data.shape)
    header.set_data_dtype(dtype)
    if sform is not None:
        header.set_sform(sform, code=sform_code)
    if qform is not None:
        header.set_qform(qform, code=qform_code)
    header["vox_offset"] = 352
    for key, value in fields.items():
        header[key] = value
    payload = data.astype(np.dtype(dtype).newbyteorder("<")).tobytes(order="F")
    return header.binaryblock + b"\x00" * 4 + payload


def write(tmp_path, name, raw):
    path = tmp_path / name
    path.write_bytes(raw)
    return path


def test_minimal_identity_volume(tmp_path):
    data = np.arange(64, dtype=np.float32).reshape(4, 4, 4)
    path = write(tmp_path, "a.nii", nifti_bytes(data, sform=np.eye(4), sform_code=1))
    grid = load_nifti(path)
    assert grid.dims == (4, 4, 4)
    assert grid.data.size == 64
    assert grid.spacing == pytest.approx((1.0, 1.0, 1.0))
    np.testing.assert_array_equal(grid.data, data)


def test_gzip_is_transparent(tmp_path):
    data = np.random.default_rng(0).normal(size=(5, 6, 7)).astype(np.float32)
    raw = nifti_bytes(data, sform=np.eye(4), sform_code=1)
    plain = load_nifti(write(tmp_path, "a.nii", raw))
    packed = load_nifti(write(tmp_path, "a.nii.gz", gzip.compress(raw)))
    np.testing.assert_array_equal(plain.data, packed.data)
    np.testing.assert_array_equal(plain.affine, packed.affine)


def test_scaling_slope_and_intercept(tmp_path):
    raw = nifti_bytes(np.full((2, 2, 2), 3), dtype=np.int16, sform=np.eye(4), sform_code=1,
                      scl_slope=2.0, scl_inter=1.0)
    grid = load_nifti(write(tmp_path, "s.nii", raw))
    assert np.all(grid.data == 7.0)


def test_nifti2_is_rejected(tmp_path):
    raw = np.int32(540).tobytes() + b"\x00" * 600
    with pytest.raises(UnsupportedFormatError):
        load_nifti(write(tmp_path, "n2.nii", raw))


def test_unsupported_datatype(tmp_path):
    raw = nifti_bytes(np.zeros((2, 2, 2)), dtype=np.complex64, sform=np.eye(4), sform_code=1)
    with pytest.raises(UnsupportedDatatypeError):
        load_nifti(write(tmp_path, "c.nii", raw))


def test_four_dimensional_volume_is_rejected(tmp_path):
    raw = nifti_bytes(np.zeros((2, 2, 2, 3)), sform=np.eye(4), sform_code=1)
    with pytest.raises(DimensionalityNot3DError):
        load_nifti(write(tmp_path, "t.nii", raw))


def test_trailing_singleton_dimension_is_accepted(tmp_path):
    raw = nifti_bytes(np.ones((2, 3, 4, 1)), sform=np.eye(4), sform_code=1)
    assert load_nifti(write(tmp_path, "t1.nii", raw)).dims == (2, 3, 4)


def test_nan_intensity_is_rejected(tmp_path):
    data = np.zeros((3, 3, 3), dtype=np.float32)
    data[1, 1, 1] = np.nan
    with pytest.raises(NonFiniteIntensityError):
        load_nifti(write(tmp_path, "nan.nii", nifti_bytes(data, sform=np.eye(4), sform_code=1)))


@pytest.mark.parametrize("mangle", ["magic", "truncate"])
def test_corrupt_header(tmp_path, mangle):
    raw = bytearray(nifti_bytes(np.zeros((2, 2, 2)), sform=np.eye(4), sform_code=1))
    if mangle == "magic":
        raw[344:348] = b"xyz\x00"
    else:
        raw = raw[:200]
    with pytest.raises(CorruptHeaderError):
        load_nifti(write(tmp_path, "bad.nii", bytes(raw)))


def test_sform_wins_ties_and_higher_qform_wins(tmp_path):
    sform = np.diag([1.0, 1.0, 1.0, 1.0])
    qform = np.diag([2.0, 2.0, 2.0, 1.0])
    data = np.zeros((3, 3, 3))
    tie = load_nifti(write(tmp_path, "tie.nii", nifti_bytes(data, sform=sform, sform_code=1, qform=qform, qform_code=1)))
    assert tie.spacing == pytest.approx((1.0, 1.0, 1.0))
    higher_q = load_nifti(write(tmp_path, "q.nii", nifti_bytes(data, sform=sform, sform_code=1, qform=qform, qform_code=2)))
    assert higher_q.spacing == pytest.approx((2.0, 2.0, 2.0))


def test_canonicalize_flips_las_to_ras():
    data = np.arange(24, dtype=float).reshape(2, 3, 4)
    affine = np.diag([-1.0, 1.0, 1.0, 1.0])
    affine[0, 3] = 1.0
    grid = canonicalize(VoxelGrid(data=data, affine=affine))
    assert grid.affine[0, 0] > 0
    np.testing.assert_array_equal(grid.data, data[::-1])
    # the same world point keeps its intensity
    world = np.array([[0.0, 2.0, 3.0]])
    before = np.linalg.solve(affine, np.r_[world[0], 1.0])[:3].astype(int)
    after = np.linalg.solve(grid.affine, np.r_[world[0], 1.0])[:3].round().astype(int)
    assert data[tuple(before)] == grid.data[tuple(after)]
    assert canonicalize(grid) is grid


def test_save_and_load_keep_geometry(tmp_path, synth):
    grid = synth.make_grid(np.random.default_rng(1).normal(size=(6, 5, 4)), spacing=(1.0, 1.5, 2.0))
    loaded = load_nifti(save_nifti(grid, tmp_path / "g.nii.gz", dtype=np.float64))
    assert loaded.same_geometry(grid)
    np.testing.assert_allclose(loaded.data, grid.data)


def test_voxel_grid_is_read_only_and_crop_moves_origin(synth):
    grid = synth.make_grid(np.zeros((10, 10, 10)), spacing=(2.0, 2.0, 2.0))
    with pytest.raises(ValueError):
        grid.data[0, 0, 0] = 1.0
    cropped = grid.crop((slice(2, 5), slice(0, 10), slice(3, 4)))
    assert cropped.dims == (3, 10, 1)
    np.testing.assert_allclose(cropped.world_coordinates(np.array([[0, 0, 0]])),
                               grid.world_coordinates(np.array([[2, 0, 3]])))


def test_segmentation_vocabulary(synth):
    labels = np.zeros((4, 4, 4))
    labels[0, 0, 0] = 3
    with pytest.raises(LabelVocabularyError):
        SegmentationMap(synth.make_grid(labels))
    labels[0, 0, 0] = 4
    labels[1, 1, 1] = 1
    labels[2, 2, 2] = 2
    assert SegmentationMap(synth.make_grid(labels)).counts() == {"net": 1, "ed": 1, "et": 1, "tc": 2, "wt": 3}


def test_resample_nearest_whole_voxel_shift(synth):
    reference = synth.make_grid(np.zeros((6, 6, 6)))
    affine = reference.affine.copy()
    affine[:3, 3] += [2.0, 0.0, 0.0]
    moved = VoxelGrid(data=np.ones((6, 6, 6)), affine=affine)
    out = resample_nearest(moved, reference)
    assert out.same_geometry(reference)
    assert out.data[:2].sum() == 0 and np.all(out.data[2:] == 1)

    affine[:3, 3] += [0.5, 0.0, 0.0]
    with pytest.raises(GeometryMismatchError):
        resample_nearest(VoxelGrid(data=np.ones((6, 6, 6)), affine=affine), reference)


def _manifest(tmp_path, rows):
    path = tmp_path / "manifest.csv"
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def test_manifest_parsing_tables(tmp_path):
    path = _manifest(tmp_path, [
        {"subject_id": "s1", "seg": "seg.nii.gz", "age": "63", "sex": "M", "idh": "mutant", "subtype": "oligo"},
        {"subject_id": "s2", "seg": "/abs/seg.nii", "age": "", "sex": "", "idh": "wildtype",
         "subtype": "glioblastoma", "cohort": "ucsf"},
    ])
    first, second = read_manifest(path)
    assert first.sex is Sex.MALE and first.age_years == 63.0
    assert first.idh_label is IDHLabel.MUTANT and first.subtype is Subtype.OLIGODENDROGLIOMA
    assert first.paths["seg"] == tmp_path / "seg.nii.gz"
    assert first.cohort == "default"
    assert second.age_years is None and second.sex is None
    assert second.subtype is Subtype.GLIOBLASTOMA and second.cohort == "ucsf"
    assert str(second.paths["seg"]) == "/abs/seg.nii"


@pytest.mark.parametrize("column,value", [("sex", "X"), ("idh", "maybe"), ("subtype", "ependymoma"), ("age", "old")])
def test_manifest_rejects_unknown_tokens(tmp_path, column, value):
    row = {"subject_id": "s1", "seg": "seg.nii.gz", "age": "50", "sex": "F", "idh": "mutant", "subtype": "astro"}
    row[column] = value
    with pytest.raises(ManifestError):
        read_manifest(_manifest(tmp_path, [row]))


def _write_subject(tmp_path, synth, t2_spacing=(1.0, 1.0, 1.0), ventricles=()):
    ph = synth.phantom(dims=(24, 24, 24), center=(14, 12, 12), net_radius=3, et_radius=4, ed_radius=6)
    row = {"subject_id": "s1", "age": "63", "sex": "M", "idh": "wildtype", "subtype": "gbm"}
    for name in ("seg", "flair", "t1", "t1ce", "t2"):
        volume = ph.labels if name == "seg" else getattr(ph, name)
        spacing = t2_spacing if name == "t2" else (1.0, 1.0, 1.0)
        save_nifti(synth.make_grid(volume, spacing), tmp_path / f"{name}.nii.gz")
        row[name] = f"{name}.nii.gz"
    for name in ventricles:
        save_nifti(synth.make_grid(synth.ball((24, 24, 24), (8, 12, 12), 2)), tmp_path / f"{name}.nii.gz")
        row[name] = f"{name}.nii.gz"
    return read_manifest(_manifest(tmp_path, [row]))[0]


def test_assemble_bundle_without_masks(tmp_path, synth):
    bundle = assemble_bundle(_write_subject(tmp_path, synth))
    assert bundle.has_full_battery
    assert bundle.cnwm_mask is None and bundle.ventricle_masks is None
    assert bundle.sex is Sex.MALE and bundle.age_years == 63.0


def test_assemble_bundle_geometry_mismatch(tmp_path, synth):
    with pytest.raises(GeometryMismatchError):
        assemble_bundle(_write_subject(tmp_path, synth, t2_spacing=(2.0, 2.0, 2.0)))


def test_single_ventricle_mask_counts_as_absent(tmp_path, synth):
    bundle = assemble_bundle(_write_subject(tmp_path, synth, ventricles=("vent_left",)))
    assert bundle.ventricle_masks is None


def test_segmentation_is_required(tmp_path, synth):
    row = _write_subject(tmp_path, synth)
    paths = {k: v for k, v in row.paths.items() if k != "seg"}
    with pytest.raises(MissingRequiredModalityError):
        assemble_bundle(type(row)(subject_id=row.subject_id, paths=paths))
