import itertools
import json

import pytest

from cim_llm.errors import DocumentValidationError, NonFiniteValueError, UnknownGroupError
from cim_llm.features.groups import (
    GROUP_MODELS,
    GROUP_NAMES,
    EloquentProximity,
    LocationFeatures,
    MassEffectFeatures,
    MismatchFeatures,
    MorphologyFeatures,
    RegionOverlap,
    VolumetricFeatures,
)
from cim_llm.schema import (
    SCHEMA_VERSION,
    AblationSpec,
    SubjectFeatureDocument,
    apply_ablation,
    build_document,
    parse,
    published_schema,
    round_sig,
    serialize,
)
from cim_llm.volume_io import Sex

PROVENANCE = {
    "extraction": {"seed": 42, "theta_ratio": 1.5},
    "thresholds": {"theta_ratio": 1.5},
    "min_voxels": 10,
    "cnwm_source": "mirror_fallback",
    "atlas_config_version": "cim-atlas/1",
    "atlases": ["harvard_oxford_cortical"],
}


def random_groups(rng):
    def maybe(value):
        return None if rng.random() < 0.2 else value

    def frac():
        return float(rng.random())

    location = LocationFeatures(
        tumor_regions={"atlas": {f"Region {i}": RegionOverlap(tumor_in_region=frac(), regional_occupancy=frac())
                                 for i in range(int(rng.integers(1, 4)))}},
        eloquent_proximity=[EloquentProximity(region=f"atlas:E{i}", distance_mm=float(rng.exponential(10)))
                            for i in range(int(rng.integers(0, 6)))],
        deep_gray_involved=maybe(bool(rng.integers(2))),
        bilateral_frontal=maybe(bool(rng.integers(2))),
    )
    mismatch = MismatchFeatures(
        flair_suppression=maybe(bool(rng.integers(2))),
        flair_rim_hyperintensity=maybe(bool(rng.integers(2))),
        t2_flair_mismatch_ratio=maybe(float(rng.uniform(0, 4))),
        cnwm_source=maybe("provided_mask"),
    )
    mass = MassEffectFeatures(
        tc_crosses_midline=bool(rng.integers(2)),
        ed_crosses_midline=bool(rng.integers(2)),
        ventricular_asymmetry_index=maybe(float(rng.uniform(-1, 1))),
    )
    morphology = MorphologyFeatures(
        tc_hollowness=maybe(frac()),
        et_component_count=int(rng.integers(0, 5)),
        sphericity_wt=float(rng.uniform(0.3, 1.0)),
        transition_zone_thickness_mm=maybe(float(rng.exponential(3))),
    )
    net, et, ed = (float(v) for v in rng.exponential(20, 3))
    wt = net + et + ed
    volumetrics = VolumetricFeatures(
        vol_wt_ml=wt, vol_net_ml=net, vol_et_ml=et, vol_ed_ml=ed,
        frac_net_of_wt=net / wt, frac_et_of_wt=et / wt, frac_et_of_tc=et / (net + et),
        edema_to_net_ratio=ed / net, edema_extent_median_mm=maybe(float(rng.exponential(5))),
    )
    groups = {
        "location": location,
        "t2_flair_mismatch": mismatch,
        "mass_effect": mass,
        "tumor_morphology": morphology,
        "volumetric_measures": volumetrics,
    }
    return {name: (None if rng.random() < 0.1 else group) for name, group in groups.items()}


def random_document(rng, i=0):
    return build_document(
        f"sub-{i:04d}",
        random_groups(rng),
        PROVENANCE,
        age_years=None if rng.random() < 0.1 else float(rng.uniform(18, 90)),
        sex=(None, Sex.MALE, Sex.FEMALE)[int(rng.integers(3))],
    )


@pytest.fixture
def doc(rng):
    return random_document(rng)


def test_round_trip_and_determinism(rng):
    for i in range(1000):
        doc = random_document(rng, i)
        text = serialize(doc)
        assert serialize(doc) == text
        again = parse(text)
        assert again == doc
        assert serialize(again) == text


def test_serialization_format(doc):
    text = serialize(doc)
    payload = json.loads(text)
    assert text == json.dumps(payload, sort_keys=True, indent=2)
    assert payload["schema_version"] == SCHEMA_VERSION
    assert set(GROUP_NAMES) <= set(payload)
    assert "NaN" not in text and "Infinity" not in text


def test_six_significant_digits():
    assert round_sig(3.14159265) == 3.14159
    assert round_sig(123456789.0) == 123457000.0
    assert round_sig(0.000123456789) == 0.000123457
    with pytest.raises(NonFiniteValueError):
        round_sig(float("nan"))


def test_null_groups_are_listed():
    doc = build_document("sub-1", {"mass_effect": MassEffectFeatures(tc_crosses_midline=True)}, PROVENANCE)
    assert doc.null_groups() == ["location", "t2_flair_mismatch", "tumor_morphology", "volumetric_measures"]
    payload = json.loads(serialize(doc))
    assert payload["location"] is None


def test_unknown_group_on_build():
    with pytest.raises(UnknownGroupError):
        build_document("sub-1", {"histology": None}, PROVENANCE)


def test_negative_age_rejected():
    with pytest.raises(DocumentValidationError):
        build_document("sub-1", {}, PROVENANCE, age_years=-1.0)


def test_parse_rejects_unknown_keys(doc):
    payload = json.loads(serialize(doc))
    payload["histology"] = {"grade": 4}
    with pytest.raises(DocumentValidationError):
        parse(json.dumps(payload))


def test_parse_rejects_missing_group(doc):
    payload = json.loads(serialize(doc))
    del payload["mass_effect"]
    with pytest.raises(DocumentValidationError):
        parse(json.dumps(payload))


@pytest.mark.parametrize("text", ["not json", "[1, 2]", '{"subject_id": "x", "location": NaN}'])
def test_parse_rejects_garbage(text):
    with pytest.raises(DocumentValidationError):
        parse(text)


def test_parse_rejects_nan_in_group(doc):
    text = serialize(apply_ablation(doc, [g for g in GROUP_NAMES if g != "mass_effect"], add_clinical=True))
    payload = json.loads(text)
    payload["mass_effect"] = {"ventricular_asymmetry_index": float("nan")}
    with pytest.raises(DocumentValidationError):
        parse(json.dumps(payload))


def test_drop_volumetrics(doc):
    ablated = apply_ablation(doc, ["volumetric_measures"])
    payload = json.loads(serialize(ablated))
    assert "volumetric_measures" not in payload
    assert "clinical" not in payload
    assert payload["provenance"]["ablation"] == {
        "dropped_groups": ["volumetric_measures"],
        "clinical_included": False,
        "mode": "remove",
    }
    assert parse(serialize(ablated)) == ablated


def test_drop_everything(doc):
    ablated = apply_ablation(doc, GROUP_NAMES)
    payload = json.loads(serialize(ablated))
    assert not set(GROUP_NAMES) & set(payload)
    assert ablated.null_groups() == []


def test_clinical_only_when_requested(doc):
    assert json.loads(serialize(apply_ablation(doc, [], add_clinical=True)))["clinical"] == doc.clinical.model_dump(mode="json")
    assert "clinical" not in json.loads(serialize(apply_ablation(doc, [])))


def test_nullify_mode_keeps_keys(doc):
    payload = json.loads(serialize(apply_ablation(doc, ["location"], nullify=True)))
    assert payload["location"] is None
    assert payload["clinical"] is None
    assert payload["provenance"]["ablation"]["mode"] == "null"


def test_unknown_group_on_ablation(doc):
    with pytest.raises(UnknownGroupError):
        apply_ablation(doc, ["histology"])
    with pytest.raises(ValueError):
        AblationSpec(drop=["histology"])


def test_ablation_idempotent_and_commutative(doc):
    subsets = [set(c) for r in range(len(GROUP_NAMES) + 1) for c in itertools.combinations(GROUP_NAMES, r)]
    for subset in subsets:
        once = apply_ablation(doc, subset)
        assert apply_ablation(once, subset) == once
    for a, b in itertools.combinations(subsets, 2):
        ab = apply_ablation(apply_ablation(doc, a), b)
        ba = apply_ablation(apply_ablation(doc, b), a)
        assert ab == ba == apply_ablation(doc, a | b)


def test_dropped_group_must_be_empty(doc):
    payload = json.loads(serialize(apply_ablation(doc, ["mass_effect"], nullify=True)))
    payload["mass_effect"] = {"tc_crosses_midline": True}
    with pytest.raises(DocumentValidationError):
        parse(json.dumps(payload))


def test_spec_hash_is_order_insensitive():
    a = AblationSpec(label="a", drop=["location", "mass_effect"])
    b = AblationSpec(label="b", drop=["mass_effect", "location"])
    assert a.spec_hash == b.spec_hash
    assert len(a.spec_hash) == 16
    assert AblationSpec(with_clinical=True).spec_hash != AblationSpec().spec_hash


def test_published_schema_matches_models():
    schema = published_schema()
    assert schema["properties"]["schema_version"]["const"] == SCHEMA_VERSION
    assert set(schema["properties"]) == set(SubjectFeatureDocument.model_fields)
    for name, model in GROUP_MODELS.items():
        assert set(schema["properties"][name]["properties"]) == set(model.model_fields), name
    assert schema["properties"]["provenance"]["properties"]["ablation"]["properties"]["dropped_groups"]["items"]["enum"] == list(GROUP_NAMES)
