import json

import pytest

from server import ExtractInput, build_idh_prompt, extract_features, parse_idh_label, wilson
from cim_llm.inference import PROMPT_PREAMBLE


@pytest.fixture
def toolbox_config(tmp_path, monkeypatch):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"extraction": {"atlases": {}}}))
    monkeypatch.setenv("CONFIG_PATH", str(path))
    return path


def test_parse_idh_label():
    assert parse_idh_label("**IDH mutant**\nreasons") == {"status": "success", "label": "mutant", "ambiguous": False}
    assert parse_idh_label("no idea")["label"] == "unparseable"


def test_wilson():
    result = wilson(k=50, n=100)
    assert result["status"] == "success"
    assert result["low"] == pytest.approx(0.4038, abs=1e-4)
    assert result["high"] == pytest.approx(0.5962, abs=1e-4)
    assert wilson(k=1, n=0)["status"] == "error"


def test_extract_then_prompt(synth, tmp_path, toolbox_config):
    manifest = synth.write_cohort(tmp_path / "data", n=2)
    result = extract_features(ExtractInput(manifest_path=str(manifest), subject_id="sub-002"))
    assert result["status"] == "success"
    assert "location" in result["null_groups"]

    prompt = build_idh_prompt(result["document"], with_clinical=True)
    assert prompt["status"] == "success"
    assert prompt["prompt"].startswith(PROMPT_PREAMBLE)
    assert '"clinical"' in prompt["prompt"]
    assert '"clinical"' not in build_idh_prompt(result["document"])["prompt"]


def test_unknown_subject(synth, tmp_path, toolbox_config):
    manifest = synth.write_cohort(tmp_path / "data", n=1)
    result = extract_features(ExtractInput(manifest_path=str(manifest), subject_id="sub-404"))
    assert result == {"status": "error", "message": "Subject sub-404 not in manifest."}


def test_bad_document():
    result = build_idh_prompt("{}")
    assert result["status"] == "error"
    assert result["message"].startswith("DocumentValidationError")
