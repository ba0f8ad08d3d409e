import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from mcp.server.fastmcp import FastMCP

sys.path.insert(0, str(Path(__file__).resolve().parents[2]))

from client.main import extract_subject, read_config_json  # noqa: E402
from cim_llm.errors import CimLlmError  # noqa: E402
from cim_llm.evaluation import wilson_interval  # noqa: E402
from cim_llm.inference import build_prompt, scan_label  # noqa: E402
from cim_llm.schema import apply_ablation, parse  # noqa: E402
from cim_llm.volume_io import read_manifest  # noqa: E402

mcp = FastMCP("Imaging Toolbox")


@dataclass
class ExtractInput:
    """
    One subject to extract.
    - manifest_path: CSV manifest with the subject's NIfTI paths
    - subject_id: row to extract
    - seed: transition-zone sampler seed
    """
    manifest_path: str
    subject_id: str
    seed: int = 42


@mcp.tool()
def extract_features(input_data: ExtractInput):
    """Compute the feature document (JSON) for one subject of a manifest."""
    try:
        rows = {row.subject_id: row for row in read_manifest(input_data.manifest_path)}
        if input_data.subject_id not in rows:
            return {"status": "error", "message": f"Subject {input_data.subject_id} not in manifest."}
        config = read_config_json()
        params = config.extraction.params.model_copy(update={"seed": input_data.seed})
        section = config.extraction.model_copy(update={"params": params})
        document, null_groups, wall_s = extract_subject(rows[input_data.subject_id], section)
        logging.info(f"Features extracted for {input_data.subject_id} in {wall_s:.1f}s")
        return {"status": "success", "document": document, "null_groups": null_groups}
    except CimLlmError as e:
        logging.error(f"Extraction failed: {e}")
        return {"status": "error", "message": f"{type(e).__name__}: {e}"}


@mcp.tool()
def build_idh_prompt(document_json: str, with_clinical: bool = False):
    """Build the zero-shot IDH prompt for a feature document."""
    try:
        doc = apply_ablation(parse(document_json), add_clinical=with_clinical)
        return {"status": "success", "prompt": build_prompt(doc)}
    except CimLlmError as e:
        return {"status": "error", "message": f"{type(e).__name__}: {e}"}


@mcp.tool()
def parse_idh_label(response: str):
    """Map a model reply to mutant / wildtype / unparseable."""
    label, ambiguous = scan_label(response)
    return {"status": "success", "label": label.value, "ambiguous": ambiguous}


@mcp.tool()
def wilson(k: int, n: int):
    """95% Wilson score interval for k successes out of n trials."""
    try:
        low, high = wilson_interval(k, n)
        return {"status": "success", "low": low, "high": high}
    except CimLlmError as e:
        return {"status": "error", "message": str(e)}


if __name__ == "__main__":
    mcp.run(transport='stdio')
