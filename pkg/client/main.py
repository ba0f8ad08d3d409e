import argparse
import asyncio
import json
import logging
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from cim_llm.errors import CimLlmError, ConfigError, EmptyCohortError, OutputExistsError  # noqa: E402
from cim_llm.evaluation import (  # noqa: E402
    DEFAULT_ABLATIONS,
    Z_95,
    GroundTruth,
    ablation_run,
    cohort_characteristics,
    cohort_reports,
    compare_models,
    export_ablation,
    export_reports,
    render_ablation_table,
    render_table,
    write_once,
)
from cim_llm.features import ExtractionParams, extract_all, load_atlas_config  # noqa: E402
from cim_llm.inference import (  # noqa: E402
    InferenceConfig,
    PredictionSink,
    TransportFactory,
    documents_from_dir,
    load_predictions,
    predict_batch,
)
from cim_llm.mock_llm import serve  # noqa: E402
from cim_llm.schema import AblationSpec, build_document, serialize  # noqa: E402
from cim_llm.volume_io import ManifestRow, assemble_bundle, read_manifest  # noqa: E402

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger("cim_llm_client")

_PLACEHOLDER = re.compile(r"\$\{\{(\w+)\}\}")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_INPUT = 2


class ExtractionSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    params: ExtractionParams = Field(default_factory=ExtractionParams)
    atlas_config: Optional[str] = None
    atlases: Dict[str, str] = Field(default_factory=dict)


class EvaluationSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    z: float = Z_95


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    extraction: ExtractionSection = Field(default_factory=ExtractionSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)


def format_string_with_env(value: str) -> str:
    def substitute(match: re.Match) -> str:
        env_var_name = match.group(1)
        env_var_value = os.getenv(env_var_name)
        if env_var_value is None:
            logger.warning(f"Environment variable {env_var_name} not found")
            return ""
        return env_var_value

    return _PLACEHOLDER.sub(substitute, value)


def format_env(node: Any) -> Any:
    """
    Replaces placeholders like ${{ENV_VAR}} with environment values,
    recursively through dicts and lists.
    """
    if isinstance(node, dict):
        return {key: format_env(value) for key, value in node.items()}
    if isinstance(node, list):
        return [format_env(value) for value in node]
    if isinstance(node, str):
        return format_string_with_env(node)
    return node


def read_config_json(config_path: Optional[str] = None) -> RunConfig:
    config_path = config_path or os.getenv("CONFIG_PATH")

    if not config_path:
        script_dir = os.path.dirname(os.path.abspath(__file__))
        config_path = os.path.join(script_dir, "config.json")
        logger.info(f"Using default config path: {config_path}")

    try:
        with open(config_path, "r") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Failed to read config file at '{config_path}': {e}") from e

    try:
        config = RunConfig.model_validate(format_env(raw))
    except ValidationError as e:
        raise ConfigError(f"Invalid config at '{config_path}': {e}") from e

    base = Path(config_path).resolve().parent
    extraction = config.extraction
    atlases = {}
    for name, value in extraction.atlases.items():
        atlas_path = _resolve(base, value)
        if atlas_path.is_file():
            atlases[name] = str(atlas_path)
        else:
            logger.warning(f"Atlas '{name}' not found at {atlas_path}; location features will be NULL without it")
    atlas_config = str(_resolve(base, extraction.atlas_config)) if extraction.atlas_config else None
    logger.info(f"Successfully loaded config from {config_path}")
    return config.model_copy(
        update={"extraction": extraction.model_copy(update={"atlases": atlases, "atlas_config": atlas_config})}
    )


def _resolve(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base / path


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    inference_updates = {
        key: value
        for key, value in (
            ("endpoint_url", getattr(args, "endpoint", None)),
            ("model_name", getattr(args, "model", None)),
            ("parallelism", getattr(args, "parallel", None)),
        )
        if value is not None
    }
    extraction = config.extraction
    if getattr(args, "seed", None) is not None:
        extraction = extraction.model_copy(update={"params": extraction.params.model_copy(update={"seed": args.seed})})
    inference = InferenceConfig.model_validate({**config.inference.model_dump(), **inference_updates})
    return config.model_copy(update={"inference": inference, "extraction": extraction})


def extract_subject(row: ManifestRow, section: ExtractionSection):
    """Worker: one subject from manifest row to serialized document."""
    started = time.perf_counter()
    atlas_config = load_atlas_config(section.atlas_config)
    bundle = assemble_bundle(row, section.atlases)
    groups, provenance = extract_all(bundle, section.params, atlas_config)
    doc = build_document(row.subject_id, groups, provenance, bundle.age_years, bundle.sex)
    return serialize(doc), doc.null_groups(), time.perf_counter() - started


def cmd_extract(args: argparse.Namespace, config: RunConfig) -> int:
    rows = read_manifest(args.manifest)
    out_dir = Path(args.out)
    summary_path = out_dir / "extract_summary.csv"
    targets = [out_dir / f"{row.subject_id}.json" for row in rows] + [summary_path]
    existing = [p for p in targets if p.exists()]
    if existing and not args.force:
        raise OutputExistsError(f"{len(existing)} output file(s) exist in {out_dir}; pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)

    workers = args.parallel or 1
    summary = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [(row, pool.submit(extract_subject, row, config.extraction)) for row in rows]
        for row, future in futures:
            try:
                text, null_groups, wall_s = future.result()
            except Exception as e:
                logger.error(f"{row.subject_id}: extraction failed: {e}", exc_info=True)
                summary.append({"subject_id": row.subject_id, "status": "failed", "null_groups": None,
                                "null_group_names": "", "wall_time_s": None, "error": type(e).__name__})
                continue
            write_once(out_dir / f"{row.subject_id}.json", text + "\n", force=args.force)
            summary.append({"subject_id": row.subject_id, "status": "ok", "null_groups": len(null_groups),
                            "null_group_names": ";".join(null_groups), "wall_time_s": round(wall_s, 3), "error": ""})
            logger.info(f"{row.subject_id}: document written ({len(null_groups)} NULL group(s), {wall_s:.1f}s)")

    pd.DataFrame(summary).to_csv(summary_path, index=False)
    failed = sum(item["status"] == "failed" for item in summary)
    logger.info(f"Extraction finished: {len(rows) - failed}/{len(rows)} subjects")
    return EXIT_OK if failed == 0 else EXIT_PARTIAL


def ablation_from_args(args: argparse.Namespace) -> Optional[AblationSpec]:
    drop = sorted(set(args.drop or []))
    if not drop and not args.with_clinical:
        return None
    parts = [f"-- {', '.join(drop)}"] if drop else []
    label = " ".join(parts) if parts else "Baseline"
    if args.with_clinical:
        label = f"{label} + Clinical"
    return AblationSpec(label=label, drop=drop, with_clinical=args.with_clinical)


def cmd_predict(args, config: RunConfig, transport_factory: Optional[TransportFactory] = None) -> int:
    documents = documents_from_dir(args.docs)
    sink_path = Path(args.out) / "predictions.jsonl"
    if args.force and sink_path.exists():
        sink_path.unlink()
    sink = PredictionSink(sink_path)
    before = len(sink.records)
    records = asyncio.run(
        predict_batch(documents, config.inference, ablation_from_args(args), sink, transport_factory)
    )
    failed = [r.subject_id for r in records if r.error]
    logger.info(f"{len(records)} records ({len(sink.records) - before} new), {len(failed)} endpoint failure(s)")
    return EXIT_OK if len(failed) < len(records) or not records else EXIT_PARTIAL


def _select_spec(records, spec_label: Optional[str]):
    labels = sorted({r.spec_label for r in records})
    if spec_label is None:
        spec_label = labels[0] if len(labels) == 1 else "Baseline"
    selected = [r for r in records if r.spec_label == spec_label]
    if records and not selected:
        raise EmptyCohortError(f"no records for configuration '{spec_label}' (found {labels})")
    return selected


def cmd_evaluate(args, config: RunConfig) -> int:
    rows = read_manifest(args.manifest)
    truth = GroundTruth.from_manifest(rows)
    records = _select_spec(load_predictions(args.predictions), args.spec)
    reports, excluded = cohort_reports(records, truth, z=config.evaluation.z)
    extra: Dict[str, Any] = {"characteristics": cohort_characteristics(rows), "excluded_subjects": excluded}
    if args.compare:
        other = _select_spec(load_predictions(args.compare), args.spec)
        extra["agreement"] = compare_models(records, other, truth.idh).model_dump()
    export_reports(reports, args.out, force=args.force, extra=extra)
    print(render_table(reports))
    return EXIT_OK


def cmd_ablate(args, config: RunConfig, transport_factory: Optional[TransportFactory] = None) -> int:
    truth = GroundTruth.from_manifest(read_manifest(args.manifest))
    documents = documents_from_dir(args.docs)
    single = ablation_from_args(args)
    specs: List[AblationSpec] = [single] if single else list(DEFAULT_ABLATIONS)
    out_dir = Path(args.out)
    sink_path = out_dir / "ablation_predictions.jsonl"
    for name in ("ablation.json", "ablation.txt"):
        if (out_dir / name).exists() and not args.force:
            raise OutputExistsError(f"{out_dir / name} exists; pass --force to overwrite")
    if args.force and sink_path.exists():
        sink_path.unlink()
    rows = asyncio.run(
        ablation_run(documents, specs, config.inference, truth, PredictionSink(sink_path),
                     transport_factory, z=config.evaluation.z)
    )
    export_ablation(rows, out_dir, force=args.force)
    print(render_ablation_table(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cim-llm", description="Glioma radiomics toolbox and zero-shot IDH harness")
    parser.add_argument("--config", help="run configuration JSON (default: $CONFIG_PATH or client/config.json)")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    extract = sub.add_parser("extract", help="extract one feature document per subject")
    extract.add_argument("--manifest", required=True)
    extract.add_argument("--out", required=True)
    extract.add_argument("--parallel", type=int, default=None, help="worker processes")
    extract.add_argument("--seed", type=int, default=None)
    extract.add_argument("--force", action="store_true")

    for name, help_text in (("predict", "query the LLM for every document"), ("ablate", "run the ablation study")):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--docs", required=True, help="directory of feature documents")
        cmd.add_argument("--out", required=True)
        cmd.add_argument("--drop", nargs="+", default=[], metavar="GROUP")
        cmd.add_argument("--with-clinical", action="store_true")
        cmd.add_argument("--parallel", type=int, default=None, help="requests in flight")
        cmd.add_argument("--endpoint", default=None)
        cmd.add_argument("--model", default=None)
        cmd.add_argument("--force", action="store_true")
        if name == "ablate":
            cmd.add_argument("--manifest", required=True)

    evaluate = sub.add_parser("evaluate", help="score predictions against the manifest")
    evaluate.add_argument("--predictions", required=True)
    evaluate.add_argument("--manifest", required=True)
    evaluate.add_argument("--out", required=True)
    evaluate.add_argument("--compare", default=None, help="second predictions file for model agreement")
    evaluate.add_argument("--spec", default=None, help="configuration label to score")
    evaluate.add_argument("--force", action="store_true")

    mock = sub.add_parser("mock-llm", help="serve a scripted OpenAI-compatible endpoint")
    mock.add_argument("--scenario", required=True)
    mock.add_argument("--host", default="127.0.0.1")
    mock.add_argument("--port", type=int, default=8808)
    return parser


def main(argv: Optional[List[str]] = None, transport_factory: Optional[TransportFactory] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    # Load environment variables
    load_dotenv()

    try:
        if args.command == "mock-llm":
            serve(args.scenario, host=args.host, port=args.port)
            return EXIT_OK
        config = apply_overrides(read_config_json(args.config), args)
        if args.command == "extract":
            return cmd_extract(args, config)
        if args.command == "predict":
            return cmd_predict(args, config, transport_factory)
        if args.command == "evaluate":
            return cmd_evaluate(args, config)
        return cmd_ablate(args, config, transport_factory)
    except ValidationError as e:
        logger.error(f"Invalid arguments: {e}")
        return EXIT_INPUT
    except CimLlmError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
