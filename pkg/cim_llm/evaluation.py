"""Cohort statistics, subtype-recall ablations and report rendering."""

import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from sklearn.metrics import f1_score

from cim_llm.errors import EmptyCohortError, EvaluationError, MissingGroundTruthError, OutputExistsError, ZeroTrialsError
from cim_llm.inference import (
    InferenceConfig,
    PredictionRecord,
    PredictionSink,
    RateLimiter,
    TransportFactory,
    predict_batch,
)
from cim_llm.schema import AblationSpec, SubjectFeatureDocument
from cim_llm.volume_io import IDHLabel, ManifestRow, Subtype

logger = logging.getLogger(__name__)

Z_95 = 1.959964
OVERALL = "Overall"
DASH = "---"

DEFAULT_ABLATIONS: Tuple[AblationSpec, ...] = (
    AblationSpec(label="Baseline"),
    AblationSpec(label="-- Volumetric Measures", drop=["volumetric_measures"]),
    AblationSpec(label="-- Location Features", drop=["location"]),
    AblationSpec(label="-- Mass Effect", drop=["mass_effect"]),
    AblationSpec(label="-- T2-FLAIR Mismatch", drop=["t2_flair_mismatch"]),
    AblationSpec(label="-- Tumor Morphology", drop=["tumor_morphology"]),
    AblationSpec(label="Baseline + Clinical", with_clinical=True),
)


def wilson_interval(k: int, n: int, z: float = Z_95) -> Tuple[float, float]:
    """Wilson score interval for k successes in n trials, clamped to [0, 1]."""
    if n < 1:
        raise ZeroTrialsError("Wilson interval needs at least one trial")
    if not 0 <= k <= n:
        raise EvaluationError(f"successes k={k} outside [0, n={n}]")
    p = k / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


class Rate(BaseModel):
    """A proportion with its Wilson interval; ``value`` is None when undefined (n == 0)."""

    model_config = ConfigDict(frozen=True)

    k: int
    n: int
    value: Optional[float] = None
    low: Optional[float] = None
    high: Optional[float] = None

    @classmethod
    def of(cls, k: int, n: int, z: float = Z_95) -> "Rate":
        if n == 0:
            return cls(k=k, n=n)
        low, high = wilson_interval(k, n, z)
        return cls(k=k, n=n, value=k / n, low=low, high=high)

    def render(self) -> str:
        if self.value is None:
            return DASH
        return f"{100 * self.value:.2f} ({100 * self.low:.2f}–{100 * self.high:.2f})"


class ConfusionCounts(BaseModel):
    """Positive class is IDH-mutant; an unparseable reply counts against the true class."""

    model_config = ConfigDict(frozen=True)

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[IDHLabel, IDHLabel]]) -> "ConfusionCounts":
        counts = dict(tp=0, fp=0, tn=0, fn=0)
        for truth, predicted in pairs:
            if truth is IDHLabel.MUTANT:
                counts["tp" if predicted is IDHLabel.MUTANT else "fn"] += 1
            else:
                counts["tn" if predicted is IDHLabel.WILDTYPE else "fp"] += 1
        return cls(**counts)


class CohortReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    cohort: str
    n: int
    accuracy: Rate
    sensitivity: Rate
    specificity: Rate
    f1: float
    f1_kind: str
    subtype_recalls: Dict[str, Optional[float]]
    geometric_mean_recall: Optional[float]
    unparseable_rate: float
    ambiguous_rate: float
    mean_latency_s: Optional[float]
    confusion: ConfusionCounts


def geometric_mean(values: Sequence[float]) -> Optional[float]:
    if not values:
        return None
    return float(np.prod(values) ** (1.0 / len(values)))


def _scored_binary(truth: IDHLabel, predicted: IDHLabel) -> int:
    # unparseable is mapped to the wrong class so it is always scored as a miss
    if predicted is IDHLabel.UNPARSEABLE:
        return 1 - truth.binary
    return predicted.binary


def cohort_metrics(
    records: Sequence[PredictionRecord],
    truth: Mapping[str, IDHLabel],
    subtypes: Optional[Mapping[str, Optional[Subtype]]] = None,
    cohort: str = OVERALL,
    z: float = Z_95,
) -> CohortReport:
    if not records:
        raise EmptyCohortError(f"cohort '{cohort}' has no prediction records")
    missing = [r.subject_id for r in records if truth.get(r.subject_id) not in (IDHLabel.MUTANT, IDHLabel.WILDTYPE)]
    if missing:
        raise MissingGroundTruthError(f"{len(missing)} subject(s) lack an IDH ground truth", missing)
    subtypes = subtypes or {}

    pairs = [(truth[r.subject_id], r.parsed_label) for r in records]
    counts = ConfusionCounts.from_pairs(pairs)
    y_true = [t.binary for t, _ in pairs]
    y_pred = [_scored_binary(t, p) for t, p in pairs]
    classes = sorted(set(y_true))
    if len(classes) == 1:
        f1_kind = "binary"
        f1 = f1_score(y_true, y_pred, average="binary", pos_label=classes[0], zero_division=0)
    else:
        f1_kind = "macro"
        f1 = f1_score(y_true, y_pred, average="macro", labels=sorted(set(y_true) | set(y_pred)), zero_division=0)

    recalls: Dict[str, Optional[float]] = {}
    for subtype in Subtype:
        members = [(t, p) for (t, p), r in zip(pairs, records) if subtypes.get(r.subject_id) is subtype]
        recalls[subtype.short] = sum(t is p for t, p in members) / len(members) if members else None
    present = [v for v in recalls.values() if v is not None]

    latencies = [r.latency_s for r in records if r.error is None and r.raw_response is not None]
    return CohortReport(
        cohort=cohort,
        n=len(records),
        accuracy=Rate.of(counts.tp + counts.tn, counts.n, z),
        sensitivity=Rate.of(counts.tp, counts.tp + counts.fn, z),
        specificity=Rate.of(counts.tn, counts.tn + counts.fp, z),
        f1=float(f1),
        f1_kind=f1_kind,
        subtype_recalls=recalls,
        geometric_mean_recall=geometric_mean(present),
        unparseable_rate=sum(r.parsed_label is IDHLabel.UNPARSEABLE for r in records) / len(records),
        ambiguous_rate=sum(r.ambiguous for r in records) / len(records),
        mean_latency_s=float(np.mean(latencies)) if latencies else None,
        confusion=counts,
    )


class GroundTruth(BaseModel):
    idh: Dict[str, IDHLabel]
    subtype: Dict[str, Optional[Subtype]]
    cohort: Dict[str, str]

    @classmethod
    def from_manifest(cls, rows: Iterable[ManifestRow]) -> "GroundTruth":
        rows = list(rows)
        return cls(
            idh={r.subject_id: r.idh_label for r in rows if r.idh_label is not None},
            subtype={r.subject_id: r.subtype for r in rows},
            cohort={r.subject_id: r.cohort for r in rows},
        )


def cohort_reports(
    records: Sequence[PredictionRecord], truth: GroundTruth, z: float = Z_95
) -> Tuple[List[CohortReport], List[str]]:
    """Per-cohort reports followed by the pooled Overall row; subjects without ground truth are excluded."""
    scored = [r for r in records if r.subject_id in truth.idh]
    excluded = sorted(r.subject_id for r in records if r.subject_id not in truth.idh)
    if excluded:
        logger.warning(f"{len(excluded)} subject(s) without ground truth excluded: {', '.join(excluded)}")
    if not scored:
        raise EmptyCohortError("no scorable prediction records")

    cohorts: Dict[str, List[PredictionRecord]] = {}
    for record in scored:
        cohorts.setdefault(truth.cohort.get(record.subject_id, "default"), []).append(record)
    reports = [
        cohort_metrics(members, truth.idh, truth.subtype, cohort=name, z=z)
        for name, members in sorted(cohorts.items())
    ]
    reports.append(cohort_metrics(scored, truth.idh, truth.subtype, cohort=OVERALL, z=z))
    return reports, excluded


class AblationRow(BaseModel):
    spec: AblationSpec
    report: CohortReport


async def ablation_run(
    documents: Sequence[SubjectFeatureDocument],
    specs: Sequence[AblationSpec],
    config: InferenceConfig,
    truth: GroundTruth,
    sink: Optional[PredictionSink] = None,
    transport_factory: Optional[TransportFactory] = None,
    z: float = Z_95,
) -> List[AblationRow]:
    """Run every ablation spec over the cohort; rows come back in ``specs`` order."""
    limiter = RateLimiter(config.rate_limit_rps)
    scored = [d for d in documents if d.subject_id in truth.idh]
    rows = []
    for spec in specs:
        logger.info(f"Ablation '{spec.label}' over {len(scored)} subjects")
        records = await predict_batch(scored, config, spec, sink, transport_factory, limiter)
        rows.append(AblationRow(spec=spec, report=cohort_metrics(records, truth.idh, truth.subtype, z=z)))
    return rows


class ModelAgreement(BaseModel):
    n: int
    agree_correct: int
    agree_wrong: int
    disagree: int
    disagree_a_correct: int
    disagree_b_correct: int


def compare_models(
    records_a: Sequence[PredictionRecord],
    records_b: Sequence[PredictionRecord],
    truth: Mapping[str, IDHLabel],
) -> ModelAgreement:
    a = {r.subject_id: r.parsed_label for r in records_a}
    b = {r.subject_id: r.parsed_label for r in records_b}
    shared = sorted(set(a) & set(b) & set(truth))
    if not shared:
        raise EmptyCohortError("the two prediction sets share no scorable subject")
    counts = dict(agree_correct=0, agree_wrong=0, disagree=0, disagree_a_correct=0, disagree_b_correct=0)
    for sid in shared:
        if a[sid] is b[sid]:
            counts["agree_correct" if a[sid] is truth[sid] else "agree_wrong"] += 1
            continue
        counts["disagree"] += 1
        counts["disagree_a_correct"] += a[sid] is truth[sid]
        counts["disagree_b_correct"] += b[sid] is truth[sid]
    return ModelAgreement(n=len(shared), **counts)


def cohort_characteristics(rows: Iterable[ManifestRow]) -> Dict[str, object]:
    frame = pd.DataFrame(
        [
            {
                "age_years": r.age_years,
                "sex": r.sex.value if r.sex else "unknown",
                "idh": r.idh_label.value if r.idh_label else "unknown",
                "subtype": r.subtype.short if r.subtype else "unknown",
            }
            for r in rows
        ]
    )
    if frame.empty:
        raise EmptyCohortError("manifest has no subjects")
    ages = frame["age_years"].dropna().astype(float)
    n = len(frame)

    def tally(column: str) -> Dict[str, Dict[str, float]]:
        counts = frame[column].value_counts().sort_index()
        return {key: {"n": int(v), "pct": round(100.0 * v / n, 2)} for key, v in counts.items()}

    return {
        "n": n,
        "age_mean": round(float(ages.mean()), 2) if len(ages) else None,
        "age_sd": round(float(ages.std(ddof=1)), 2) if len(ages) > 1 else None,
        "age_unknown": int(n - len(ages)),
        "sex": tally("sex"),
        "idh": tally("idh"),
        "subtype": tally("subtype"),
    }


def _fmt(value: Optional[float], scale: float = 1.0) -> str:
    return DASH if value is None else f"{scale * value:.2f}"


def render_table(reports: Sequence[CohortReport]) -> str:
    frame = pd.DataFrame(
        [
            {
                "Cohort": r.cohort,
                "N": r.n,
                "Accuracy": r.accuracy.render(),
                "Sensitivity": r.sensitivity.render(),
                "Specificity": r.specificity.render(),
                "F1": f"{100 * r.f1:.2f} ({r.f1_kind})",
                "Unparseable": f"{100 * r.unparseable_rate:.2f}",
            }
            for r in reports
        ]
    )
    return frame.to_string(index=False)


def render_ablation_table(rows: Sequence[AblationRow]) -> str:
    frame = pd.DataFrame(
        [
            {
                "Configuration": row.spec.label,
                "Astro": _fmt(row.report.subtype_recalls.get("astro")),
                "Oligo": _fmt(row.report.subtype_recalls.get("oligo")),
                "GBM": _fmt(row.report.subtype_recalls.get("gbm")),
                "Geo. mean": _fmt(row.report.geometric_mean_recall),
            }
            for row in rows
        ]
    )
    return frame.to_string(index=False, justify="left")


def write_once(path: Path, text: str, force: bool = False) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise OutputExistsError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def export_reports(
    reports: Sequence[CohortReport],
    out_dir,
    force: bool = False,
    extra: Optional[Dict[str, object]] = None,
) -> List[Path]:
    out_dir = Path(out_dir)
    payload = {"reports": [r.model_dump(mode="json") for r in reports], **(extra or {})}
    confusion = pd.DataFrame([{"cohort": r.cohort, **r.confusion.model_dump()} for r in reports])
    confusion_path = out_dir / "confusion.csv"
    for path in (out_dir / "report.json", out_dir / "report.txt", confusion_path):
        if path.exists() and not force:
            raise OutputExistsError(f"{path} exists; pass --force to overwrite")
    written = [
        write_once(out_dir / "report.json", json.dumps(payload, indent=2, sort_keys=True), force),
        write_once(out_dir / "report.txt", render_table(reports) + "\n", force),
    ]
    confusion.to_csv(confusion_path, index=False)
    return written + [confusion_path]


def export_ablation(rows: Sequence[AblationRow], out_dir, force: bool = False) -> List[Path]:
    out_dir = Path(out_dir)
    payload = [{"label": row.spec.label, **row.model_dump(mode="json")} for row in rows]
    return [
        write_once(out_dir / "ablation.json", json.dumps(payload, indent=2, sort_keys=True), force),
        write_once(out_dir / "ablation.txt", render_ablation_table(rows) + "\n", force),
    ]
