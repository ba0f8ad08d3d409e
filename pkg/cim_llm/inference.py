"""Zero-shot IDH prompting against an OpenAI-compatible chat-completions endpoint."""

import asyncio
import logging
import os
import re
import time
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import httpx
from pydantic import BaseModel, ConfigDict, Field
from tenacity import AsyncRetrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from cim_llm.errors import (
    AuthFailureError,
    InferenceError,
    InferenceTimeoutError,
    MalformedResponseError,
    RateLimitedError,
    ServerError,
)
from cim_llm.schema import AblationSpec, SubjectFeatureDocument, parse, serialize
from cim_llm.volume_io import IDHLabel

logger = logging.getLogger(__name__)

PROMPT_PREAMBLE = (
    "You are an experienced radiologist entasked with discriminating a brain glioma as either "
    "'IDH mutant' or 'IDH wildtype'. You are presented a JSON file encapsulating semantic (visual) "
    "attributes and quantitative metrics about a brain tumor (glioma)—extracted from 3D "
    "multiparametric MRI sequences (FLAIR, T1-contrast enhanced, and T2-weighted) and a co-registered "
    "3D segmentation map of tumor subregions. Note that we do not have information on the necrosis "
    "component of the tumor. Provide a compact response with compact reasoning. Structure your "
    "response as follows:  <**Final IDH type**> \\n <Reasoning>."
)

_SEP = r"[\s_\-]*"
_MUTANT = re.compile(rf"(?<![a-z])(?:idh{_SEP})?mut(?:ant|ated|ation)")
_WILDTYPE = re.compile(rf"(?<![a-z])(?:idh{_SEP})?wild{_SEP}type|(?<![a-z])idh{_SEP}wt(?![a-z])")
_RETRYABLE = (InferenceTimeoutError, RateLimitedError, ServerError)


class InferenceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    endpoint_url: str = "http://127.0.0.1:8808/v1"
    model_name: str = "gpt-4o"
    temperature: float = Field(0.0, ge=0.0)
    max_tokens: int = Field(1028, gt=0)
    api_key_env: str = "OPENAI_API_KEY"
    request_timeout_s: float = Field(60.0, gt=0.0)
    max_retries: int = Field(3, ge=0)
    parallelism: int = Field(4, ge=1)
    rate_limit_rps: float = Field(0.0, ge=0.0)
    backoff_base_s: float = Field(1.0, ge=0.0)
    backoff_max_s: float = Field(30.0, ge=0.0)
    split_system_prompt: bool = False


class PredictionRecord(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    subject_id: str
    model_name: str
    parsed_label: IDHLabel
    ambiguous: bool = False
    raw_response: Optional[str] = None
    prompt_text: str = ""
    document_json: str = ""
    latency_s: float = 0.0
    attempt_count: int = 0
    error: Optional[str] = None
    spec_label: str = "Baseline"
    spec_hash: str = ""
    schema_version: str = ""

    @property
    def resume_key(self) -> Tuple[str, str, str, str]:
        return (self.subject_id, self.model_name, self.spec_hash, self.schema_version)


def build_prompt(doc: SubjectFeatureDocument) -> str:
    return f"{PROMPT_PREAMBLE}\n{serialize(doc)}"


def build_messages(prompt: str, config: InferenceConfig) -> List[Dict[str, str]]:
    if config.split_system_prompt and prompt.startswith(PROMPT_PREAMBLE + "\n"):
        return [
            {"role": "system", "content": PROMPT_PREAMBLE},
            {"role": "user", "content": prompt[len(PROMPT_PREAMBLE) + 1:]},
        ]
    return [{"role": "user", "content": prompt}]


def _first_match(text: str) -> Optional[Tuple[IDHLabel, bool]]:
    lowered = text.lower()
    mutant = _MUTANT.search(lowered)
    wildtype = _WILDTYPE.search(lowered)
    if mutant is None and wildtype is None:
        return None
    if wildtype is None or (mutant is not None and mutant.start() < wildtype.start()):
        return IDHLabel.MUTANT, wildtype is not None
    return IDHLabel.WILDTYPE, mutant is not None


def scan_label(response: Optional[str]) -> Tuple[IDHLabel, bool]:
    """Map a model reply to (label, ambiguous).

    The first non-empty line is tried first; when it names neither class the
    earliest match anywhere in the reply is used. If both classes appear in the
    scanned span the earlier one wins and the result is flagged ambiguous.
    """
    if not response:
        return IDHLabel.UNPARSEABLE, False
    first_line = next((line for line in response.splitlines() if line.strip()), "")
    found = _first_match(first_line) or _first_match(response)
    if found is None:
        return IDHLabel.UNPARSEABLE, False
    return found


def parse_label(response: Optional[str]) -> IDHLabel:
    return scan_label(response)[0]


class RateLimiter:
    """Token bucket with a capacity of one request, refilled at ``requests_per_second``."""

    def __init__(self, requests_per_second: float = 0.0):
        self.requests_per_second = requests_per_second
        self._next_slot = 0.0
        self._lock = asyncio.Lock()

    async def acquire(self):
        if self.requests_per_second <= 0:
            return
        async with self._lock:
            now = time.monotonic()
            wait_time = self._next_slot - now
            self._next_slot = max(now, self._next_slot) + 1.0 / self.requests_per_second
        if wait_time > 0:
            await asyncio.sleep(wait_time)


class QueryResult(BaseModel):
    content: str
    attempts: int
    latency_s: float


def _headers(config: InferenceConfig) -> Dict[str, str]:
    headers = {"Content-Type": "application/json"}
    api_key = os.getenv(config.api_key_env)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    return headers


async def _post_once(client: httpx.AsyncClient, config: InferenceConfig, messages: List[Dict[str, str]]) -> str:
    url = f"{config.endpoint_url.rstrip('/')}/chat/completions"
    body = {
        "model": config.model_name,
        "messages": messages,
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
    }
    try:
        response = await client.post(url, json=body, headers=_headers(config))
    except httpx.TimeoutException as e:
        raise InferenceTimeoutError(f"request timed out after {config.request_timeout_s}s: {e}") from e
    except httpx.TransportError as e:
        raise ServerError(f"transport failure: {e}") from e

    status = response.status_code
    if status == 429:
        raise RateLimitedError("endpoint returned 429 Too Many Requests")
    if status in (401, 403):
        raise AuthFailureError(f"endpoint rejected credentials (HTTP {status})")
    if status >= 500:
        raise ServerError(f"endpoint returned HTTP {status}")
    if status != 200:
        raise MalformedResponseError(f"unexpected HTTP {status}: {response.text[:200]}")
    try:
        content = response.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as e:
        raise MalformedResponseError(f"response lacks choices[0].message.content: {e}") from e
    if not isinstance(content, str):
        raise MalformedResponseError("choices[0].message.content is not a string")
    return content


async def query(
    config: InferenceConfig,
    prompt: str,
    transport: Optional[httpx.AsyncBaseTransport] = None,
    limiter: Optional[RateLimiter] = None,
) -> QueryResult:
    """Send one prompt on a client of its own; retries timeouts, 429 and 5xx with exponential backoff."""
    messages = build_messages(prompt, config)
    attempts = 0
    started = time.perf_counter()
    retrying = AsyncRetrying(
        stop=stop_after_attempt(config.max_retries + 1),
        wait=wait_exponential(multiplier=config.backoff_base_s, max=config.backoff_max_s),
        retry=retry_if_exception_type(_RETRYABLE),
        reraise=True,
    )
    async with httpx.AsyncClient(transport=transport, timeout=config.request_timeout_s) as client:
        try:
            async for attempt in retrying:
                with attempt:
                    attempts += 1
                    if limiter is not None:
                        await limiter.acquire()
                    logger.debug(f"POST attempt {attempts} to {config.endpoint_url}")
                    content = await _post_once(client, config, messages)
        except InferenceError as e:
            e.attempts = attempts
            raise
    return QueryResult(content=content, attempts=attempts, latency_s=time.perf_counter() - started)


class PredictionSink:
    """Append-only JSON-lines store of prediction records, keyed for resumption."""

    def __init__(self, path):
        self.path = Path(path)
        self.records: Dict[Tuple[str, str, str, str], PredictionRecord] = {}
        self._load()

    def _load(self):
        if not self.path.exists():
            return
        raw = self.path.read_text(encoding="utf-8")
        if raw and not raw.endswith("\n"):
            # a crash mid-write leaves a partial last line; drop it
            raw = raw[: raw.rfind("\n") + 1]
            self.path.write_text(raw, encoding="utf-8")
            logger.warning(f"Dropped a truncated trailing record from {self.path}")
        for line in raw.splitlines():
            if not line.strip():
                continue
            record = PredictionRecord.model_validate_json(line)
            self.records[record.resume_key] = record

    def __contains__(self, key) -> bool:
        return key in self.records

    def get(self, key) -> Optional[PredictionRecord]:
        return self.records.get(key)

    def append(self, record: PredictionRecord):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as f:
            f.write(record.model_dump_json() + "\n")
            f.flush()
        self.records[record.resume_key] = record


def load_predictions(path) -> List[PredictionRecord]:
    return sorted(PredictionSink(path).records.values(), key=lambda r: (r.spec_label, r.subject_id))


TransportFactory = Callable[[], Optional[httpx.AsyncBaseTransport]]


async def predict_batch(
    documents: Iterable[SubjectFeatureDocument],
    config: InferenceConfig,
    ablation: Optional[AblationSpec] = None,
    sink: Optional[PredictionSink] = None,
    transport_factory: Optional[TransportFactory] = None,
    limiter: Optional[RateLimiter] = None,
) -> List[PredictionRecord]:
    """Predict every document with at most ``config.parallelism`` requests in flight.

    Subjects already present in ``sink`` under the same resume key are not
    re-queried. Endpoint failures become unparseable records carrying the
    error class name.
    """
    ablation = ablation or AblationSpec()
    limiter = limiter or RateLimiter(config.rate_limit_rps)
    semaphore = asyncio.Semaphore(config.parallelism)
    if not os.getenv(config.api_key_env):
        logger.warning(f"{config.api_key_env} is not set; requests are sent without credentials")

    async def predict_one(doc: SubjectFeatureDocument) -> PredictionRecord:
        key = (doc.subject_id, config.model_name, ablation.spec_hash, doc.schema_version)
        if sink is not None and key in sink:
            return sink.get(key)
        ablated = ablation.apply(doc)
        prompt = build_prompt(ablated)
        fields = dict(
            subject_id=doc.subject_id,
            model_name=config.model_name,
            prompt_text=prompt,
            document_json=serialize(ablated),
            spec_label=ablation.label,
            spec_hash=ablation.spec_hash,
            schema_version=doc.schema_version,
        )
        async with semaphore:
            transport = transport_factory() if transport_factory else None
            try:
                result = await query(config, prompt, transport=transport, limiter=limiter)
            except InferenceError as e:
                logger.error(f"{doc.subject_id}: {type(e).__name__} after {e.attempts} attempt(s): {e}")
                record = PredictionRecord(
                    parsed_label=IDHLabel.UNPARSEABLE,
                    attempt_count=e.attempts,
                    error=type(e).__name__,
                    **fields,
                )
            else:
                label, ambiguous = scan_label(result.content)
                if ambiguous:
                    logger.warning(f"{doc.subject_id}: reply names both classes, kept '{label.value}'")
                record = PredictionRecord(
                    parsed_label=label,
                    ambiguous=ambiguous,
                    raw_response=result.content,
                    latency_s=result.latency_s,
                    attempt_count=result.attempts,
                    **fields,
                )
        if sink is not None:
            sink.append(record)
        return record

    records = await asyncio.gather(*(predict_one(doc) for doc in documents))
    return sorted(records, key=lambda r: r.subject_id)


def documents_from_dir(docs_dir) -> List[SubjectFeatureDocument]:
    paths = sorted(Path(docs_dir).glob("*.json"))
    return [parse(p.read_text(encoding="utf-8")) for p in paths]

