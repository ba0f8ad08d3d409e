"""A scripted OpenAI-compatible chat endpoint for offline runs and tests."""

import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, List, Optional

import uvicorn
from pydantic import BaseModel, ConfigDict, Field
from starlette.applications import Starlette
from starlette.requests import Request
from starlette.responses import JSONResponse
from starlette.routing import Route

from cim_llm.errors import ConfigError

logger = logging.getLogger(__name__)


class ReplyRule(BaseModel):
    """Overrides the reply when every named group is absent (or NULL) / present."""

    model_config = ConfigDict(extra="forbid")

    reply: str
    when_absent: List[str] = Field(default_factory=list)
    when_present: List[str] = Field(default_factory=list)
    subjects: Optional[List[str]] = None

    def matches(self, subject_id: Optional[str], document: Dict[str, Any]) -> bool:
        if self.subjects is not None and subject_id not in self.subjects:
            return False
        absent = all(document.get(g) is None for g in self.when_absent)
        present = all(document.get(g) is not None for g in self.when_present)
        return absent and present


class Scenario(BaseModel):
    model_config = ConfigDict(extra="forbid")

    default_reply: str = "**IDH wildtype**\nNo scenario reply configured for this subject."
    replies: Dict[str, str] = Field(default_factory=dict)
    rules: List[ReplyRule] = Field(default_factory=list)
    status_script: Dict[str, List[int]] = Field(default_factory=dict)

    def reply_for(self, subject_id: Optional[str], document: Dict[str, Any]) -> str:
        for rule in self.rules:
            if rule.matches(subject_id, document):
                return rule.reply
        return self.replies.get(subject_id, self.default_reply)


def load_scenario(path) -> Scenario:
    try:
        return Scenario.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot load mock scenario {path}: {e}") from e


def _embedded_document(messages: List[Dict[str, Any]]) -> Dict[str, Any]:
    content = messages[-1]["content"]
    start = content.index("{")
    document = json.loads(content[start:])
    if not isinstance(document, dict):
        raise ValueError("embedded document is not an object")
    return document


def create_app(scenario: Scenario) -> Starlette:
    # per-subject count of requests served, for status scripts and connection accounting
    served: Dict[str, int] = defaultdict(int)

    async def chat_completions(request: Request) -> JSONResponse:
        try:
            body = await request.json()
            document = _embedded_document(body["messages"])
        except (ValueError, KeyError, IndexError, TypeError) as e:
            return JSONResponse({"error": {"message": f"bad request: {e}"}}, status_code=400)

        subject_id = document.get("subject_id")
        attempt = served[subject_id]
        served[subject_id] += 1
        script = scenario.status_script.get(subject_id, [])
        if attempt < len(script) and script[attempt] != 200:
            logger.info(f"mock: {subject_id} attempt {attempt + 1} -> HTTP {script[attempt]}")
            return JSONResponse({"error": {"message": "scripted failure"}}, status_code=script[attempt])

        reply = scenario.reply_for(subject_id, document)
        return JSONResponse(
            {
                "id": f"mock-{subject_id}-{attempt + 1}",
                "object": "chat.completion",
                "model": body.get("model", "mock"),
                "choices": [
                    {"index": 0, "message": {"role": "assistant", "content": reply}, "finish_reason": "stop"}
                ],
            }
        )

    async def health(request: Request) -> JSONResponse:
        return JSONResponse({"status": "ok", "served": sum(served.values())})

    app = Starlette(
        routes=[
            Route("/chat/completions", chat_completions, methods=["POST"]),
            Route("/v1/chat/completions", chat_completions, methods=["POST"]),
            Route("/health", health, methods=["GET"]),
        ]
    )
    app.state.served = served
    app.state.scenario = scenario
    return app


def serve(scenario_path, host: str = "127.0.0.1", port: int = 8808):
    app = create_app(load_scenario(scenario_path))
    logger.info(f"Mock LLM listening on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")
