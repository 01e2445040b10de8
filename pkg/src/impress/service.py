"""HTTP service: ``POST /v1/recommend`` and ``GET /v1/health``."""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
from typing import Literal

from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field, ValidationError, field_validator

from impress import __version__
from impress.gateway import GatewayError
from impress.pipeline import Conversation, Pipeline, PipelineError, Recommendation, Utterance

logger = logging.getLogger(__name__)


class UtteranceIn(BaseModel):
    role: Literal["user", "assistant"]
    text: str

    @field_validator("text")
    @classmethod
    def _non_empty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("text must be non-empty")
        return v


class RecommendRequest(BaseModel):
    conversation_id: str
    domain_tag: str = ""
    utterances: list[UtteranceIn] = Field(min_length=1)
    gold_spcs: list[str] | None = None

    def to_conversation(self) -> Conversation:
        return Conversation(
            self.conversation_id,
            tuple(Utterance(u.role, u.text) for u in self.utterances),
            self.domain_tag,
        )


def response_body(rec: Recommendation, pipeline: Pipeline, trace_id: str) -> dict:
    by_id = {c.spc_id: c for c in rec.candidates}
    usage = rec.trace.usage
    return {
        "diagnosis": rec.diagnosis.to_json(),
        "ranked": [
            {
                "spc_id": spc_id,
                "display_name": pipeline.store.display_name(spc_id),
                "score": score,
                "best_distance": by_id[spc_id].best_distance,
            }
            for spc_id, score in rec.ranking.ordered_spcs
        ],
        "trace_id": trace_id,
        "overhead": {
            "tokens": {"prompt": usage.prompt_tokens, "completion": usage.completion_tokens, "total": usage.total},
            "ms": rec.trace.wall_ms,
        },
    }


def _error(status: int, message: str, **extra) -> JSONResponse:
    return JSONResponse({"error": message, **extra}, status_code=status)


def create_app(pipeline: Pipeline, fingerprint: str, request_timeout_s: float = 30.0) -> FastAPI:
    """Build the service around an immutable pipeline."""
    app = FastAPI(title="impress", version=__version__)

    @app.get("/v1/health")
    def health():
        return {
            "status": "ok",
            "version": __version__,
            "fingerprint": fingerprint,
            "pipeline_fingerprint": pipeline.fingerprint(),
        }

    @app.post("/v1/recommend")
    async def recommend(request: Request):
        raw = await request.body()
        try:
            payload = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            return _error(400, f"malformed JSON body: {e}")
        if not isinstance(payload, dict):
            return _error(400, "body must be a JSON object")
        try:
            req = RecommendRequest.model_validate(payload)
        except ValidationError as e:
            fields = [
                {"field": ".".join(str(p) for p in err["loc"]), "message": err["msg"]} for err in e.errors()
            ]
            return _error(422, "invalid conversation", fields=fields)
        conversation = req.to_conversation()
        body_hash = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
        trace_id = hashlib.sha256(f"{fingerprint}:{body_hash}".encode()).hexdigest()[:16]
        try:
            rec = await asyncio.wait_for(
                run_in_threadpool(pipeline.recommend, conversation), timeout=request_timeout_s
            )
        except asyncio.TimeoutError:
            return _error(504, f"recommendation exceeded {request_timeout_s}s")
        except PipelineError as e:
            if isinstance(e.cause, GatewayError):
                return _error(502, f"backend failure in {e.step}: {e.cause}", step=e.step)
            logger.exception("pipeline failure")
            return _error(500, str(e), step=e.step)
        return response_body(rec, pipeline, trace_id)

    return app
