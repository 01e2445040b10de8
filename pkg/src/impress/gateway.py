"""Chat-completion and embedding access with retries and a token/time ledger.

Two kinds of backend sit behind :class:`Gateway`: HTTP clients speaking the
common ``chat/completions`` / ``embeddings`` JSON shapes, and deterministic
mocks (:class:`MockChatBackend`, :class:`HashEmbedder`) used for tests and the
offline demo. Every call is recorded in a :class:`Ledger` under a caller
supplied tag.
"""

from __future__ import annotations

import contextvars
import hashlib
import json
import logging
import math
import os
import random
import re
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Protocol, Sequence, TypeVar

import httpx
import numpy as np

logger = logging.getLogger(__name__)

PIPELINE_TEMPERATURE = 0.3
SIMULATION_TEMPERATURE = 1.0

ROLES = ("system", "user", "assistant")

T = TypeVar("T")


class GatewayError(Exception):
    """Base class for backend access failures."""


class TransportError(GatewayError):
    pass


class TransientError(TransportError):
    """A failure worth retrying (network error, HTTP 429 or >= 500, empty body)."""


class EmptyResponse(TransientError):
    pass


class AuthError(GatewayError):
    pass


class BackendRefusal(GatewayError):
    pass


class DimensionMismatch(GatewayError, ValueError):
    pass


class GenerationParseError(GatewayError, ValueError):
    pass


def count_tokens(text: str) -> int:
    """Whitespace token count used by the mocks and by chunking."""
    return len(text.split())


@dataclass(frozen=True)
class ModelConfig:
    model_id: str
    endpoint: str = "mock://"
    temperature: float = PIPELINE_TEMPERATURE
    max_output_tokens: int = 1024
    api_key_ref: str = "IMPRESS_LLM_API_KEY"

    def __post_init__(self):
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        if not self.endpoint:
            raise ValueError("endpoint must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: TokenUsage) -> TokenUsage:
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )


@dataclass(frozen=True)
class Message:
    role: str
    text: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class ChatExchange:
    messages: tuple[Message, ...]
    response_text: str
    usage: TokenUsage
    latency_ms: float
    attempts: int = 1


@dataclass(frozen=True)
class EmbeddingResult:
    vector: tuple[float, ...]
    usage: TokenUsage

    @property
    def dimension(self) -> int:
        return len(self.vector)


@dataclass(frozen=True)
class CallRecord:
    tag: str
    usage: TokenUsage
    latency_ms: float
    attempts: int = 1
    items: int = 1


@dataclass(frozen=True)
class LedgerRow:
    tag: str
    call_count: int
    item_count: int
    usage: TokenUsage
    latency_quartiles: tuple[float, float, float]


class Ledger:
    """Thread-safe per-call record of token usage and latency."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._records: list[CallRecord] = []

    def record(self, rec: CallRecord) -> None:
        with self._lock:
            self._records.append(rec)
        for capture in _captures.get():
            capture.append(rec)

    def records(self) -> list[CallRecord]:
        with self._lock:
            return list(self._records)

    def mark(self) -> int:
        with self._lock:
            return len(self._records)

    def since(self, mark: int) -> list[CallRecord]:
        with self._lock:
            return list(self._records[mark:])

    def reset(self) -> None:
        with self._lock:
            self._records.clear()

    def snapshot(self) -> list[LedgerRow]:
        return summarize(self.records())


def summarize(records: Sequence[CallRecord]) -> list[LedgerRow]:
    """Group call records by tag, in order of first appearance."""
    grouped: dict[str, list[CallRecord]] = {}
    for rec in records:
        grouped.setdefault(rec.tag, []).append(rec)
    rows = []
    for tag, recs in grouped.items():
        usage = TokenUsage()
        for r in recs:
            usage = usage + r.usage
        q1, q2, q3 = np.percentile([r.latency_ms for r in recs], [25, 50, 75])
        rows.append(
            LedgerRow(
                tag=tag,
                call_count=len(recs),
                item_count=sum(r.items for r in recs),
                usage=usage,
                latency_quartiles=(float(q1), float(q2), float(q3)),
            )
        )
    return rows


DEFAULT_LEDGER = Ledger()


def snapshot_ledger() -> list[LedgerRow]:
    return DEFAULT_LEDGER.snapshot()


class _Capture:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.records: list[CallRecord] = []

    def append(self, rec: CallRecord) -> None:
        with self._lock:
            self.records.append(rec)


_captures: contextvars.ContextVar[tuple[_Capture, ...]] = contextvars.ContextVar(
    "impress_captures", default=()
)


@contextmanager
def capture_calls() -> Iterator[list[CallRecord]]:
    """Collect the call records made in the current context.

    Worker threads only contribute if they run inside a copy of this context
    (``contextvars.copy_context().run``).
    """
    cap = _Capture()
    token = _captures.set(_captures.get() + (cap,))
    try:
        yield cap.records
    finally:
        _captures.reset(token)


# --------------------------------------------------------------------------
# Backends
# --------------------------------------------------------------------------


@dataclass
class BackendReply:
    text: str
    usage: TokenUsage | None = None
    latency_ms: float | None = None


class ChatBackend(Protocol):
    def chat(self, config: ModelConfig, messages: Sequence[Message], tag: str, seed: int | None = None) -> BackendReply: ...


class EmbedBackend(Protocol):
    def embed(self, config: ModelConfig, texts: Sequence[str]) -> tuple[list[list[float]], TokenUsage | None]: ...


def _api_key(config: ModelConfig) -> str | None:
    return os.environ.get(config.api_key_ref) if config.api_key_ref else None


def _raise_for_status(resp: httpx.Response) -> None:
    if resp.status_code in (401, 403):
        raise AuthError(f"HTTP {resp.status_code} from {resp.request.url}")
    if resp.status_code == 429 or resp.status_code >= 500:
        raise TransientError(f"HTTP {resp.status_code} from {resp.request.url}")
    if resp.status_code >= 400:
        raise TransportError(f"HTTP {resp.status_code} from {resp.request.url}: {resp.text[:200]}")


class HttpChatBackend:
    """Client for an OpenAI-compatible ``chat/completions`` endpoint."""

    def __init__(self, client: httpx.Client | None = None, timeout: float = 60.0):
        self.client = client or httpx.Client(timeout=timeout)

    def chat(self, config, messages, tag, seed=None):
        body: dict[str, Any] = {
            "model": config.model_id,
            "messages": [{"role": m.role, "content": m.text} for m in messages],
            "temperature": config.temperature,
            "max_tokens": config.max_output_tokens,
        }
        if seed is not None:
            body["seed"] = seed
        headers = {}
        key = _api_key(config)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self.client.post(config.endpoint, json=body, headers=headers)
        except httpx.TransportError as e:
            raise TransientError(str(e)) from e
        _raise_for_status(resp)
        data = resp.json()
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            text = ""
        usage = None
        if isinstance(data.get("usage"), dict):
            u = data["usage"]
            usage = TokenUsage(int(u.get("prompt_tokens", 0)), int(u.get("completion_tokens", 0)))
        return BackendReply(text, usage)


class HttpEmbedBackend:
    """Client for an OpenAI-compatible ``embeddings`` endpoint."""

    def __init__(self, client: httpx.Client | None = None, timeout: float = 60.0):
        self.client = client or httpx.Client(timeout=timeout)

    def embed(self, config, texts):
        headers = {}
        key = _api_key(config)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self.client.post(
                config.endpoint, json={"model": config.model_id, "input": list(texts)}, headers=headers
            )
        except httpx.TransportError as e:
            raise TransientError(str(e)) from e
        _raise_for_status(resp)
        data = resp.json()
        items = sorted(data["data"], key=lambda d: d.get("index", 0))
        vectors = [list(map(float, d["embedding"])) for d in items]
        usage = None
        if isinstance(data.get("usage"), dict):
            usage = TokenUsage(int(data["usage"].get("prompt_tokens", 0)), 0)
        return vectors, usage


class MockChatBackend:
    """Scripted chat backend keyed by ledger tag.

    A script entry may be a fixed string, a list consumed in order (the last
    element repeats), or a callable receiving the message list. An entry for
    the tag ``"*"`` serves as the fallback. ``fail_first`` makes the first N
    calls raise :class:`TransientError`; ``fixed_usage`` overrides the
    whitespace tokenizer.
    """

    def __init__(
        self,
        script: dict[str, Any] | None = None,
        fixed_usage: TokenUsage | None = None,
        latency_ms: float = 0.0,
        fail_first: int = 0,
        delay_s: float = 0.0,
    ):
        self.script = dict(script or {})
        self.fixed_usage = fixed_usage
        self.latency_ms = latency_ms
        self.fail_first = fail_first
        self.delay_s = delay_s
        self.calls: list[tuple[str, tuple[Message, ...]]] = []
        self._positions: dict[str, int] = {}
        self._lock = threading.Lock()

    def chat(self, config, messages, tag, seed=None):
        with self._lock:
            self.calls.append((tag, tuple(messages)))
            if self.fail_first > 0:
                self.fail_first -= 1
                raise TransientError("scripted transient failure")
            entry = self.script.get(tag, self.script.get("*"))
            if entry is None:
                raise BackendRefusal(f"mock has no script for tag {tag!r}")
            if isinstance(entry, list):
                pos = self._positions.get(tag, 0)
                self._positions[tag] = pos + 1
                entry = entry[min(pos, len(entry) - 1)]
        if self.delay_s:
            time.sleep(self.delay_s)
        text = entry(messages) if callable(entry) else entry
        if isinstance(text, (dict, list)):
            text = json.dumps(text)
        usage = self.fixed_usage or TokenUsage(
            sum(count_tokens(m.text) for m in messages), count_tokens(text)
        )
        return BackendReply(text, usage, self.latency_ms)


class HashEmbedder:
    """Deterministic feature-hashing embedder.

    Lower-cased word tokens are hashed (blake2b) into ``dimension`` signed
    buckets and the result is L2-normalized, so texts sharing vocabulary land
    close together. Texts without word characters map to the zero vector.
    """

    def __init__(self, dimension: int = 8, fixed_usage: TokenUsage | None = None):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.fixed_usage = fixed_usage

    def vector(self, text: str) -> list[float]:
        v = np.zeros(self.dimension)
        for tok in re.findall(r"\w+", text.lower()):
            h = hashlib.blake2b(tok.encode(), digest_size=8).digest()
            n = int.from_bytes(h, "little")
            v[n % self.dimension] += 1.0 if (n >> 63) & 1 else -1.0
        norm = np.linalg.norm(v)
        if norm > 0:
            v /= norm
        return [float(x) for x in v.astype(np.float32)]

    def embed(self, config, texts):
        usage = self.fixed_usage or TokenUsage(sum(count_tokens(t) for t in texts), 0)
        return [self.vector(t) for t in texts], usage


# --------------------------------------------------------------------------
# Gateway
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RetryPolicy:
    retry_limit: int = 3
    base_delay_s: float = 0.25
    factor: float = 2.0

    def delay(self, attempt: int, rng: random.Random) -> float:
        # full jitter
        return rng.uniform(0.0, self.base_delay_s * self.factor**attempt)


_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def extract_json(text: str) -> Any:
    """Parse the JSON payload of a reply, preferring the last fenced block."""
    blocks = _FENCE.findall(text)
    candidate = blocks[-1] if blocks else text
    candidate = candidate.strip()
    try:
        return json.loads(candidate)
    except json.JSONDecodeError:
        start, end = candidate.find("{"), candidate.rfind("}")
        if 0 <= start < end:
            return json.loads(candidate[start : end + 1])
        raise


@dataclass(frozen=True)
class JsonResult:
    value: Any
    repaired: bool
    exchanges: tuple[ChatExchange, ...]


@dataclass
class Gateway:
    chat_backend: ChatBackend
    embed_backend: EmbedBackend
    ledger: Ledger = field(default_factory=lambda: DEFAULT_LEDGER)
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    sleep: Callable[[float], None] = time.sleep
    rng: random.Random = field(default_factory=random.Random)

    def _with_retries(self, fn: Callable[[], T]) -> tuple[T, int]:
        attempt = 0
        while True:
            attempt += 1
            try:
                return fn(), attempt
            except TransientError as e:
                if attempt > self.retry.retry_limit:
                    raise
                wait = self.retry.delay(attempt - 1, self.rng)
                logger.warning("transient backend failure (%s), attempt %d, retrying in %.2fs", e, attempt, wait)
                self.sleep(wait)

    def complete_chat(
        self,
        config: ModelConfig,
        messages: Sequence[Message],
        ledger_tag: str,
        seed: int | None = None,
    ) -> ChatExchange:
        messages = tuple(messages)
        if not messages:
            raise ValueError("messages must be non-empty")
        if messages[0].role not in ("system", "user"):
            raise ValueError("first message must have role system or user")

        def attempt() -> tuple[BackendReply, float]:
            t0 = time.perf_counter()
            reply = self.chat_backend.chat(config, messages, ledger_tag, seed)
            elapsed = (time.perf_counter() - t0) * 1000.0
            if not reply.text.strip():
                raise EmptyResponse(f"empty response for tag {ledger_tag!r}")
            return reply, elapsed

        try:
            (reply, elapsed), attempts = self._with_retries(attempt)
        except EmptyResponse as e:
            raise BackendRefusal(f"{e} after retries") from e
        usage = reply.usage or TokenUsage(
            sum(count_tokens(m.text) for m in messages), count_tokens(reply.text)
        )
        latency = reply.latency_ms if reply.latency_ms is not None else elapsed
        self.ledger.record(CallRecord(ledger_tag, usage, latency, attempts))
        return ChatExchange(messages, reply.text, usage, latency, attempts)

    def embed_texts(self, config: ModelConfig, texts: Sequence[str], ledger_tag: str) -> list[EmbeddingResult]:
        texts = list(texts)
        if not texts:
            raise ValueError("texts must be non-empty")
        if any(not t.strip() for t in texts):
            raise ValueError("every text must be non-empty after trimming")
        t0 = time.perf_counter()
        (vectors, usage), attempts = self._with_retries(lambda: self.embed_backend.embed(config, texts))
        latency = (time.perf_counter() - t0) * 1000.0
        if len(vectors) != len(texts):
            raise DimensionMismatch(f"backend returned {len(vectors)} vectors for {len(texts)} texts")
        dims = {len(v) for v in vectors}
        if len(dims) != 1 or 0 in dims:
            raise DimensionMismatch(f"inconsistent embedding lengths {sorted(dims)}")
        if not all(math.isfinite(x) for v in vectors for x in v):
            raise DimensionMismatch("non-finite embedding entry")
        usage = usage or TokenUsage(sum(count_tokens(t) for t in texts), 0)
        self.ledger.record(CallRecord(ledger_tag, usage, latency, attempts, items=len(texts)))
        # usage is attributed to the batch; per-item results carry their own share of prompt tokens
        return [
            EmbeddingResult(tuple(v), TokenUsage(count_tokens(t), 0)) for v, t in zip(vectors, texts)
        ]

    def complete_json(
        self,
        config: ModelConfig,
        messages: Sequence[Message],
        ledger_tag: str,
        validate: Callable[[Any], T],
        seed: int | None = None,
    ) -> JsonResult:
        """Ask for a fenced JSON object; on a parse or validation failure,
        re-prompt once with the error appended.

        ``validate`` receives the parsed JSON and returns the domain value or
        raises ``ValueError``/``KeyError``/``TypeError``.
        """
        messages = list(messages)
        exchanges = []
        last_error: Exception | None = None
        for round_ in range(2):
            ex = self.complete_chat(config, messages, ledger_tag, seed)
            exchanges.append(ex)
            try:
                value = validate(extract_json(ex.response_text))
                return JsonResult(value, round_ > 0, tuple(exchanges))
            except (ValueError, KeyError, TypeError) as e:
                last_error = e
                messages = messages + [
                    Message("assistant", ex.response_text),
                    Message(
                        "user",
                        f"Your previous reply could not be used: {e}. "
                        "Reply again with a single fenced JSON object that follows the requested format.",
                    ),
                ]
        if isinstance(last_error, GenerationParseError):
            raise last_error
        raise GenerationParseError(f"{ledger_tag}: {last_error}") from last_error
