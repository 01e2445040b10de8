"""The three-step recommendation pipeline: query generation, candidate
retrieval across catalog indexes, and bootstrap LLM ranking."""

from __future__ import annotations

import contextvars
import dataclasses
import hashlib
import json
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from impress.catalog import ALL_SOURCES, CatalogSource, CatalogStore
from impress.gateway import (
    CallRecord,
    Gateway,
    GenerationParseError,
    Message,
    ModelConfig,
    TokenUsage,
    capture_calls,
)
from impress.index import FlatL2Index, build_indexes

logger = logging.getLogger(__name__)

TAG_DIAGNOSIS = "step1-diagnosis"
TAG_QUERY = "step1-query"
TAG_RETRIEVE = "step2-retrieve"
TAG_RANK = "step3-rank"
STEPS = (TAG_DIAGNOSIS, TAG_QUERY, TAG_RETRIEVE, TAG_RANK)

MAX_PRELIMINARY_SPCS = 8
CANDIDATES_HEADER = "Candidates:"


class EmptyQuery(GenerationParseError):
    pass


class NoCandidates(Exception):
    pass


class PipelineError(Exception):
    """A fatal error inside one pipeline step."""

    def __init__(self, step: str, cause: BaseException):
        super().__init__(f"{step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause


# --------------------------------------------------------------------------
# Conversations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Utterance:
    role: str
    text: str

    def __post_init__(self):
        if self.role not in ("user", "assistant"):
            raise ValueError(f"utterance role must be user or assistant, got {self.role!r}")
        if not self.text.strip():
            raise ValueError("utterance text must be non-empty")


@dataclass(frozen=True)
class Conversation:
    conversation_id: str
    utterances: tuple[Utterance, ...]
    domain_tag: str = ""

    def __post_init__(self):
        if not self.utterances:
            raise ValueError("conversation must have at least one utterance")

    def alternation_violations(self) -> list[int]:
        """Indices whose role breaks the user/assistant alternation starting with user."""
        return [
            i for i, u in enumerate(self.utterances) if u.role != ("user" if i % 2 == 0 else "assistant")
        ]

    def truncated(self, n: int) -> Conversation:
        return dataclasses.replace(self, utterances=self.utterances[: max(1, n)])

    def transcript(self) -> str:
        return "\n".join(f"{u.role.capitalize()}: {u.text.strip()}" for u in self.utterances)

    def to_json(self) -> dict[str, Any]:
        return {
            "conversation_id": self.conversation_id,
            "domain_tag": self.domain_tag,
            "utterances": [{"role": u.role, "text": u.text} for u in self.utterances],
        }


def conversation_from_json(obj: Mapping[str, Any]) -> tuple[Conversation, tuple[str, ...]]:
    """Parse one conversation object; returns it with its (possibly empty) gold SPC ids."""
    if not isinstance(obj, Mapping):
        raise ValueError("conversation must be a JSON object")
    for key in ("conversation_id", "utterances"):
        if key not in obj:
            raise ValueError(f"missing field {key!r}")
    if not isinstance(obj["utterances"], list):
        raise ValueError("utterances must be a list")
    utterances = tuple(Utterance(u["role"], u["text"]) for u in obj["utterances"])
    conv = Conversation(str(obj["conversation_id"]), utterances, str(obj.get("domain_tag", "")))
    return conv, tuple(obj.get("gold_spcs") or ())


def read_conversations(path: str | Path) -> list[tuple[Conversation, tuple[str, ...]]]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(conversation_from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from e
    return out


def write_conversations(path: str | Path, items: Sequence[tuple[Conversation, Sequence[str]]]) -> None:
    with open(path, "w") as f:
        for conv, gold in items:
            obj = conv.to_json()
            if gold:
                obj["gold_spcs"] = list(gold)
            f.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------
# Step 1: query generation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SummaryDiagnosis:
    summary: str
    diagnosis: str
    measures: tuple[str, ...] = ()
    repaired: bool = False

    def to_json(self) -> dict[str, Any]:
        return {"summary": self.summary, "diagnosis": self.diagnosis, "measures": list(self.measures)}


@dataclass(frozen=True)
class PreliminarySPC:
    name: str
    explanation: str

    def query_text(self) -> str:
        return f"{self.name}: {self.explanation}"


@dataclass(frozen=True)
class GeneratedQuery:
    preliminary_spcs: tuple[PreliminarySPC, ...]
    truncated: bool = False
    repaired: bool = False


SYSTEM_PROMPT = (
    "You assist a customer-support platform. You read support conversations and "
    "reason about the user's underlying problem. Always answer with a single fenced "
    "JSON object (```json ... ```) and nothing else."
)


def diagnosis_prompt(conversation: Conversation) -> list[Message]:
    return [
        Message("system", SYSTEM_PROMPT),
        Message(
            "user",
            "Support conversation:\n"
            f"{conversation.transcript()}\n\n"
            "Summarize the issue the user raised, diagnose its root cause, and list plausible "
            "measures to take. Return:\n"
            '{"summary": string, "diagnosis": string, "measures": [string, ...]}',
        ),
    ]


def query_prompt(diagnosis: SummaryDiagnosis, max_entries: int = MAX_PRELIMINARY_SPCS) -> list[Message]:
    return [
        Message("system", SYSTEM_PROMPT),
        Message(
            "user",
            "Conversation summary and diagnosis:\n"
            f"```json\n{json.dumps(diagnosis.to_json(), ensure_ascii=False)}\n```\n\n"
            f"List up to {max_entries} generic solution product categories (kinds of products or "
            "services, not brands) that could help resolve this issue or prevent it from recurring. "
            "Briefly explain each one. Return:\n"
            '{"spcs": [{"name": string, "explanation": string}, ...]}',
        ),
    ]


def _parse_diagnosis(obj: Any) -> SummaryDiagnosis:
    if not isinstance(obj, dict):
        raise ValueError("expected a JSON object")
    summary, diagnosis = obj.get("summary"), obj.get("diagnosis")
    if not isinstance(summary, str) or not summary.strip():
        raise ValueError("summary must be a non-empty string")
    if not isinstance(diagnosis, str) or not diagnosis.strip():
        raise ValueError("diagnosis must be a non-empty string")
    measures = obj.get("measures") or []
    if not isinstance(measures, list):
        raise ValueError("measures must be a list")
    return SummaryDiagnosis(summary.strip(), diagnosis.strip(), tuple(str(m) for m in measures))


def generate_summary_diagnosis(conversation: Conversation, gateway: Gateway, config: ModelConfig) -> SummaryDiagnosis:
    bad = conversation.alternation_violations()
    if bad:
        logger.warning("conversation %s breaks role alternation at %s", conversation.conversation_id, bad)
    res = gateway.complete_json(config, diagnosis_prompt(conversation), TAG_DIAGNOSIS, _parse_diagnosis)
    return dataclasses.replace(res.value, repaired=res.repaired)


def _parse_query(obj: Any) -> list[PreliminarySPC]:
    if isinstance(obj, dict):
        obj = obj.get("spcs")
    if not isinstance(obj, list):
        raise ValueError('expected {"spcs": [...]}')
    if not obj:
        raise EmptyQuery("the SPC list is empty")
    out = []
    for i, e in enumerate(obj):
        if not isinstance(e, dict):
            raise ValueError(f"entry {i} is not an object")
        name, expl = e.get("name"), e.get("explanation")
        if not isinstance(name, str) or not name.strip():
            raise ValueError(f"entry {i} has an empty name")
        if not isinstance(expl, str) or not expl.strip():
            raise ValueError(f"entry {i} ({name}) has an empty explanation")
        out.append(PreliminarySPC(name.strip(), expl.strip()))
    return out


def generate_preliminary_spcs(
    diagnosis: SummaryDiagnosis,
    gateway: Gateway,
    config: ModelConfig,
    max_entries: int = MAX_PRELIMINARY_SPCS,
) -> GeneratedQuery:
    res = gateway.complete_json(config, query_prompt(diagnosis, max_entries), TAG_QUERY, _parse_query)
    entries = res.value
    truncated = len(entries) > max_entries
    if truncated:
        logger.warning("query returned %d SPCs, keeping the first %d", len(entries), max_entries)
    return GeneratedQuery(tuple(entries[:max_entries]), truncated, res.repaired)


# --------------------------------------------------------------------------
# Step 2: candidate retrieval
# --------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Provenance:
    distance: float
    source: CatalogSource
    entry: int
    chunk_id: str


@dataclass(frozen=True)
class RetrievedCandidate:
    spc_id: str
    best_distance: float
    provenance: tuple[Provenance, ...]

    @property
    def best(self) -> Provenance:
        return self.provenance[0]


def retrieve_candidates(
    query: GeneratedQuery,
    indexes: Mapping[CatalogSource, FlatL2Index],
    gateway: Gateway,
    embed_config: ModelConfig,
    k_per_index: int = 5,
    extra_queries: Sequence[str] = (),
) -> list[RetrievedCandidate]:
    """Embed each preliminary SPC as ``"name: explanation"``, take the top
    ``k_per_index`` hits per (entry, index) pair, and union them by SPC.

    Empty indexes are skipped; the result is empty when every index is.
    """
    if not indexes:
        raise ValueError("at least one index must be enabled")
    for idx in indexes.values():
        if idx.embed_model_id and idx.embed_model_id != embed_config.model_id:
            raise ValueError(
                f"index {idx.source.value} was built with {idx.embed_model_id!r}, not {embed_config.model_id!r}"
            )
    texts = [e.query_text() for e in query.preliminary_spcs] + list(extra_queries)
    live = [idx for src, idx in sorted(indexes.items(), key=lambda kv: ALL_SOURCES.index(kv[0])) if len(idx)]
    if not live:
        return []
    vectors = [r.vector for r in gateway.embed_texts(embed_config, texts, TAG_RETRIEVE)]
    found: dict[str, list[Provenance]] = {}
    for entry, vec in enumerate(vectors):
        for idx in live:
            for hit in idx.search(vec, k_per_index):
                found.setdefault(hit.spc_id, []).append(Provenance(hit.distance, idx.source, entry, hit.chunk_id))
    cands = []
    for spc_id, prov in found.items():
        prov = sorted(prov, key=lambda p: (p.distance, ALL_SOURCES.index(p.source), p.entry, p.chunk_id))
        cands.append(RetrievedCandidate(spc_id, prov[0].distance, tuple(prov)))
    cands.sort(key=lambda c: (c.best_distance, c.spc_id))
    return cands


# --------------------------------------------------------------------------
# Step 3: bootstrap ranking
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RankingIteration:
    seed: int
    presented_order: tuple[str, ...]
    returned_order: tuple[str, ...]
    repaired: bool = False


@dataclass(frozen=True)
class AggregatedRanking:
    ordered_spcs: tuple[tuple[str, int], ...]
    iterations: tuple[RankingIteration, ...] = ()

    @property
    def ids(self) -> list[str]:
        return [s for s, _ in self.ordered_spcs]


def shuffled(ids: Sequence[str], seed: int) -> list[str]:
    """Seeded Fisher-Yates shuffle of the id-sorted input."""
    out = sorted(ids)
    random.Random(seed).shuffle(out)
    return out


def repair_ranking(returned: Sequence[str], presented: Sequence[str]) -> tuple[tuple[str, ...], bool]:
    """Drop unknown and repeated ids, then append missing ids in presented order."""
    known = set(presented)
    out, seen = [], set()
    repaired = False
    for r in returned:
        if r in known and r not in seen:
            out.append(r)
            seen.add(r)
        else:
            repaired = True
    missing = [p for p in presented if p not in seen]
    if missing:
        repaired = True
        out.extend(missing)
    return tuple(out), repaired


CandidateContext = Callable[[RetrievedCandidate], tuple[str, str]]


def ranking_prompt(
    diagnosis: SummaryDiagnosis, presented: Sequence[RetrievedCandidate], context: CandidateContext
) -> list[Message]:
    listing = []
    for c in presented:
        name, ctx = context(c)
        listing.append({"id": c.spc_id, "name": name, "context": ctx})
    return [
        Message("system", SYSTEM_PROMPT),
        Message(
            "user",
            "Diagnosis of a support conversation:\n"
            f"```json\n{json.dumps(diagnosis.to_json(), ensure_ascii=False)}\n```\n\n"
            f"{CANDIDATES_HEADER}\n"
            f"```json\n{json.dumps(listing, ensure_ascii=False)}\n```\n\n"
            "Rank all candidates by how well they would help resolve the diagnosed issue or "
            "prevent it from recurring, best first. Use every id exactly once. Return:\n"
            '{"ranking": [id, ...]}',
        ),
    ]


def presented_candidates(messages: Sequence[Message]) -> list[dict[str, str]]:
    """Recover the candidate listing from a ranking prompt (used by mock rankers)."""
    for m in messages:
        if m.role == "user" and CANDIDATES_HEADER in m.text:
            block = m.text.split(CANDIDATES_HEADER, 1)[1]
            block = block.split("```json", 1)[1].split("```", 1)[0]
            return json.loads(block)
    raise ValueError("no candidate listing in messages")


def _parse_ranking(obj: Any) -> list[str]:
    if isinstance(obj, dict):
        obj = obj.get("ranking")
    if not isinstance(obj, list) or not all(isinstance(x, str) for x in obj):
        raise ValueError('expected {"ranking": [id, ...]} with string ids')
    return obj


def _default_context(c: RetrievedCandidate) -> tuple[str, str]:
    return c.spc_id, ""


def rank_iteration(
    diagnosis: SummaryDiagnosis,
    candidates: Sequence[RetrievedCandidate],
    seed: int,
    gateway: Gateway,
    config: ModelConfig,
    context: CandidateContext = _default_context,
) -> RankingIteration:
    """One listwise ranking over a seeded shuffle of the candidates.

    A single candidate needs no LLM call. An unusable reply falls back to
    the presented order (``repaired=True``) instead of failing.
    """
    if not candidates:
        raise ValueError("rank_iteration needs at least one candidate")
    by_id = {c.spc_id: c for c in candidates}
    presented = tuple(shuffled(list(by_id), seed))
    if len(presented) == 1:
        return RankingIteration(seed, presented, presented, False)
    messages = ranking_prompt(diagnosis, [by_id[i] for i in presented], context)
    try:
        res = gateway.complete_json(config, messages, TAG_RANK, _parse_ranking, seed=seed)
    except GenerationParseError as e:
        logger.warning("ranking iteration %d unusable (%s); using presented order", seed, e)
        return RankingIteration(seed, presented, presented, True)
    order, repaired = repair_ranking(res.value, presented)
    return RankingIteration(seed, presented, order, repaired or res.repaired)


def borda_scores(rankings: Sequence[Sequence[str]]) -> dict[str, int]:
    """Item at 1-based rank r of an m-item ranking earns m - r points."""
    scores: dict[str, int] = {}
    for ranking in rankings:
        m = len(ranking)
        for r, spc_id in enumerate(ranking, 1):
            scores[spc_id] = scores.get(spc_id, 0) + (m - r)
    return scores


def aggregate(
    candidates: Sequence[RetrievedCandidate], iterations: Sequence[RankingIteration]
) -> AggregatedRanking:
    scores = borda_scores([it.returned_order for it in iterations])
    ordered = sorted(candidates, key=lambda c: (-scores.get(c.spc_id, 0), c.best_distance, c.spc_id))
    return AggregatedRanking(tuple((c.spc_id, scores.get(c.spc_id, 0)) for c in ordered), tuple(iterations))


def bootstrap_rank(
    diagnosis: SummaryDiagnosis,
    candidates: Sequence[RetrievedCandidate],
    gateway: Gateway,
    config: ModelConfig,
    iterations: int = 3,
    base_seed: int = 0,
    context: CandidateContext = _default_context,
    max_workers: int | None = None,
) -> AggregatedRanking:
    """Run ``iterations`` concurrent ranking passes (seeds ``base_seed + i``)
    and fuse them with a Borda count. Zero iterations keep retrieval order."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if iterations == 0 or not candidates:
        return aggregate(candidates, [])
    seeds = [base_seed + i for i in range(iterations)]

    def one(seed: int) -> RankingIteration:
        return rank_iteration(diagnosis, candidates, seed, gateway, config, context)

    if iterations == 1:
        its = [one(seeds[0])]
    else:
        with ThreadPoolExecutor(max_workers=max_workers or iterations) as pool:
            futures = [pool.submit(contextvars.copy_context().run, one, s) for s in seeds]
            its = [f.result() for f in futures]
    return aggregate(candidates, its)


# --------------------------------------------------------------------------
# Composition
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StepTrace:
    step: str
    wall_ms: float
    calls: tuple[CallRecord, ...]

    @property
    def usage(self) -> TokenUsage:
        total = TokenUsage()
        for c in self.calls:
            total = total + c.usage
        return total


@dataclass(frozen=True)
class Trace:
    conversation_id: str
    steps: tuple[StepTrace, ...]

    @property
    def usage(self) -> TokenUsage:
        total = TokenUsage()
        for s in self.steps:
            total = total + s.usage
        return total

    @property
    def wall_ms(self) -> float:
        return sum(s.wall_ms for s in self.steps)

    def step(self, name: str) -> StepTrace:
        for s in self.steps:
            if s.step == name:
                return s
        raise KeyError(name)


@dataclass(frozen=True)
class Recommendation:
    conversation_id: str
    diagnosis: SummaryDiagnosis
    query: GeneratedQuery
    candidates: tuple[RetrievedCandidate, ...]
    ranking: AggregatedRanking
    trace: Trace

    @property
    def ranked_ids(self) -> list[str]:
        return self.ranking.ids


@dataclass(frozen=True)
class PipelineOptions:
    k_per_index: int = 5
    iterations: int = 3
    base_seed: int = 0
    enabled_sources: tuple[CatalogSource, ...] = ALL_SOURCES
    max_preliminary: int = MAX_PRELIMINARY_SPCS
    # extension point: also embed the diagnosis text as a retrieval query
    query_with_diagnosis: bool = False

    def __post_init__(self):
        if not self.enabled_sources:
            raise ValueError("at least one catalog source must be enabled")
        if self.k_per_index < 1:
            raise ValueError("k_per_index must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def to_json(self) -> dict[str, Any]:
        return {
            "k_per_index": self.k_per_index,
            "iterations": self.iterations,
            "base_seed": self.base_seed,
            "enabled_sources": [s.value for s in self.enabled_sources],
            "max_preliminary": self.max_preliminary,
            "query_with_diagnosis": self.query_with_diagnosis,
        }


def fingerprint_of(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Pipeline:
    """Immutable bundle of backends, catalog indexes and options; safe to
    share across concurrent ``recommend`` calls."""

    gateway: Gateway
    chat_config: ModelConfig
    embed_config: ModelConfig
    store: CatalogStore
    indexes: Mapping[CatalogSource, FlatL2Index]
    options: PipelineOptions = PipelineOptions()
    clock: Callable[[], float] = field(default=time.perf_counter, compare=False)

    @classmethod
    def from_store(
        cls,
        store: CatalogStore,
        gateway: Gateway,
        chat_config: ModelConfig,
        embed_config: ModelConfig,
        options: PipelineOptions = PipelineOptions(),
        **kw,
    ) -> Pipeline:
        return cls(gateway, chat_config, embed_config, store, build_indexes(store, ALL_SOURCES), options, **kw)

    def with_options(self, **changes) -> Pipeline:
        return dataclasses.replace(self, options=dataclasses.replace(self.options, **changes))

    def config_json(self) -> dict[str, Any]:
        return {
            "chat_model": self.chat_config.model_id,
            "chat_temperature": self.chat_config.temperature,
            "embed_model": self.embed_config.model_id,
            "catalog_spcs": len(self.store.universe),
            "catalog_vectors": self.store.n_vectors(),
            **self.options.to_json(),
        }

    def fingerprint(self) -> str:
        return fingerprint_of(self.config_json())

    def enabled_indexes(self) -> dict[CatalogSource, FlatL2Index]:
        return {s: self.indexes[s] for s in self.options.enabled_sources if s in self.indexes}

    def candidate_context(self, c: RetrievedCandidate) -> tuple[str, str]:
        best = c.best
        try:
            text = self.store.chunk_text(c.spc_id, best.source, best.chunk_id)
        except KeyError:
            text = ""
        return self.store.display_name(c.spc_id), text

    def recommend(self, conversation: Conversation) -> Recommendation:
        steps: list[StepTrace] = []
        opts = self.options

        def run(step: str, fn: Callable[[], Any]) -> Any:
            t0 = self.clock()
            with capture_calls() as calls:
                try:
                    out = fn()
                except PipelineError:
                    raise
                except Exception as e:
                    raise PipelineError(step, e) from e
                finally:
                    steps.append(StepTrace(step, (self.clock() - t0) * 1000.0, tuple(calls)))
            return out

        diagnosis = run(TAG_DIAGNOSIS, lambda: generate_summary_diagnosis(conversation, self.gateway, self.chat_config))
        query = run(
            TAG_QUERY,
            lambda: generate_preliminary_spcs(diagnosis, self.gateway, self.chat_config, opts.max_preliminary),
        )

        def step2():
            extra = [f"diagnosis: {diagnosis.diagnosis}"] if opts.query_with_diagnosis else []
            cands = retrieve_candidates(
                query, self.enabled_indexes(), self.gateway, self.embed_config, opts.k_per_index, extra
            )
            if not cands:
                raise NoCandidates("retrieval returned no candidates")
            return cands

        candidates = run(TAG_RETRIEVE, step2)
        ranking = run(
            TAG_RANK,
            lambda: bootstrap_rank(
                diagnosis,
                candidates,
                self.gateway,
                self.chat_config,
                opts.iterations,
                opts.base_seed,
                self.candidate_context,
            ),
        )
        return Recommendation(
            conversation.conversation_id,
            diagnosis,
            query,
            tuple(candidates),
            ranking,
            Trace(conversation.conversation_id, tuple(steps)),
        )
