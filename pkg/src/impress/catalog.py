"""Catalog databases: per-SPC documents from web search and LLM generation,
chunked, embedded, and persisted."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Protocol, Sequence

import httpx
import numpy as np

from impress.gateway import (
    PIPELINE_TEMPERATURE,
    BackendRefusal,
    DimensionMismatch,
    Gateway,
    GenerationParseError,
    Message,
    ModelConfig,
    TransportError,
)

logger = logging.getLogger(__name__)

CATALOG_GEN_TAG = "catalog-gen"
CATALOG_EMBED_TAG = "catalog-embed"
DEFAULT_MAX_CHUNK_TOKENS = 256
MIN_CHUNK_TOKENS = 16
EMPTY_CHUNK_TEXT = "[empty]"

_SLUG = re.compile(r"^[a-z0-9]+(?:[-_][a-z0-9]+)*$")


class CatalogSource(str, Enum):
    WEB_SEARCH_FEATURES = "WebSearchFeatures"
    WEB_SEARCH_USE_CASES = "WebSearchUseCases"
    GEN_DESCRIPTIONS = "GenDescriptions"
    GEN_FEATURES = "GenFeatures"
    GEN_USE_CASES = "GenUseCases"


WEB_SOURCES = (CatalogSource.WEB_SEARCH_FEATURES, CatalogSource.WEB_SEARCH_USE_CASES)
GEN_SOURCES = (CatalogSource.GEN_DESCRIPTIONS, CatalogSource.GEN_FEATURES, CatalogSource.GEN_USE_CASES)
ALL_SOURCES = tuple(CatalogSource)


class SearchTransportError(TransportError):
    pass


class CatalogIoError(OSError):
    pass


@dataclass(frozen=True)
class SPC:
    """A solution product category."""

    spc_id: str
    display_name: str

    def __post_init__(self):
        if not _SLUG.match(self.spc_id):
            raise ValueError(f"spc_id {self.spc_id!r} is not a lowercase slug")
        if not self.display_name.strip():
            raise ValueError("display_name must be non-empty")


def slugify(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")


def check_universe(spcs: Sequence[SPC]) -> None:
    seen = set()
    for s in spcs:
        if s.spc_id in seen:
            raise ValueError(f"duplicate spc_id {s.spc_id!r}")
        seen.add(s.spc_id)


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    text: str
    flagged: bool = False


@dataclass(frozen=True)
class CatalogDocument:
    spc_id: str
    source: CatalogSource
    text: str
    chunks: tuple[Chunk, ...] = ()
    flagged: bool = False
    urls: tuple[str, ...] = ()


@dataclass
class BuildReport:
    """Per-SPC gaps encountered while building a catalog; never fatal."""

    entries: list[dict[str, str]] = field(default_factory=list)

    def add(self, spc_id: str, source: str, kind: str, message: str) -> None:
        logger.warning("catalog gap %s/%s: %s (%s)", spc_id, source, kind, message)
        self.entries.append({"spc_id": spc_id, "source": source, "kind": kind, "message": message})

    def kinds(self, spc_id: str) -> list[str]:
        return [e["kind"] for e in self.entries if e["spc_id"] == spc_id]


# --------------------------------------------------------------------------
# Chunking
# --------------------------------------------------------------------------

_PARA_BREAK = re.compile(r"\n[ \t\r\f\v]*\n")
_SENT_END = re.compile(r"[.!?][\"')\]]*$")


def _chunk_id(i: int) -> str:
    return f"{i:04d}"


def chunk_document(text: str, max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS) -> list[Chunk]:
    """Greedily pack whitespace tokens into chunks of at most ``max_chunk_tokens``.

    Paragraphs are kept whole when they fit; an oversized paragraph is split at
    sentence ends, and an oversized sentence at whitespace. Each chunk is a
    stripped slice of ``text``, so joining the chunks reproduces the text up
    to whitespace at chunk boundaries.
    """
    if max_chunk_tokens < MIN_CHUNK_TOKENS:
        raise ValueError(f"max_chunk_tokens must be >= {MIN_CHUNK_TOKENS}")
    tokens = [(m.start(), m.end()) for m in re.finditer(r"\S+", text)]
    if not tokens:
        return [Chunk(_chunk_id(0), EMPTY_CHUNK_TEXT, flagged=True)]

    # paragraph index of every token
    breaks = [m.start() for m in _PARA_BREAK.finditer(text)]
    para_of, p = [], 0
    for start, _ in tokens:
        while p < len(breaks) and breaks[p] < start:
            p += 1
        para_of.append(p)

    # token indices grouped as paragraphs -> sentences
    paragraphs: list[list[list[int]]] = []
    for i, (start, end) in enumerate(tokens):
        if i == 0 or para_of[i] != para_of[i - 1]:
            paragraphs.append([[]])
        paragraphs[-1][-1].append(i)
        if _SENT_END.search(text[start:end]):
            paragraphs[-1].append([])
    for sentences in paragraphs:
        if not sentences[-1]:
            sentences.pop()

    spans: list[tuple[int, int]] = []  # inclusive token index ranges
    cur: list[int] = []

    def flush():
        nonlocal cur
        if cur:
            spans.append((cur[0], cur[-1]))
            cur = []

    def pack(units: list[list[int]]):
        nonlocal cur
        for unit in units:
            if len(cur) + len(unit) <= max_chunk_tokens:
                cur = cur + unit
                continue
            flush()
            while len(unit) > max_chunk_tokens:
                spans.append((unit[0], unit[max_chunk_tokens - 1]))
                unit = unit[max_chunk_tokens:]
            cur = list(unit)

    for sentences in paragraphs:
        para = [i for sent in sentences for i in sent]
        if len(cur) + len(para) <= max_chunk_tokens:
            cur = cur + para
        elif len(para) <= max_chunk_tokens:
            flush()
            cur = para
        else:
            flush()
            pack(sentences)
    flush()

    return [
        Chunk(_chunk_id(n), text[tokens[a][0] : tokens[b][1]])
        for n, (a, b) in enumerate(spans)
    ]


def make_document(
    spc_id: str,
    source: CatalogSource,
    text: str,
    max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
    flagged: bool = False,
    urls: Sequence[str] = (),
) -> CatalogDocument:
    return CatalogDocument(
        spc_id, source, text, tuple(chunk_document(text, max_chunk_tokens)), flagged, tuple(urls)
    )


# --------------------------------------------------------------------------
# Web-search catalogs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchResult:
    title: str
    content: str
    url: str = ""


class SearchClient(Protocol):
    def search(self, query: str, max_results: int) -> list[SearchResult]: ...


class HttpSearchClient:
    """JSON-over-HTTP search: POST ``{"query", "max_results"}``, expects
    ``{"results": [{"title", "content", "url"}, ...]}`` ranked best first."""

    def __init__(self, endpoint: str, api_key: str | None = None, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.api_key = api_key
        self.client = client or httpx.Client(timeout=30.0)

    def search(self, query, max_results):
        body: dict[str, Any] = {"query": query, "max_results": max_results}
        if self.api_key:
            body["api_key"] = self.api_key
        try:
            resp = self.client.post(self.endpoint, json=body)
            resp.raise_for_status()
            data = resp.json()
        except (httpx.HTTPError, ValueError) as e:
            raise SearchTransportError(f"search failed for {query!r}: {e}") from e
        return [
            SearchResult(r.get("title", ""), r.get("content", ""), r.get("url", ""))
            for r in data.get("results", [])
        ]


class FixtureSearchClient:
    """Reads ``<slug(query)>.json`` (a list of result objects) from a directory.

    A missing file yields no results.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def search(self, query, max_results):
        path = self.directory / f"{slugify(query)}.json"
        if not path.exists():
            return []
        data = json.loads(path.read_text())
        return [SearchResult(r.get("title", ""), r.get("content", ""), r.get("url", "")) for r in data][
            :max_results
        ]


WEB_QUERY_TEMPLATES = {
    CatalogSource.WEB_SEARCH_FEATURES: "{name} features",
    CatalogSource.WEB_SEARCH_USE_CASES: "{name} use cases",
}


def _compose_snippets(results: Sequence[SearchResult]) -> str:
    parts = []
    for r in results:
        piece = "\n".join(x.strip() for x in (r.title, r.content) if x.strip())
        if piece:
            parts.append(piece)
    return "\n\n".join(parts)


def fetch_web_docs(
    spcs: Sequence[SPC],
    search_client: SearchClient,
    results_per_query: int = 5,
    report: BuildReport | None = None,
    max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
) -> dict[tuple[str, CatalogSource], CatalogDocument]:
    """Build the two web-search documents for every SPC.

    Failed or empty searches produce a flagged document holding only the
    SPC's display name, and are listed in ``report``.
    """
    if not spcs:
        raise ValueError("spcs must be non-empty")
    report = report if report is not None else BuildReport()
    docs = {}
    for spc in spcs:
        for source, template in WEB_QUERY_TEMPLATES.items():
            query = template.format(name=spc.display_name)
            try:
                results = search_client.search(query, results_per_query)[:results_per_query]
            except TransportError as e:
                report.add(spc.spc_id, source.value, "SearchTransportError", str(e))
                results = None
            text = _compose_snippets(results or [])
            if not text:
                if results is not None:
                    report.add(spc.spc_id, source.value, "EmptyResults", f"no results for {query!r}")
                docs[(spc.spc_id, source)] = make_document(
                    spc.spc_id, source, spc.display_name, max_chunk_tokens, flagged=True
                )
                continue
            docs[(spc.spc_id, source)] = make_document(
                spc.spc_id, source, text, max_chunk_tokens, urls=[r.url for r in results if r.url]
            )
    return docs


# --------------------------------------------------------------------------
# Generated catalogs
# --------------------------------------------------------------------------

CATALOG_SYSTEM_PROMPT = (
    "You write concise, factual catalog entries for generic product and service "
    "categories. Always answer with a single fenced JSON object."
)


def catalog_prompt(spc: SPC) -> list[Message]:
    return [
        Message("system", CATALOG_SYSTEM_PROMPT),
        Message(
            "user",
            f"Product category: {spc.display_name}\n\n"
            "Return a JSON object with exactly these fields:\n"
            '  "description": a brief description of the category (string),\n'
            '  "features": a list of its key features (list of strings),\n'
            '  "use_cases": exactly three example use cases (list of 3 strings).\n'
            "Wrap the object in ```json ... ```.",
        ),
    ]


@dataclass(frozen=True)
class GeneratedEntry:
    description: str
    features: tuple[str, ...]
    use_cases: tuple[str, ...]


def _nonempty_strings(value: Any, name: str) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(x, str) and x.strip() for x in value):
        raise ValueError(f"{name} must be a list of non-empty strings")
    return tuple(x.strip() for x in value)


def parse_generated_entry(obj: Any) -> GeneratedEntry:
    if not isinstance(obj, dict):
        raise ValueError("expected a JSON object")
    desc = obj.get("description")
    if not isinstance(desc, str) or not desc.strip():
        raise ValueError("description must be a non-empty string")
    features = _nonempty_strings(obj.get("features"), "features")
    if not features:
        raise ValueError("features must not be empty")
    use_cases = _nonempty_strings(obj.get("use_cases"), "use_cases")
    if len(use_cases) != 3:
        raise ValueError(f"use_cases must hold exactly 3 entries, got {len(use_cases)}")
    return GeneratedEntry(desc.strip(), features, use_cases)


def generate_catalog_docs(
    spcs: Sequence[SPC],
    gateway: Gateway,
    config: ModelConfig,
    report: BuildReport | None = None,
    max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
) -> dict[tuple[str, CatalogSource], CatalogDocument]:
    """One structured generation per SPC, split into the three generated sources."""
    if config.temperature != PIPELINE_TEMPERATURE:
        logger.warning("catalog generation at temperature %s (expected %s)", config.temperature, PIPELINE_TEMPERATURE)
    report = report if report is not None else BuildReport()
    docs = {}
    for spc in spcs:
        try:
            entry = gateway.complete_json(config, catalog_prompt(spc), CATALOG_GEN_TAG, parse_generated_entry).value
        except (GenerationParseError, BackendRefusal, TransportError) as e:
            for source in GEN_SOURCES:
                report.add(spc.spc_id, source.value, type(e).__name__, str(e))
                docs[(spc.spc_id, source)] = make_document(
                    spc.spc_id, source, spc.display_name, max_chunk_tokens, flagged=True
                )
            continue
        texts = {
            CatalogSource.GEN_DESCRIPTIONS: entry.description,
            CatalogSource.GEN_FEATURES: "\n".join(entry.features),
            CatalogSource.GEN_USE_CASES: "\n\n".join(entry.use_cases),
        }
        for source, text in texts.items():
            docs[(spc.spc_id, source)] = make_document(spc.spc_id, source, text, max_chunk_tokens)
    return docs


# --------------------------------------------------------------------------
# Store
# --------------------------------------------------------------------------


@dataclass
class CatalogStore:
    """Embedded catalog: one float32 matrix per source, rows aligned with
    ``(spc_id, chunk_id)`` metadata. Treat as immutable once built."""

    universe: tuple[SPC, ...]
    documents: dict[tuple[str, CatalogSource], CatalogDocument]
    vectors: dict[CatalogSource, np.ndarray]
    row_meta: dict[CatalogSource, tuple[tuple[str, str], ...]]
    embed_model_id: str
    dimension: int

    @property
    def sources(self) -> tuple[CatalogSource, ...]:
        return tuple(s for s in ALL_SOURCES if s in self.vectors)

    def display_name(self, spc_id: str) -> str:
        return self._names()[spc_id]

    def _names(self) -> dict[str, str]:
        return {s.spc_id: s.display_name for s in self.universe}

    def chunk_text(self, spc_id: str, source: CatalogSource, chunk_id: str) -> str:
        for c in self.documents[(spc_id, source)].chunks:
            if c.chunk_id == chunk_id:
                return c.text
        raise KeyError((spc_id, source, chunk_id))

    def embedding(self, spc_id: str, source: CatalogSource, chunk_id: str) -> np.ndarray:
        i = self.row_meta[source].index((spc_id, chunk_id))
        return self.vectors[source][i]

    def n_vectors(self) -> int:
        return sum(len(m) for m in self.row_meta.values())

    def __eq__(self, other):
        if not isinstance(other, CatalogStore):
            return NotImplemented
        return (
            self.universe == other.universe
            and self.documents == other.documents
            and self.row_meta == other.row_meta
            and self.embed_model_id == other.embed_model_id
            and self.dimension == other.dimension
            and self.vectors.keys() == other.vectors.keys()
            and all(
                self.vectors[s].dtype == other.vectors[s].dtype
                and np.array_equal(self.vectors[s], other.vectors[s])
                for s in self.vectors
            )
        )


def build_store(
    spcs: Sequence[SPC],
    documents: dict[tuple[str, CatalogSource], CatalogDocument],
    gateway: Gateway,
    embed_config: ModelConfig,
    batch_size: int = 256,
) -> CatalogStore:
    """Embed every chunk of every document, batched per source."""
    check_universe(spcs)
    ids = {s.spc_id for s in spcs}
    for (spc_id, source), doc in documents.items():
        if spc_id not in ids:
            raise ValueError(f"document for unknown SPC {spc_id!r}")
        if not doc.chunks:
            raise ValueError(f"document {spc_id}/{source.value} is not chunked")
    vectors, meta = {}, {}
    dimension = None
    for source in ALL_SOURCES:
        rows, texts = [], []
        for spc in spcs:
            doc = documents.get((spc.spc_id, source))
            if doc is None:
                continue
            for c in doc.chunks:
                rows.append((spc.spc_id, c.chunk_id))
                texts.append(c.text)
        if not rows:
            continue
        embedded = []
        for i in range(0, len(texts), batch_size):
            embedded.extend(gateway.embed_texts(embed_config, texts[i : i + batch_size], CATALOG_EMBED_TAG))
        mat = np.array([e.vector for e in embedded], dtype=np.float32)
        if dimension is None:
            dimension = mat.shape[1]
        elif mat.shape[1] != dimension:
            raise DimensionMismatch(f"{source.value} vectors have dimension {mat.shape[1]}, expected {dimension}")
        vectors[source] = mat
        meta[source] = tuple(rows)
    if dimension is None:
        dimension = 0
    return CatalogStore(tuple(spcs), dict(documents), vectors, meta, embed_config.model_id, dimension)


def build_catalog(
    spcs: Sequence[SPC],
    gateway: Gateway,
    chat_config: ModelConfig,
    embed_config: ModelConfig,
    search_client: SearchClient | None,
    results_per_query: int = 5,
    max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
) -> tuple[CatalogStore, BuildReport]:
    """Full build: web-search docs (if a client is given), generated docs, embeddings."""
    report = BuildReport()
    docs = {}
    if search_client is not None:
        docs.update(fetch_web_docs(spcs, search_client, results_per_query, report, max_chunk_tokens))
    docs.update(generate_catalog_docs(spcs, gateway, chat_config, report, max_chunk_tokens))
    return build_store(spcs, docs, gateway, embed_config), report


def _doc_to_json(doc: CatalogDocument) -> dict:
    return {
        "spc_id": doc.spc_id,
        "source": doc.source.value,
        "text": doc.text,
        "flagged": doc.flagged,
        "urls": list(doc.urls),
        "chunks": [{"chunk_id": c.chunk_id, "text": c.text, "flagged": c.flagged} for c in doc.chunks],
    }


def _doc_from_json(d: dict) -> CatalogDocument:
    return CatalogDocument(
        d["spc_id"],
        CatalogSource(d["source"]),
        d["text"],
        tuple(Chunk(c["chunk_id"], c["text"], c.get("flagged", False)) for c in d["chunks"]),
        d.get("flagged", False),
        tuple(d.get("urls", [])),
    )


def _dump(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def save_store(store: CatalogStore, path: str | Path) -> None:
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        _dump(root / "universe.json", [{"spc_id": s.spc_id, "display_name": s.display_name} for s in store.universe])
        for (spc_id, source), doc in store.documents.items():
            d = root / "docs" / source.value
            d.mkdir(parents=True, exist_ok=True)
            _dump(d / f"{spc_id}.json", _doc_to_json(doc))
        (root / "vectors").mkdir(exist_ok=True)
        for source, mat in store.vectors.items():
            (root / "vectors" / f"{source.value}.f32bin").write_bytes(mat.astype("<f4").tobytes())
            _dump(
                root / "vectors" / f"{source.value}.meta.json",
                {
                    "embed_model_id": store.embed_model_id,
                    "dimension": store.dimension,
                    "rows": [list(r) for r in store.row_meta[source]],
                },
            )
    except OSError as e:
        raise CatalogIoError(f"cannot write catalog to {root}: {e}") from e


def load_store(path: str | Path) -> CatalogStore:
    root = Path(path)
    try:
        universe = tuple(SPC(**d) for d in json.loads((root / "universe.json").read_text()))
        documents = {}
        docs_root = root / "docs"
        for source in ALL_SOURCES:
            d = docs_root / source.value
            if not d.is_dir():
                continue
            for f in sorted(d.glob("*.json")):
                doc = _doc_from_json(json.loads(f.read_text()))
                documents[(doc.spc_id, doc.source)] = doc
        vectors, meta = {}, {}
        model_id, dimension = "", 0
        for source in ALL_SOURCES:
            mpath = root / "vectors" / f"{source.value}.meta.json"
            if not mpath.exists():
                continue
            m = json.loads(mpath.read_text())
            model_id, dimension = m["embed_model_id"], int(m["dimension"])
            rows = tuple((r[0], r[1]) for r in m["rows"])
            raw = np.frombuffer((root / "vectors" / f"{source.value}.f32bin").read_bytes(), dtype="<f4")
            if raw.size != len(rows) * dimension:
                raise DimensionMismatch(f"{source.value}: {raw.size} floats for {len(rows)}x{dimension} matrix")
            vectors[source] = raw.reshape(len(rows), dimension).astype(np.float32)
            meta[source] = rows
    except OSError as e:
        raise CatalogIoError(f"cannot read catalog from {root}: {e}") from e
    # keep documents in universe order so equality with the built store is order-independent
    ordered = {
        (s.spc_id, src): documents[(s.spc_id, src)]
        for src in ALL_SOURCES
        for s in universe
        if (s.spc_id, src) in documents
    }
    return CatalogStore(universe, ordered, vectors, meta, model_id, dimension)


def load_spcs(path: str | Path) -> list[SPC]:
    """Read an SPC list: JSON array of ``{"spc_id", "display_name"}`` or of plain names."""
    data = json.loads(Path(path).read_text())
    spcs = [SPC(slugify(d), d) if isinstance(d, str) else SPC(d["spc_id"], d["display_name"]) for d in data]
    check_universe(spcs)
    return spcs
