"""Ranking metrics, dataset evaluation, ablation suites and overhead reports."""

from __future__ import annotations

import contextvars
import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from impress.catalog import ALL_SOURCES, CatalogSource
from impress.pipeline import (
    STEPS,
    Conversation,
    RetrievedCandidate,
    Trace,
    fingerprint_of,
    read_conversations,
)

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 3, 5)


def mrr_at_k(ranked: Sequence[str], gold: Iterable[str], k: int) -> float:
    """Reciprocal rank of the first gold item within the top k, else 0."""
    gold = set(gold)
    if k < 1:
        raise ValueError("k must be >= 1")
    if not gold:
        raise ValueError("gold set must be non-empty")
    for r, item in enumerate(ranked[:k], 1):
        if item in gold:
            return 1.0 / r
    return 0.0


def recall_at_k(ranked: Sequence[str], gold: Iterable[str], k: int) -> float:
    """Fraction of gold items that appear in the top k."""
    gold = set(gold)
    if k < 1:
        raise ValueError("k must be >= 1")
    if not gold:
        raise ValueError("gold set must be non-empty")
    return len(gold.intersection(ranked[:k])) / len(gold)


@dataclass(frozen=True)
class LabeledConversation:
    conversation: Conversation
    gold_spcs: frozenset[str]

    def __post_init__(self):
        if not self.gold_spcs:
            raise ValueError(f"{self.conversation.conversation_id}: gold_spcs must be non-empty")


def load_dataset(path: str | Path, universe: Iterable[str] | None = None) -> list[LabeledConversation]:
    items = []
    known = set(universe) if universe is not None else None
    for conv, gold in read_conversations(path):
        if known is not None and not set(gold) <= known:
            raise ValueError(f"{conv.conversation_id}: gold SPCs {sorted(set(gold) - known)} not in catalog")
        items.append(LabeledConversation(conv, frozenset(gold)))
    return items


class Recommender(Protocol):
    def recommend(self, conversation: Conversation) -> Any: ...


@dataclass(frozen=True)
class ConversationResult:
    conversation_id: str
    gold: frozenset[str]
    ranked_ids: tuple[str, ...]
    candidates: tuple[RetrievedCandidate, ...] = ()
    trace: Trace | None = None
    error: str | None = None


@dataclass
class MetricReport:
    dataset_id: str
    label: str
    n_conversations: int
    n_failures: int
    mrr_at: dict[int, float]
    recall_at: dict[int, float]
    config: dict[str, Any] = field(default_factory=dict)
    x: int | None = None
    results: list[ConversationResult] = field(default_factory=list, repr=False, compare=False)

    @property
    def fingerprint(self) -> str:
        return fingerprint_of(self.config)


def _pipeline_config(pipeline: Any) -> dict[str, Any]:
    fn = getattr(pipeline, "config_json", None)
    return fn() if callable(fn) else {"recommender": type(pipeline).__name__}


def _run_one(pipeline: Recommender, item: LabeledConversation) -> ConversationResult:
    cid = item.conversation.conversation_id
    try:
        rec = pipeline.recommend(item.conversation)
    except Exception as e:  # scored as a miss, counted in n_failures
        logger.warning("conversation %s failed: %s", cid, e)
        return ConversationResult(cid, item.gold_spcs, (), error=f"{type(e).__name__}: {e}")
    return ConversationResult(
        cid,
        item.gold_spcs,
        tuple(rec.ranked_ids),
        tuple(getattr(rec, "candidates", ())),
        getattr(rec, "trace", None),
    )


def score_results(
    results: Sequence[ConversationResult],
    ks: Sequence[int],
    dataset_id: str = "dataset",
    label: str = "",
    config: dict[str, Any] | None = None,
    x: int | None = None,
) -> MetricReport:
    n = len(results)
    mrr = {k: float(np.mean([mrr_at_k(r.ranked_ids, r.gold, k) for r in results])) if n else 0.0 for k in ks}
    rec = {k: float(np.mean([recall_at_k(r.ranked_ids, r.gold, k) for r in results])) if n else 0.0 for k in ks}
    return MetricReport(
        dataset_id,
        label,
        n,
        sum(r.error is not None for r in results),
        mrr,
        rec,
        dict(config or {}),
        x,
        list(results),
    )


def evaluate_dataset(
    dataset: Sequence[LabeledConversation],
    pipeline: Recommender,
    ks: Sequence[int] = DEFAULT_KS,
    dataset_id: str = "dataset",
    label: str = "",
    max_workers: int = 1,
    x: int | None = None,
) -> MetricReport:
    """Run the recommender on every conversation; metrics are unweighted
    means, failed conversations score 0."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    ks = sorted(set(ks))
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(contextvars.copy_context().run, _run_one, pipeline, it) for it in dataset]
            results = [f.result() for f in futures]
    else:
        results = [_run_one(pipeline, it) for it in dataset]
    return score_results(results, ks, dataset_id, label, _pipeline_config(pipeline), x)


def length_sensitivity_sweep(
    dataset: Sequence[LabeledConversation],
    pipeline: Recommender,
    ks: Sequence[int] = DEFAULT_KS,
    dataset_id: str = "dataset",
    max_workers: int = 1,
) -> list[MetricReport]:
    """One report per prefix length t = 1..longest conversation; each
    conversation is cut to its first min(t, len) utterances."""
    longest = max(len(it.conversation.utterances) for it in dataset)
    rows = []
    for t in range(1, longest + 1):
        prefix = [LabeledConversation(it.conversation.truncated(t), it.gold_spcs) for it in dataset]
        rows.append(evaluate_dataset(prefix, pipeline, ks, dataset_id, f"utterances={t}", max_workers, x=t))
    return rows


def db_ablation_configs() -> list[tuple[str, tuple[CatalogSource, ...]]]:
    """All five sources, each source alone, and each leave-one-out."""
    configs = [("All DBs", ALL_SOURCES)]
    configs += [(f"only {s.value}", (s,)) for s in ALL_SOURCES]
    configs += [(f"without {s.value}", tuple(x for x in ALL_SOURCES if x != s)) for s in ALL_SOURCES]
    return configs


def run_db_ablation(
    dataset: Sequence[LabeledConversation],
    pipeline: Any,
    ks: Sequence[int] = DEFAULT_KS,
    dataset_id: str = "dataset",
    max_workers: int = 1,
) -> list[MetricReport]:
    return [
        evaluate_dataset(dataset, pipeline.with_options(enabled_sources=srcs), ks, dataset_id, label, max_workers)
        for label, srcs in db_ablation_configs()
    ]


def run_bootstrap_ablation(
    dataset: Sequence[LabeledConversation],
    pipeline: Any,
    ks: Sequence[int] = DEFAULT_KS,
    dataset_id: str = "dataset",
    max_iterations: int = 3,
    max_workers: int = 1,
) -> list[MetricReport]:
    return [
        evaluate_dataset(
            dataset, pipeline.with_options(iterations=n), ks, dataset_id, f"iterations={n}", max_workers, x=n
        )
        for n in range(max_iterations + 1)
    ]


# --------------------------------------------------------------------------
# Overhead
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StepOverhead:
    step: str
    n_conversations: int
    call_count: int
    prompt_tokens: int
    completion_tokens: int
    time_ms_q1: float
    time_ms_median: float
    time_ms_q3: float

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass
class OverheadLedgerReport:
    rows: list[StepOverhead]

    def row(self, step: str) -> StepOverhead:
        for r in self.rows:
            if r.step == step:
                return r
        raise KeyError(step)


def measure_overhead(traces: Sequence[Trace]) -> OverheadLedgerReport:
    """Per-step call counts, token totals, and quartiles of per-conversation step time."""
    per_step: dict[str, list] = {}
    for tr in traces:
        for st in tr.steps:
            per_step.setdefault(st.step, []).append(st)
    order = [s for s in STEPS if s in per_step] + sorted(s for s in per_step if s not in STEPS)
    rows = []
    for step in order:
        sts = per_step[step]
        q1, q2, q3 = np.percentile([s.wall_ms for s in sts], [25, 50, 75])
        rows.append(
            StepOverhead(
                step,
                len(sts),
                sum(len(s.calls) for s in sts),
                sum(s.usage.prompt_tokens for s in sts),
                sum(s.usage.completion_tokens for s in sts),
                float(q1),
                float(q2),
                float(q3),
            )
        )
    return OverheadLedgerReport(rows)


# --------------------------------------------------------------------------
# Report files
# --------------------------------------------------------------------------

REPORT_FIELDS = [
    "experiment",
    "dataset",
    "label",
    "x",
    "k",
    "metric",
    "value",
    "n_conversations",
    "n_failures",
    "row_fingerprint",
    "config_fingerprint",
]
OVERHEAD_FIELDS = [
    "step",
    "n_conversations",
    "call_count",
    "prompt_tokens",
    "completion_tokens",
    "time_ms_q1",
    "time_ms_median",
    "time_ms_q3",
]


def report_rows(reports: Sequence[MetricReport], experiment: str, config_fingerprint: str) -> list[dict[str, str]]:
    rows = []
    for rep in reports:
        for metric, values in (("MRR", rep.mrr_at), ("R", rep.recall_at)):
            for k in sorted(values):
                rows.append(
                    {
                        "experiment": experiment,
                        "dataset": rep.dataset_id,
                        "label": rep.label,
                        "x": "" if rep.x is None else str(rep.x),
                        "k": str(k),
                        "metric": metric,
                        "value": repr(values[k]),
                        "n_conversations": str(rep.n_conversations),
                        "n_failures": str(rep.n_failures),
                        "row_fingerprint": rep.fingerprint,
                        "config_fingerprint": config_fingerprint,
                    }
                )
    return rows


def _csv_text(fields: list[str], rows: list[dict[str, Any]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _table(header: list[str], body: list[list[str]]) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *body)]
    fmt = lambda row: "  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def metrics_table(reports: Sequence[MetricReport]) -> str:
    ks = sorted({k for r in reports for k in r.mrr_at})
    header = ["label", "n", "fail"] + [f"MRR@{k}" for k in ks] + [f"R@{k}" for k in ks]
    body = [
        [r.label or r.dataset_id, str(r.n_conversations), str(r.n_failures)]
        + [f"{r.mrr_at[k]:.3f}" for k in ks]
        + [f"{r.recall_at[k]:.3f}" for k in ks]
        for r in reports
    ]
    return _table(header, body)


def emit_report(
    reports: Sequence[MetricReport],
    out_dir: str | Path,
    experiment: str,
    config_fingerprint: str,
) -> dict[str, Path]:
    """Write ``report.csv``, ``report.txt`` and ``plotdata/<experiment>.csv``."""
    out = Path(out_dir)
    (out / "plotdata").mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "report.csv", "txt": out / "report.txt", "plot": out / "plotdata" / f"{experiment}.csv"}
    paths["csv"].write_text(_csv_text(REPORT_FIELDS, report_rows(reports, experiment, config_fingerprint)))
    paths["txt"].write_text(
        f"experiment: {experiment}\nconfig fingerprint: {config_fingerprint}\n\n" + metrics_table(reports)
    )
    ks = sorted({k for r in reports for k in r.mrr_at})
    plot_fields = ["x", "label"] + [f"MRR@{k}" for k in ks] + [f"R@{k}" for k in ks]
    plot_rows = []
    for i, r in enumerate(reports):
        row = {"x": str(r.x if r.x is not None else i), "label": r.label}
        row.update({f"MRR@{k}": repr(r.mrr_at[k]) for k in ks})
        row.update({f"R@{k}": repr(r.recall_at[k]) for k in ks})
        plot_rows.append(row)
    paths["plot"].write_text(_csv_text(plot_fields, plot_rows))
    return paths


def read_report_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def emit_overhead(report: OverheadLedgerReport, out_dir: str | Path, config_fingerprint: str = "") -> dict[str, Path]:
    """Write ``overhead.csv``, ``overhead.txt`` and the time/token plot data."""
    out = Path(out_dir)
    (out / "plotdata").mkdir(parents=True, exist_ok=True)
    rows = [{f: repr(getattr(r, f)) if isinstance(getattr(r, f), float) else str(getattr(r, f)) for f in OVERHEAD_FIELDS} for r in report.rows]
    paths = {
        "csv": out / "overhead.csv",
        "txt": out / "overhead.txt",
        "time": out / "plotdata" / "overhead_time.csv",
        "tokens": out / "plotdata" / "overhead_tokens.csv",
    }
    paths["csv"].write_text(_csv_text(OVERHEAD_FIELDS, rows))
    body = [
        [r.step, str(r.n_conversations), str(r.call_count), str(r.prompt_tokens), str(r.completion_tokens),
         f"{r.time_ms_q1:.1f}", f"{r.time_ms_median:.1f}", f"{r.time_ms_q3:.1f}"]
        for r in report.rows
    ]
    paths["txt"].write_text(
        (f"config fingerprint: {config_fingerprint}\n\n" if config_fingerprint else "")
        + _table(["step", "convs", "calls", "prompt", "completion", "ms q1", "ms median", "ms q3"], body)
    )
    paths["time"].write_text(
        _csv_text(["step", "q1", "median", "q3"],
                  [{"step": r.step, "q1": repr(r.time_ms_q1), "median": repr(r.time_ms_median), "q3": repr(r.time_ms_q3)} for r in report.rows])
    )
    paths["tokens"].write_text(
        _csv_text(["step", "prompt_tokens", "completion_tokens"],
                  [{"step": r.step, "prompt_tokens": str(r.prompt_tokens), "completion_tokens": str(r.completion_tokens)} for r in report.rows])
    )
    return paths


def read_overhead_csv(path: str | Path) -> OverheadLedgerReport:
    rows = []
    for d in read_report_csv(path):
        rows.append(
            StepOverhead(
                d["step"],
                int(d["n_conversations"]),
                int(d["call_count"]),
                int(d["prompt_tokens"]),
                int(d["completion_tokens"]),
                float(d["time_ms_q1"]),
                float(d["time_ms_median"]),
                float(d["time_ms_q3"]),
            )
        )
    return OverheadLedgerReport(rows)


def traces_of(reports: Iterable[MetricReport]) -> list[Trace]:
    return [r.trace for rep in reports for r in rep.results if r.trace is not None]
