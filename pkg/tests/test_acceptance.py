"""Acceptance gate: one test per criterion, each reported as a PASS/FAIL line
in the terminal summary (see ``conftest.py``)."""

import hashlib
import itertools
import math
import random
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from impress import toy
from impress.catalog import ALL_SOURCES, CatalogSource, build_catalog
from impress.cli import main
from impress.config import load_config
from impress.evaluation import (
    LabeledConversation,
    emit_overhead,
    emit_report,
    evaluate_dataset,
    measure_overhead,
    mrr_at_k,
    read_overhead_csv,
    read_report_csv,
    recall_at_k,
    traces_of,
)
from impress.gateway import AuthError, MockChatBackend, ModelConfig, TokenUsage
from impress.index import FlatL2Index, search_top_k
from impress.mock import fenced, prefer_ranking
from impress.pipeline import (
    TAG_RANK,
    GeneratedQuery,
    Pipeline,
    PreliminarySPC,
    Provenance,
    RankingIteration,
    RetrievedCandidate,
    SummaryDiagnosis,
    aggregate,
    bootstrap_rank,
    presented_candidates,
    retrieve_candidates,
)
from impress.service import create_app
from impress.simgen import END_MARKER, generate_dataset

from conftest import CHAT, EMBED, StaticSearch, make_gateway, toy_gateway
from oracles import TableEmbedder, borda_oracle, mrr_oracle, recall_oracle, scalar_l2, union_oracle
from scripted import expected_rejections, scenario, sim_backend

DIAG = SummaryDiagnosis("summary", "diagnosis")
criterion = pytest.mark.criterion


class Stopwatch:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def candidates(ids, distances=None):
    distances = distances or [0.5] * len(ids)
    return [
        RetrievedCandidate(i, d, (Provenance(d, CatalogSource.GEN_FEATURES, 0, "0000"),)) for i, d in zip(ids, distances)
    ]


@criterion(1, "metric oracles, 1,000 instances, monotone in k, < 5 s")
def test_metric_oracles():
    rng = random.Random(20240501)
    pool = [f"spc-{i:02d}" for i in range(30)]
    with Stopwatch() as sw:
        for _ in range(1000):
            ranked = rng.sample(pool, rng.randint(0, 30))
            gold = set(rng.sample(pool, rng.randint(1, 5)))
            k = rng.randint(1, 35)
            assert mrr_at_k(ranked, gold, k) == mrr_oracle(ranked, gold, k)
            assert recall_at_k(ranked, gold, k) == recall_oracle(ranked, gold, k)
            for kk in range(1, len(ranked) + 2):
                assert mrr_at_k(ranked, gold, kk) <= mrr_at_k(ranked, gold, kk + 1)
                assert recall_at_k(ranked, gold, kk) <= recall_at_k(ranked, gold, kk + 1)
    assert sw.seconds < 5.0


def full_scan_sort(rows, meta, q, k):
    d = np.sqrt(((rows.astype(np.float64) - q) ** 2).sum(axis=1))
    return sorted(((float(d[i]), meta[i]) for i in range(len(meta))), key=lambda t: (t[0], t[1]))[:k]


@criterion(2, "index oracle, 100 instances up to n=1000 d=64, < 10 s")
def test_index_oracle():
    rng = np.random.default_rng(7)
    shapes = [(1000, 64)] + [(int(rng.integers(1, 1001)), int(rng.integers(1, 65))) for _ in range(99)]
    with Stopwatch() as sw:
        for n, d in shapes:
            rows = rng.standard_normal((n, d)).astype(np.float32)
            if n > 4:
                rows[n // 2] = rows[n // 3]  # a duplicated row forces an exact tie
            meta = [(f"spc-{int(rng.integers(50)):02d}", f"{i:04d}") for i in range(n)]
            idx = FlatL2Index(CatalogSource.GEN_DESCRIPTIONS, rows, meta, dimension=d)
            q = rng.standard_normal(d)
            k = int(rng.integers(1, 40))
            got = search_top_k(idx, q, k)
            want = full_scan_sort(rows, meta, q, k)
            assert [(h.spc_id, h.chunk_id) for h in got] == [m for _, m in want]
            for h, (dist, _) in zip(got, want):
                assert math.isclose(h.distance, dist, rel_tol=1e-9, abs_tol=1e-12)
        # spot-check the oracle itself against the scalar formula
        assert math.isclose(want[0][0], scalar_l2(rows[meta.index(want[0][1])], q), rel_tol=1e-9)
    assert sw.seconds < 10.0


@criterion(3, "retrieval union oracle, 50 toy catalogs, < 10 s")
def test_retrieval_union_oracle():
    rng = np.random.default_rng(11)
    with Stopwatch() as sw:
        for _ in range(50):
            n_spcs = int(rng.integers(1, 21))
            dim = int(rng.integers(2, 9))
            tables, indexes = {}, {}
            for source in ALL_SOURCES:
                n_rows = int(rng.integers(0, 3 * n_spcs + 1))
                rows = rng.standard_normal((n_rows, dim)).astype(np.float32)
                meta = [(f"spc-{int(rng.integers(n_spcs)):02d}", f"{i:04d}") for i in range(n_rows)]
                tables[source] = (rows, meta)
                indexes[source] = FlatL2Index(source, rows, meta, dimension=dim)
            n_entries = int(rng.integers(1, 9))
            k = int(rng.integers(1, 9))
            vectors = rng.standard_normal((n_entries, dim))
            query = GeneratedQuery(tuple(PreliminarySPC(f"entry {i}", "why") for i in range(n_entries)))
            gw = make_gateway(embed=TableEmbedder({f"entry {i}: why": vectors[i] for i in range(n_entries)}))
            got = retrieve_candidates(query, indexes, gw, EMBED, k_per_index=k)
            want = union_oracle(vectors, tables, k)
            assert {c.spc_id for c in got} == set(want)
            for c in got:
                best, prov = want[c.spc_id]
                assert math.isclose(c.best_distance, best, rel_tol=1e-9, abs_tol=1e-12)
                assert sorted((p.source, p.entry, p.chunk_id) for p in c.provenance) == sorted(
                    (s, e, ch) for _, s, e, ch in prov
                )
                for p in c.provenance:
                    match = [d for d, s, e, ch in prov if (s, e, ch) == (p.source, p.entry, p.chunk_id)]
                    assert math.isclose(p.distance, match[0], rel_tol=1e-9, abs_tol=1e-12)
    assert sw.seconds < 10.0


POINTS_3 = {0: 2, 1: 1, 2: 0}


def hand_order(rankings, distances):
    scores = {c: 0 for c in distances}
    for ranking in rankings:
        for pos, c in enumerate(ranking):
            scores[c] += POINTS_3[pos]
    return sorted(scores.items(), key=lambda kv: (-kv[1], distances[kv[0]], kv[0]))


@criterion(4, "Borda fusion vs hand oracle (3 candidates) and 200 random cases")
def test_borda_correctness():
    distances = {"A": 0.3, "B": 0.1, "C": 0.2}
    perms = list(itertools.permutations("ABC"))
    cands = candidates(list(distances), list(distances.values()))
    cases = 0
    for n_iter in (2, 3):
        for combo in itertools.product(perms, repeat=n_iter):
            its = [RankingIteration(i, (), tuple(r)) for i, r in enumerate(combo)]
            assert list(aggregate(cands, its).ordered_spcs) == hand_order(combo, distances)
            cases += 1
    assert cases == 36 + 216

    rng = random.Random(99)
    for _ in range(200):
        m = rng.randint(1, 10)
        ids = [f"c{i}" for i in range(m)]
        dist = {i: rng.choice([0.1, 0.2, 0.3, rng.random()]) for i in ids}
        rankings = [tuple(rng.sample(ids, m)) for _ in range(rng.randint(1, 6))]
        its = [RankingIteration(i, (), r) for i, r in enumerate(rankings)]
        agg = aggregate(candidates(ids, [dist[i] for i in ids]), its)
        scores = borda_oracle(rankings)
        assert dict(agg.ordered_spcs) == scores
        assert agg.ids == sorted(ids, key=lambda i: (-scores[i], dist[i], i))


def set_ranker(messages):
    ids = [c["id"] for c in presented_candidates(messages)]
    return fenced({"ranking": sorted(ids, key=lambda i: hashlib.sha256(i.encode()).hexdigest())})


@criterion(5, "shuffle-blind ranker is invariant across 50 seeds and iterations 1-3")
def test_shuffle_blindness():
    ids = ["vpn-service", "password-manager", "antivirus-software", "cloud-backup-service", "water-filter-pitcher", "sleep-headphones"]
    expected = sorted(ids, key=lambda i: hashlib.sha256(i.encode()).hexdigest())
    cands = candidates(ids, [0.1 * (j + 1) for j in range(len(ids))])
    gw = make_gateway(MockChatBackend({TAG_RANK: set_ranker}))
    outputs = set()
    for iterations in (1, 2, 3):
        for seed in range(50):
            agg = bootstrap_rank(DIAG, cands, gw, CHAT, iterations=iterations, base_seed=seed)
            outputs.add(tuple(agg.ids))
    assert outputs == {tuple(expected)}


@criterion(6, "echo ranker: mean normalized Borda within 0.1 of 0.5 (5 candidates, 300 seeds)")
def test_position_bias_mitigation():
    ids = ["a", "b", "c", "d", "e"]
    cands = candidates(ids, [0.1, 0.2, 0.3, 0.4, 0.5])
    gw = make_gateway(MockChatBackend({TAG_RANK: lambda m: prefer_ranking(m, [])}))
    iterations, m = 3, len(ids)
    totals = dict.fromkeys(ids, 0.0)
    for seed in range(300):
        agg = bootstrap_rank(DIAG, cands, gw, CHAT, iterations=iterations, base_seed=iterations * seed)
        for spc_id, score in agg.ordered_spcs:
            totals[spc_id] += score / (iterations * (m - 1))
    means = {i: totals[i] / 300 for i in ids}
    print("mean normalized Borda:", {i: round(v, 3) for i, v in means.items()})
    assert all(abs(v - 0.5) <= 0.1 for v in means.values())


def offline_run(out_dir):
    gw = toy_gateway()
    store, _ = build_catalog(toy.SPCS, gw, CHAT, EMBED, StaticSearch(toy.search_results()))
    pipeline = Pipeline.from_store(store, gw, CHAT, EMBED, clock=lambda: 0.0)
    dataset = [LabeledConversation(c, frozenset(g)) for c, g in toy.conversations()]
    report = evaluate_dataset(dataset, pipeline, [1, 3, 5], "toy", "All DBs")
    fp = pipeline.fingerprint()
    emit_report([report], out_dir, "eval", fp)
    emit_overhead(measure_overhead(traces_of([report])), out_dir, fp)
    return report


@criterion(7, "offline end-to-end run: MRR@1 = 1.0, byte-identical reports, < 30 s")
def test_end_to_end_offline(tmp_path):
    with Stopwatch() as sw:
        first = offline_run(tmp_path / "run1")
        second = offline_run(tmp_path / "run2")
    assert first.mrr_at[1] == second.mrr_at[1] == 1.0
    files = sorted(p.relative_to(tmp_path / "run1") for p in (tmp_path / "run1").rglob("*") if p.is_file())
    assert len(files) == 7
    for rel in files:
        assert (tmp_path / "run1" / rel).read_bytes() == (tmp_path / "run2" / rel).read_bytes(), rel
    assert sw.seconds < 30.0


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    root = toy.write_demo(tmp_path_factory.mktemp("demo"))
    assert main(["build-catalog", "--config", str(root / "config.yaml")]) == 0
    return root


@criterion(8, "experiment protocols: 11 DB configs, 4 bootstrap rows, one row per prefix length, fingerprints")
def test_protocol_fidelity(demo, tmp_path):
    cfg = str(demo / "config.yaml")
    fp = load_config(cfg).fingerprint()
    longest = max(len(c.utterances) for c, _ in toy.conversations())
    expected = {"ablate-db": 11, "ablate-bootstrap": 4, "length-sweep": longest}
    for command, n_rows in expected.items():
        out = tmp_path / command
        assert main([command, "--config", cfg, "--k", "1,3", "--out", str(out)]) == 0
        rows = read_report_csv(out / "report.csv")
        mrr1 = [r for r in rows if r["metric"] == "MRR" and r["k"] == "1"]
        assert len(mrr1) == n_rows
        assert len({r["label"] for r in mrr1}) == n_rows
        assert {r["config_fingerprint"] for r in rows} == {fp}
        assert f"config fingerprint: {fp}" in (out / "report.txt").read_text()
        assert f"config fingerprint: {fp}" in (out / "overhead.txt").read_text()
        if command == "ablate-bootstrap":
            assert [r["x"] for r in mrr1] == ["0", "1", "2", "3"]
        if command == "length-sweep":
            assert [r["x"] for r in mrr1] == [str(t) for t in range(1, longest + 1)]


@criterion(9, "overhead accounting equals closed-form token totals (10/5 per call)")
def test_overhead_accounting(toy_store, tmp_path):
    n_conv, iterations, embed_cost = 4, 3, 7
    gw = toy_gateway(fixed_usage=TokenUsage(10, 5), embed_usage=TokenUsage(embed_cost, 0))
    pipeline = Pipeline.from_store(toy_store, gw, CHAT, EMBED, clock=lambda: 0.0).with_options(iterations=iterations)
    dataset = [LabeledConversation(c, frozenset(g)) for c, g in toy.conversations()[:n_conv]]
    report = evaluate_dataset(dataset, pipeline, [1])
    closed_form = {
        "step1-diagnosis": (n_conv, 10 * n_conv, 5 * n_conv),
        "step1-query": (n_conv, 10 * n_conv, 5 * n_conv),
        "step2-retrieve": (n_conv, embed_cost * n_conv, 0),
        "step3-rank": (n_conv * iterations, 10 * n_conv * iterations, 5 * n_conv * iterations),
    }
    over = measure_overhead(traces_of([report]))
    got = {r.step: (r.call_count, r.prompt_tokens, r.completion_tokens) for r in over.rows}
    assert got == closed_form
    assert got["step3-rank"][1:] == (120, 60)
    reread = read_overhead_csv(emit_overhead(over, tmp_path)["csv"])
    assert {r.step: (r.call_count, r.prompt_tokens, r.completion_tokens) for r in reread.rows} == closed_form


def leaks(n):
    return n % 9 == 4 or n % 13 == 0


@criterion(10, "simulator contract over 100 conversations with scripted leaks")
def test_simulator_contract():
    scenarios = [scenario(i, 1 + i % 6) for i in range(25)]
    backend, user = sim_backend(leaks)
    sim_cfg = ModelConfig("mock-sim", temperature=1.0)
    sims, manifest = generate_dataset(scenarios, {"age": {"ranges": [[18, 80]]}, "gender": {"categories": ["woman", "man"]}, "occupation": {"categories": ["nurse"]}}, make_gateway(backend), sim_cfg, sim_cfg, n_per_scenario=4)
    assert len(sims) == 100 and manifest.failures == []
    for s in sims:
        utts = s.conversation.utterances
        assert 1 <= len(utts) <= 9
        assert s.conversation.alternation_violations() == []
        for u in utts:
            assert END_MARKER not in u.text
            if u.role == "user":
                assert s.scenario.root_cause.lower() not in u.text.lower()
    expected = expected_rejections(100, leaks)
    assert [c["rejections"] for c in manifest.conversations] == [r for r, _ in expected]
    assert manifest.rejection_count == user.leaked == sum(r for r, _ in expected) > 0
    assert user.attempts == 100 + manifest.rejection_count
    assert max(len(s.conversation.utterances) for s in sims) == 9


@criterion(11, "service: health, recommend, 400/422/502/504, ranking equals library")
def test_service_conformance(toy_store):
    pipeline = Pipeline.from_store(toy_store, toy_gateway(), CHAT, EMBED, clock=lambda: 0.0)
    client = TestClient(create_app(pipeline, "fp-test"))
    health = client.get("/v1/health")
    assert health.status_code == 200 and health.json()["fingerprint"] == "fp-test"

    for conv, gold in toy.conversations():
        resp = client.post("/v1/recommend", json=conv.to_json())
        assert resp.status_code == 200
        ranked = [r["spc_id"] for r in resp.json()["ranked"]]
        assert ranked == pipeline.recommend(conv).ranking.ids
        assert ranked[0] == gold[0]

    assert client.post("/v1/recommend", content=b"{", headers={"content-type": "application/json"}).status_code == 400
    missing = client.post("/v1/recommend", json={"conversation_id": "x"})
    assert missing.status_code == 422 and missing.json()["fields"][0]["field"] == "utterances"

    def refuse(_):
        raise AuthError("HTTP 401")

    broken = Pipeline.from_store(toy_store, make_gateway(MockChatBackend({"*": refuse})), CHAT, EMBED)
    body = toy.conversations()[0][0].to_json()
    assert TestClient(create_app(broken, "fp")).post("/v1/recommend", json=body).status_code == 502

    slow_gw = toy_gateway()
    slow_gw.chat_backend.delay_s = 0.3
    slow = Pipeline.from_store(toy_store, slow_gw, CHAT, EMBED)
    resp = TestClient(create_app(slow, "fp", request_timeout_s=0.1)).post("/v1/recommend", json=body)
    assert resp.status_code == 504
