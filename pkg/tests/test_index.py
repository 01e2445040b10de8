import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from impress.catalog import CatalogSource
from impress.gateway import DimensionMismatch
from impress.index import EmptyIndex, FlatL2Index, l2_distance, search_top_k

from oracles import full_scan as brute_force, scalar_l2

SRC = CatalogSource.GEN_FEATURES


def random_index(rng, n, d, n_spcs=None):
    rows = rng.standard_normal((n, d)).astype(np.float32)
    n_spcs = n_spcs or n
    meta = [(f"spc-{rng.integers(n_spcs):03d}", f"{i:04d}") for i in range(n)]
    return FlatL2Index(SRC, rows, meta, "embed", d), rows, meta


def test_l2_examples():
    assert l2_distance([1.5, -2.0], [1.5, -2.0]) == 0.0
    assert l2_distance([0, 0], [3, 4]) == 5.0
    with pytest.raises(DimensionMismatch):
        l2_distance([0, 0], [0, 0, 0])


def test_l2_against_scalar_reference():
    rng = random.Random(5)
    for _ in range(200):
        a = [rng.uniform(-10, 10) for _ in range(32)]
        b = [rng.uniform(-10, 10) for _ in range(32)]
        assert math.isclose(l2_distance(a, b), scalar_l2(a, b), rel_tol=1e-9)


def test_singleton_index():
    idx = FlatL2Index(SRC, np.ones((1, 4), dtype=np.float32), [("only", "0000")])
    (hit,) = search_top_k(idx, [9, 9, 9, 9], 5)
    assert (hit.spc_id, hit.chunk_id, hit.source) == ("only", "0000", SRC)


def test_exact_match_first():
    rng = np.random.default_rng(1)
    idx, rows, meta = random_index(rng, 50, 16)
    hit = search_top_k(idx, rows[17], 3)[0]
    assert (hit.spc_id, hit.chunk_id) == meta[17]
    assert hit.distance == 0.0


def test_matches_full_sort_oracle():
    rng = np.random.default_rng(2)
    idx, rows, meta = random_index(rng, 200, 32)
    q = rng.standard_normal(32)
    got = search_top_k(idx, q, 10)
    want = brute_force(rows, meta, q, 10)
    assert [(h.spc_id, h.chunk_id) for h in got] == [m for _, m in want]
    for h, (d, _) in zip(got, want):
        assert math.isclose(h.distance, d, rel_tol=1e-9)


def test_ties_broken_by_ids():
    rows = np.zeros((6, 2), dtype=np.float32)
    meta = [("b", "0001"), ("a", "0002"), ("b", "0000"), ("c", "0000"), ("a", "0001"), ("a", "0000")]
    idx = FlatL2Index(SRC, rows, meta)
    hits = idx.search([1.0, 0.0], 4)
    assert [(h.spc_id, h.chunk_id) for h in hits] == [("a", "0000"), ("a", "0001"), ("a", "0002"), ("b", "0000")]


def test_empty_index_and_bad_queries():
    empty = FlatL2Index(SRC, np.zeros((0, 4)), [], dimension=4)
    assert len(empty) == 0
    with pytest.raises(EmptyIndex):
        empty.search([0, 0, 0, 0], 1)
    idx = FlatL2Index(SRC, np.ones((2, 4)), [("a", "0"), ("b", "0")])
    with pytest.raises(DimensionMismatch):
        idx.search([0, 0], 1)
    with pytest.raises(ValueError):
        idx.search([0, 0, 0, 0], 0)
    with pytest.raises(ValueError):
        FlatL2Index(SRC, np.ones((2, 4)), [("a", "0")])


def test_index_rows_are_read_only():
    idx = FlatL2Index(SRC, np.ones((2, 3)), [("a", "0"), ("b", "0")])
    with pytest.raises(ValueError):
        idx.rows[0, 0] = 5.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(1, 12), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_prefix_and_monotonic(n, d, k, seed):
    rng = np.random.default_rng(seed)
    # coarse grid values provoke distance ties
    rows = rng.integers(-2, 3, size=(n, d)).astype(np.float32)
    meta = [(f"s{rng.integers(5)}", f"{i:04d}") for i in range(n)]
    idx = FlatL2Index(SRC, rows, meta)
    q = rng.integers(-2, 3, size=d).astype(np.float64)
    hits = idx.search(q, k)
    assert len(hits) == min(k, n)
    dists = [h.distance for h in hits]
    assert dists == sorted(dists)
    assert hits == idx.search(q, k + 3)[: len(hits)]
    assert [(h.spc_id, h.chunk_id) for h in hits] == [m for _, m in brute_force(rows, meta, q, k)]
