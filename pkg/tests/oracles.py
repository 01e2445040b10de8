"""Independent brute-force reference implementations used by the tests."""

import math

from impress.gateway import TokenUsage


def scalar_l2(a, b):
    total = 0.0
    for x, y in zip(a, b):
        total += (float(x) - float(y)) ** 2
    return math.sqrt(total)


def full_scan(rows, meta, q, k):
    """(distance, (spc_id, chunk_id)) pairs, full sort, first k."""
    scored = sorted(((scalar_l2(r, q), tuple(meta[i])) for i, r in enumerate(rows)), key=lambda t: (t[0], t[1]))
    return scored[:k]


def union_oracle(entry_vectors, tables, k):
    """tables: {source: (rows, meta)}. Returns {spc_id: (best_distance, provenance set)}."""
    out = {}
    for e, q in enumerate(entry_vectors):
        for source, (rows, meta) in tables.items():
            if len(rows) == 0:
                continue
            for d, (spc, chunk) in full_scan(rows, meta, q, k):
                best, prov = out.get(spc, (math.inf, set()))
                prov.add((d, source, e, chunk))
                out[spc] = (min(best, d), prov)
    return out


def mrr_oracle(ranked, gold, k):
    hits = [i for i in range(min(k, len(ranked))) if ranked[i] in gold]
    return 1.0 / (hits[0] + 1) if hits else 0.0


def recall_oracle(ranked, gold, k):
    top = set()
    for i, item in enumerate(ranked):
        if i < k:
            top.add(item)
    return sum(1 for g in gold if g in top) / len(gold)


def borda_oracle(rankings):
    """Score = number of candidates placed below the item, summed over rankings."""
    scores = {}
    for ranking in rankings:
        for x in ranking:
            below = sum(1 for y in ranking if ranking.index(y) > ranking.index(x))
            scores[x] = scores.get(x, 0) + below
    return scores


class TableEmbedder:
    """Embed backend returning preset vectors per text."""

    def __init__(self, table, fixed_usage=None):
        self.table = table
        self.fixed_usage = fixed_usage

    def embed(self, config, texts):
        return [list(self.table[t]) for t in texts], self.fixed_usage or TokenUsage(len(texts), 0)
