"""Brute-force reference computations: materialize every pair, sort, count.

Pair similarity values are looked up through ``engine.values`` (so the bits
match the engine's kernel), but selection and recall counting are done here
independently with a full sort and plain Python loops.
"""

import math
from fractions import Fraction

import numpy as np


def all_pairs(engine):
    n = engine.n
    idx = np.array([(i, j) for i in range(n) for j in range(i + 1, n)], dtype=np.intp)
    return idx, engine.values(idx)


def naive_similarity_matrix(vectors, origin):
    c = np.asarray(vectors, float) - np.asarray(origin, float)
    out = np.empty((len(c), len(c)))
    for i in range(len(c)):
        for j in range(len(c)):
            out[i, j] = float(c[i] @ c[j]) / math.sqrt(float(c[i] @ c[i]) * float(c[j] @ c[j]))
    return out


def order_stat(values, rank):
    """1-based ascending order statistic by full sort."""
    return sorted(float(v) for v in values)[rank - 1]


def thresholds(engine, q):
    _, sims = all_pairs(engine)
    n = len(sims)
    k = math.ceil(Fraction(repr(q)) * n)
    return order_stat(sims, k), order_stat(sims, n - k + 1)


def recall_percentile(engine, relset, q):
    low, high = thresholds(engine, q)
    idx, sims = all_pairs(engine)
    lookup = {(int(i), int(j)): float(s) for (i, j), s in zip(idx, sims)}
    hits = total = 0
    for a, b in relset.pairs:
        if a in engine.index and b in engine.index:
            i, j = sorted((engine.index[a], engine.index[b]))
            s = lookup[(i, j)]
            total += 1
            hits += (s <= low) or (s >= high)
    return hits / total, (low, high)


def recall_fpr(engine, relset, alpha):
    genes = {g for p in relset.pairs for g in p if g in engine.index}
    rows = sorted(engine.index[g] for g in genes)
    pos = set()
    for a, b in relset.pairs:
        if a in engine.index and b in engine.index:
            pos.add(tuple(sorted((engine.index[a], engine.index[b]))))
    idx, sims = all_pairs(engine)
    neg, possims = [], []
    rowset = set(rows)
    for (i, j), s in zip(idx.tolist(), sims.tolist()):
        if (i, j) in pos:
            possims.append(s)
        elif i in rowset and j in rowset:
            neg.append(s)
    rank = max(1, math.ceil(Fraction(repr(1 - alpha)) * len(neg))) if alpha < 1 else 1
    thr = order_stat(neg, rank)
    return sum(s > thr for s in possims) / len(possims), thr
