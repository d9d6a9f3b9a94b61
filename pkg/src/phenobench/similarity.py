"""Origin-shifted cosine similarity over all perturbation pairs.

The all-pairs similarity set is never materialized. :class:`SimilarityEngine`
computes it tile by tile on a fixed grid over the profile order; every pair's
value therefore comes from the same tile computation no matter who asks for
it (threshold search, recall lookup, thread count), which keeps the
similarity bits and everything derived from them reproducible.

Exact order statistics use a radix selection over the float bit patterns:
four counting passes, each resolving 16 bits of the selected value. Counts
are integers, so merging per-tile histograms in any order gives the same
answer.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import _numerics
from .aggregate import PerturbationProfile, profiles_matrix
from .errors import DegenerateVectorError, InsufficientDataError, ValidationError

DEFAULT_TILE = 512
DIGIT_BITS = 16
# Candidates below this count are sorted directly instead of running another pass.
COLLECT_LIMIT = 1 << 20


@dataclass(frozen=True, eq=False)
class Origin:
    vector: np.ndarray

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValidationError("origin must be a finite vector")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @classmethod
    def zero(cls, dim: int) -> "Origin":
        return cls(np.zeros(dim))


def centered_cosine(a: np.ndarray, b: np.ndarray, origin: Origin | np.ndarray) -> float:
    """Cosine of the angle between ``a - o`` and ``b - o``."""
    o = origin.vector if isinstance(origin, Origin) else np.asarray(origin, dtype=np.float64)
    u = np.asarray(a, dtype=np.float64) - o
    v = np.asarray(b, dtype=np.float64) - o
    uu, vv = float(u @ u), float(v @ v)
    if uu == 0.0 or vv == 0.0:
        raise DegenerateVectorError("a vector coincides with the origin")
    s = float(u @ v) / math.sqrt(uu * vv)
    return min(1.0, max(-1.0, s))


def ceil_fraction(frac: float, total: int) -> int:
    """``ceil(frac * total)`` with ``frac`` read as the decimal it was written as."""
    return math.ceil(Fraction(repr(float(frac))) * total)


def canonical_pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


class SimilarityEngine:
    """Tiled similarity kernel over a fixed ordering of profiles."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, origin: Origin | np.ndarray,
                 tile: int = DEFAULT_TILE, threads: int = 1):
        x = np.asarray(vectors, dtype=np.float64)
        o = origin.vector if isinstance(origin, Origin) else np.asarray(origin, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != len(ids):
            raise ValidationError("one vector per id is required")
        if o.shape != (x.shape[1],):
            raise ValidationError(f"origin has shape {o.shape}, profiles have dim {x.shape[1]}")
        centred = x - o
        norms = np.sqrt(np.einsum("ij,ij->i", centred, centred))
        if np.any(norms == 0):
            bad = ids[int(np.flatnonzero(norms == 0)[0])]
            raise DegenerateVectorError(f"profile {bad!r} coincides with the origin")
        self.ids = list(ids)
        self.index = {pid: i for i, pid in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise ValidationError("duplicate profile ids")
        self.units = np.ascontiguousarray(centred / norms[:, None])
        self.tile = int(tile)
        self.threads = max(1, int(threads))

    @classmethod
    def from_profiles(cls, profiles: Sequence[PerturbationProfile], origin: Origin, **kw):
        ids, mat = profiles_matrix(profiles)
        return cls(ids, mat, origin, **kw)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_pairs(self) -> int:
        return self.n * (self.n - 1) // 2

    def _bounds(self, b: int) -> tuple[int, int]:
        return b * self.tile, min((b + 1) * self.tile, self.n)

    def tile_values(self, bi: int, bj: int) -> np.ndarray:
        """Similarity block for tile row ``bi`` and tile column ``bj`` (``bi <= bj``)."""
        r0, r1 = self._bounds(bi)
        c0, c1 = self._bounds(bj)
        block = self.units[r0:r1] @ self.units[c0:c1].T
        return np.clip(block, -1.0, 1.0, out=block)

    def _tiles(self) -> list[tuple[int, int]]:
        nb = -(-self.n // self.tile)
        return [(bi, bj) for bi in range(nb) for bj in range(bi, nb)]

    def _tile_pairs(self, bi: int, bj: int, rows: np.ndarray | None,
                    exclude: dict | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Global (i, j) index arrays and values of the distinct pairs ``i < j`` in a tile."""
        r0, r1 = self._bounds(bi)
        c0, c1 = self._bounds(bj)
        vals = self.tile_values(bi, bj)
        gi = np.arange(r0, r1)[:, None]
        gj = np.arange(c0, c1)[None, :]
        keep = gi < gj
        if rows is not None:
            keep &= rows[r0:r1][:, None] & rows[c0:c1][None, :]
        if exclude and (bi, bj) in exclude:
            li, lj = exclude[(bi, bj)]
            keep[li, lj] = False
        ii, jj = np.nonzero(keep)
        return ii + r0, jj + c0, vals[ii, jj]

    def _map_tiles(self, fn):
        tiles = self._tiles()
        if self.threads > 1 and len(tiles) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                return list(pool.map(lambda t: fn(*t), tiles))
        return [fn(*t) for t in tiles]

    def _exclusion_index(self, exclude: Iterable[tuple[int, int]] | None) -> dict | None:
        if not exclude:
            return None
        by_tile: dict = {}
        for i, j in exclude:
            i, j = (i, j) if i < j else (j, i)
            bi, bj = i // self.tile, j // self.tile
            by_tile.setdefault((bi, bj), ([], []))
            by_tile[(bi, bj)][0].append(i - bi * self.tile)
            by_tile[(bi, bj)][1].append(j - bj * self.tile)
        return {k: (np.array(a), np.array(b)) for k, (a, b) in by_tile.items()}

    def iter_pairs(self, rows: np.ndarray | None = None,
                   exclude: Iterable[tuple[int, int]] | None = None
                   ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Stream ``(i, j, sim)`` arrays tile by tile, optionally restricted."""
        ex = self._exclusion_index(exclude)
        for bi, bj in self._tiles():
            yield self._tile_pairs(bi, bj, rows, ex)

    def values(self, pairs: np.ndarray) -> np.ndarray:
        """Similarities for an ``m x 2`` array of index pairs, taken from their tiles."""
        pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
        lo, hi = pairs.min(axis=1), pairs.max(axis=1)
        if np.any(lo == hi):
            raise ValidationError("self-pairs have no similarity")
        out = np.empty(len(pairs))
        bi, bj = lo // self.tile, hi // self.tile
        for key in sorted(set(zip(bi.tolist(), bj.tolist()))):
            sel = np.flatnonzero((bi == key[0]) & (bj == key[1]))
            block = self.tile_values(*key)
            out[sel] = block[lo[sel] - key[0] * self.tile, hi[sel] - key[1] * self.tile]
        return out

    def count(self, rows: np.ndarray | None = None,
              exclude: Iterable[tuple[int, int]] | None = None) -> int:
        if rows is None:
            base = self.n_pairs
        else:
            m = int(np.count_nonzero(rows))
            base = m * (m - 1) // 2
        if exclude:
            base -= len({(min(i, j), max(i, j)) for i, j in exclude
                         if rows is None or (rows[i] and rows[j])})
        return base

    def select(self, ranks: Sequence[int], rows: np.ndarray | None = None,
               exclude: Iterable[tuple[int, int]] | None = None) -> list[float]:
        """Values at 1-based ascending ``ranks`` of the (restricted) pair multiset."""
        ex = self._exclusion_index(list(exclude) if exclude else None)
        total = self.count(rows, exclude)
        for r in ranks:
            if not 1 <= r <= total:
                raise InsufficientDataError(f"rank {r} outside 1..{total}")
        # Per target: fixed high-bit prefix, number of resolved bits, rank within prefix.
        state = [{"prefix": 0, "bits": 0, "rank": int(r), "done": None} for r in ranks]

        while any(s["done"] is None for s in state):
            live = [s for s in state if s["done"] is None]
            collect = [s for s in live if s.get("count", total) <= COLLECT_LIMIT]
            hist = [s for s in live if s not in collect]

            def visit(bi, bj, live=live, collect=collect, hist=hist):
                _, _, vals = self._tile_pairs(bi, bj, rows, ex)
                keys = _numerics.float_sort_keys(vals)
                out_h, out_c = [], []
                for s in hist:
                    shift = np.uint64(64 - s["bits"] - DIGIT_BITS)
                    k = keys if s["bits"] == 0 else keys[(keys >> np.uint64(64 - s["bits"])) == s["prefix"]]
                    digits = ((k >> shift) & np.uint64((1 << DIGIT_BITS) - 1)).astype(np.intp)
                    out_h.append(np.bincount(digits, minlength=1 << DIGIT_BITS))
                for s in collect:
                    out_c.append(keys if s["bits"] == 0 else
                                 keys[(keys >> np.uint64(64 - s["bits"])) == s["prefix"]])
                return out_h, out_c

            results = self._map_tiles(visit)
            for t, s in enumerate(collect):
                cand = np.sort(np.concatenate([r[1][t] for r in results]))
                s["done"] = float(_numerics.keys_to_float(cand[s["rank"] - 1:s["rank"]])[0])
            for t, s in enumerate(hist):
                counts = np.sum([r[0][t] for r in results], axis=0)
                cum = np.cumsum(counts)
                digit = int(np.searchsorted(cum, s["rank"]))
                below = int(cum[digit - 1]) if digit else 0
                s["rank"] -= below
                s["count"] = int(counts[digit])
                s["prefix"] = (s["prefix"] << DIGIT_BITS) | digit
                s["bits"] += DIGIT_BITS
                if s["bits"] == 64:
                    s["done"] = float(_numerics.keys_to_float(np.array([s["prefix"]], dtype=np.uint64))[0])
        return [s["done"] for s in state]


@dataclass(frozen=True)
class SimilarityThresholds:
    low: float
    high: float
    q: float
    n_profiles: int
    n_pairs: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def percentile_ranks(q: float, n_pairs: int) -> tuple[int, int]:
    """1-based ascending ranks of the low and high thresholds."""
    k = ceil_fraction(q, n_pairs)
    return k, n_pairs - k + 1


def thresholds_from_engine(engine: SimilarityEngine, q: float) -> SimilarityThresholds:
    if not 0 < q < 0.5:
        raise ValidationError(f"q must lie in (0, 0.5), got {q}")
    if engine.n < 2:
        raise InsufficientDataError(f"need at least 2 profiles, got {engine.n}")
    lo_rank, hi_rank = percentile_ranks(q, engine.n_pairs)
    low, high = engine.select([lo_rank, hi_rank])
    return SimilarityThresholds(low=low, high=high, q=q, n_profiles=engine.n,
                                n_pairs=engine.n_pairs)


def all_pairs_thresholds(profiles: Sequence[PerturbationProfile], origin: Origin, q: float,
                         *, tile: int = DEFAULT_TILE, threads: int = 1) -> SimilarityThresholds:
    """Exact ``q`` and ``1 - q`` order statistics of all distinct-pair similarities."""
    if len(profiles) < 2:
        raise InsufficientDataError(f"need at least 2 profiles, got {len(profiles)}")
    engine = SimilarityEngine.from_profiles(profiles, origin, tile=tile, threads=threads)
    return thresholds_from_engine(engine, q)


@dataclass(frozen=True)
class PairScores:
    scores: dict[tuple[str, str], float]
    uncovered: tuple[tuple[str, str], ...]


def engine_pair_scores(engine: SimilarityEngine,
                       pairs: Iterable[tuple[str, str]]) -> PairScores:
    covered, uncovered = [], []
    for a, b in pairs:
        if a == b:
            raise ValidationError(f"self-pair ({a}, {b}) has no similarity")
        p = canonical_pair(a, b)
        (covered if a in engine.index and b in engine.index else uncovered).append(p)
    covered = sorted(set(covered))
    if covered:
        idx = np.array([(engine.index[a], engine.index[b]) for a, b in covered])
        vals = engine.values(idx)
    else:
        vals = []
    return PairScores(dict(zip(covered, map(float, vals))), tuple(sorted(set(uncovered))))


def pair_similarities(profiles: Sequence[PerturbationProfile], pairs: Iterable[tuple[str, str]],
                      origin: Origin, *, tile: int = DEFAULT_TILE) -> PairScores:
    """Centered cosine for each queried pair; pairs naming unknown ids are listed as uncovered."""
    engine = SimilarityEngine.from_profiles(profiles, origin, tile=tile)
    return engine_pair_scores(engine, pairs)
