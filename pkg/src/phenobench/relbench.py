"""Known-relationship recall benchmarks, FLOPs accounting and report output.

Two operating points are supported:

* percentile recall: fraction of covered annotated pairs whose similarity lies
  in the bottom or top ``q`` of *all* pairwise similarities (two-sided);
* recall at a false positive rate: the threshold is the ``1 - alpha`` order
  statistic of the non-annotated pairs among covered genes, and recall counts
  annotated pairs strictly above it (one-sided, high-similarity tail).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .aggregate import PerturbationProfile
from .errors import CoverageError, InsufficientDataError, SchemaError, UsageError, ValidationError
from .similarity import (Origin, SimilarityEngine, SimilarityThresholds, canonical_pair,
                         ceil_fraction, thresholds_from_engine)

log = logging.getLogger(__name__)

STRINGDB_MIN_SCORE = 0.95
PRINTED_CROP_FACTOR = 1.69  # value printed next to the crop-factor formula; the formula gives ~1.706


@dataclass(frozen=True)
class RelationshipSet:
    name: str
    pairs: frozenset
    scores: Mapping[tuple[str, str], float] | None = None
    n_self_pairs: int = 0
    n_duplicates: int = 0

    def __post_init__(self):
        pairs = frozenset(canonical_pair(a, b) for a, b in self.pairs)
        if any(a == b for a, b in pairs):
            raise ValidationError(f"{self.name}: self-pairs are not allowed")
        object.__setattr__(self, "pairs", pairs)
        if self.scores is not None:
            scores = {canonical_pair(*p): float(s) for p, s in self.scores.items()}
            if set(scores) != pairs:
                raise ValidationError(f"{self.name}: every pair needs exactly one score")
            object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.pairs)

    def genes(self) -> set[str]:
        return {g for p in self.pairs for g in p}


def load_relationships(path: str | Path, min_score: float | None = None,
                       name: str | None = None) -> RelationshipSet:
    """Read a ``gene_a<TAB>gene_b[<TAB>score]`` file.

    Pairs are canonicalized and deduplicated (a duplicated pair keeps its
    highest score); self-pairs are dropped and counted. With ``min_score``
    only pairs scoring strictly above it are kept.
    """
    path = Path(path)
    name = name or path.stem
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header not in (["gene_a", "gene_b"], ["gene_a", "gene_b", "score"]):
            raise SchemaError(f"{path}: header must be gene_a<TAB>gene_b[<TAB>score], got {header}")
        scored = len(header) == 3
        if min_score is not None and not scored:
            raise UsageError(f"{path}: min_score given but the file has no score column")
        best: dict[tuple[str, str], float | None] = {}
        n_self = n_dup = 0
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(header) or not row[0] or not row[1]:
                raise SchemaError(f"{path}: malformed row {row_no}: {row}")
            a, b = row[0], row[1]
            score = None
            if scored:
                try:
                    score = float(row[2])
                except ValueError:
                    raise SchemaError(f"{path}: row {row_no} has a non-numeric score") from None
                if not 0.0 <= score <= 1.0:
                    raise ValidationError(f"{path}: row {row_no} score {score} outside [0, 1]")
            if a == b:
                n_self += 1
                continue
            p = canonical_pair(a, b)
            if p in best:
                n_dup += 1
                if score is not None:
                    best[p] = max(best[p], score)
            else:
                best[p] = score
    if min_score is not None:
        best = {p: s for p, s in best.items() if s > min_score}
    scores = dict(best) if scored else None
    return RelationshipSet(name, frozenset(best), scores, n_self, n_dup)


def load_gene_subset(path: str | Path) -> set[str]:
    """One gene per line; blank lines, ``#`` comments and a ``gene`` header are ignored."""
    genes = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#") and line != "gene":
            genes.add(line)
    return genes


def filter_profiles(profiles: Sequence[PerturbationProfile],
                    genes: Iterable[str]) -> list[PerturbationProfile]:
    keep = set(genes)
    return [p for p in profiles if p.perturbation_id in keep]


def _engine(profiles, origin, engine, threads=1):
    if engine is not None:
        return engine
    if len(profiles) < 2:
        raise InsufficientDataError(f"need at least 2 profiles, got {len(profiles)}")
    return SimilarityEngine.from_profiles(profiles, origin, threads=threads)


def covered_pairs(engine: SimilarityEngine, relset: RelationshipSet) -> list[tuple[str, str]]:
    return sorted(p for p in relset.pairs if p[0] in engine.index and p[1] in engine.index)


def _covered_indices(engine, relset) -> np.ndarray:
    cov = covered_pairs(engine, relset)
    if not cov:
        raise CoverageError(f"{relset.name}: no annotated pair has both genes among the profiles")
    return np.array([(engine.index[a], engine.index[b]) for a, b in cov], dtype=np.intp)


@dataclass(frozen=True)
class PercentileDiagnostics:
    thresholds: SimilarityThresholds
    n_covered_pairs: int
    n_hits: int
    n_pairs: int


def recall_at_percentile(profiles: Sequence[PerturbationProfile], relset: RelationshipSet,
                         origin: Origin, q: float = 0.05, *, engine: SimilarityEngine | None = None,
                         thresholds: SimilarityThresholds | None = None
                         ) -> tuple[float, PercentileDiagnostics]:
    """Fraction of covered pairs with similarity ``<= low`` or ``>= high``.

    Thresholds come from all profile pairs, not only covered ones. Pass a
    prebuilt ``engine``/``thresholds`` to reuse them across databases.
    """
    engine = _engine(profiles, origin, engine)
    if thresholds is None:
        thresholds = thresholds_from_engine(engine, q)
    idx = _covered_indices(engine, relset)
    sims = engine.values(idx)
    hits = int(np.count_nonzero((sims <= thresholds.low) | (sims >= thresholds.high)))
    diag = PercentileDiagnostics(thresholds, len(idx), hits, len(relset))
    return hits / len(idx), diag


@dataclass(frozen=True)
class FprDiagnostics:
    threshold: float
    alpha: float
    n_covered_pairs: int
    n_negatives: int
    n_covered_genes: int
    n_hits: int


def recall_at_fpr(profiles: Sequence[PerturbationProfile], relset: RelationshipSet,
                  origin: Origin, alpha: float = 0.05, *,
                  engine: SimilarityEngine | None = None) -> tuple[float, FprDiagnostics]:
    """Recall of covered annotated pairs above the ``alpha``-FPR similarity threshold.

    Covered genes are profiled genes that occur in the database; negatives
    are every other unordered pair among them.
    """
    if not 0 < alpha <= 1:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha}")
    engine = _engine(profiles, origin, engine)
    idx = _covered_indices(engine, relset)
    rows = np.zeros(engine.n, dtype=bool)
    for g in relset.genes():
        if g in engine.index:
            rows[engine.index[g]] = True
    positives = [tuple(p) for p in idx.tolist()]
    n_neg = engine.count(rows, positives)
    if n_neg < 1:
        raise InsufficientDataError(f"{relset.name}: no negative pairs among covered genes")
    rank = max(1, ceil_fraction(1 - alpha, n_neg)) if alpha < 1 else 1
    (threshold,) = engine.select([rank], rows=rows, exclude=positives)
    sims = engine.values(idx)
    hits = int(np.count_nonzero(sims > threshold))
    diag = FprDiagnostics(threshold, alpha, len(idx), n_neg, int(rows.sum()), hits)
    return hits / len(idx), diag


@dataclass(frozen=True)
class FlopsSpec:
    base_flops_per_crop: float
    crops_seen: float
    patch_side: int = 16
    crop_side: int = 256
    base_side: int = 224

    def __post_init__(self):
        if self.patch_side not in (8, 16):
            raise ValidationError(f"patch_side must be 8 or 16, got {self.patch_side}")
        for name in ("base_flops_per_crop", "crops_seen", "crop_side", "base_side"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be positive, got {v!r}")


def crop_factor(crop_side: int = 256, base_side: int = 224, patch: int = 16) -> float:
    """Attention-cost ratio for a larger crop: squared ratio of token counts."""
    tokens = (crop_side / patch) ** 2
    base_tokens = (base_side / patch) ** 2
    return (tokens / base_tokens) ** 2


def patch_factor(patch_side: int) -> float:
    # 8x8 patches give 4x the tokens of 16x16; attention cost is quadratic.
    if patch_side not in (8, 16):
        raise ValidationError(f"patch_side must be 8 or 16, got {patch_side}")
    return 16.0 if patch_side == 8 else 1.0


def flops_estimate(spec: FlopsSpec) -> float:
    return (spec.base_flops_per_crop * crop_factor(spec.crop_side, spec.base_side)
            * patch_factor(spec.patch_side) * spec.crops_seen)


@dataclass(frozen=True)
class DatabaseResult:
    database: str
    recall: float
    n_covered_pairs: int
    n_pairs: int
    thresholds: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.recall <= 1.0:
            raise ValidationError(f"{self.database}: recall {self.recall} outside [0, 1]")
        if self.n_covered_pairs > self.n_pairs:
            raise ValidationError(f"{self.database}: more covered pairs than pairs")


@dataclass(frozen=True)
class BenchmarkReport:
    model_label: str
    metric: str  # "percentile" or "fpr"
    operating_point: float
    results: tuple[DatabaseResult, ...]
    flops: float | None = None

    def recall(self, database: str) -> float:
        for r in self.results:
            if r.database == database:
                return r.recall
        raise KeyError(database)

    def to_dict(self) -> dict:
        return {
            "model_label": self.model_label,
            "metric": self.metric,
            "operating_point": self.operating_point,
            "flops": self.flops,
            "results": [{**asdict(r), "thresholds": dict(sorted(r.thresholds.items()))}
                        for r in self.results],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BenchmarkReport":
        results = tuple(DatabaseResult(**r) for r in d["results"])
        return cls(d["model_label"], d["metric"], d["operating_point"], results, d.get("flops"))

    def summary(self) -> str:
        """Recalls in table style, e.g. ``.62/.44/.27/.48``."""
        return "/".join(_short(r.recall) for r in self.results)

    def text(self) -> str:
        point = "q" if self.metric == "percentile" else "alpha"
        lines = [f"model: {self.model_label}",
                 f"metric: {self.metric} ({point}={self.operating_point:g})"]
        if self.flops is not None:
            lines.append(f"training flops: {self.flops:.4g}")
        lines.append(f"{'database':<16}{'recall':>8}{'covered':>10}{'pairs':>10}")
        for r in self.results:
            lines.append(f"{r.database:<16}{r.recall:>8.4f}{r.n_covered_pairs:>10d}{r.n_pairs:>10d}")
        lines.append(f"summary ({'/'.join(r.database for r in self.results)}): {self.summary()}")
        return "\n".join(lines) + "\n"


def _short(x: float) -> str:
    s = f"{x:.2f}"
    return s[1:] if s.startswith("0.") else s


def make_report(label: str, results: Sequence[DatabaseResult] | Mapping[str, DatabaseResult],
                metric: str, operating_point: float, flops: float | None = None) -> BenchmarkReport:
    if isinstance(results, Mapping):
        results = list(results.values())
    if not results:
        raise ValidationError("a report needs at least one database result")
    if metric not in ("percentile", "fpr"):
        raise ValidationError(f"unknown metric {metric!r}")
    return BenchmarkReport(label, metric, float(operating_point), tuple(results),
                           None if flops is None else float(flops))


def reports_to_json(reports: Sequence[BenchmarkReport]) -> str:
    return json.dumps({"reports": [r.to_dict() for r in reports]}, indent=2, sort_keys=True) + "\n"


def read_reports(path: str | Path) -> list[BenchmarkReport]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    items = data["reports"] if "reports" in data else [data]
    return [BenchmarkReport.from_dict(d) for d in items]


@dataclass(frozen=True)
class ScalingPoint:
    database: str
    flops: float
    recall: float
    model_label: str


def scaling_curve(reports: Sequence[BenchmarkReport]) -> dict[str, list[ScalingPoint]]:
    """Per-database (flops, recall) series sorted by flops, databases in first-seen order."""
    series: dict[str, list[ScalingPoint]] = {}
    for rep in reports:
        if rep.flops is None:
            raise ValidationError(f"report {rep.model_label!r} has no flops value")
        for r in rep.results:
            series.setdefault(r.database, []).append(
                ScalingPoint(r.database, rep.flops, r.recall, rep.model_label))
    return {db: sorted(pts, key=lambda p: p.flops) for db, pts in series.items()}


def scaling_csv(series: Mapping[str, list[ScalingPoint]]) -> str:
    lines = ["flops,recall,database"]
    for db, pts in series.items():
        lines += [f"{p.flops!r},{p.recall!r},{db}" for p in pts]
    return "\n".join(lines) + "\n"


_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def scaling_svg(series: Mapping[str, list[ScalingPoint]], width: int = 480, height: int = 320) -> str:
    """Minimal recall-vs-FLOps line chart with a log10 x axis."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValidationError("nothing to plot")
    xs = [math.log10(p.flops) for p in pts]
    ys = [p.recall for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.05, y1 + 0.05
    ml, mr, mt, mb = 56, 120, 16, 40
    pw, ph = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">training FLOps (log10)</text>',
           f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {mt + ph / 2:.1f})">recall</text>',
           f'<text x="{ml}" y="{mt + ph + 14}" text-anchor="middle">{x0:.2f}</text>',
           f'<text x="{ml + pw}" y="{mt + ph + 14}" text-anchor="middle">{x1:.2f}</text>',
           f'<text x="{ml - 4}" y="{mt + ph}" text-anchor="end">{y0:.3f}</text>',
           f'<text x="{ml - 4}" y="{mt + 8}" text-anchor="end">{y1:.3f}</text>']
    for k, (db, s) in enumerate(series.items()):
        colour = _COLOURS[k % len(_COLOURS)]
        coords = " ".join(f"{px(math.log10(p.flops)):.2f},{py(p.recall):.2f}" for p in s)
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{coords}"/>')
        for p in s:
            out.append(f'<circle cx="{px(math.log10(p.flops)):.2f}" cy="{py(p.recall):.2f}" '
                       f'r="3" fill="{colour}"/>')
        ly = mt + 12 + 16 * k
        out.append(f'<rect x="{ml + pw + 10}" y="{ly - 8}" width="10" height="10" fill="{colour}"/>')
        out.append(f'<text x="{ml + pw + 24}" y="{ly}">{_xml(db)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _xml(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
