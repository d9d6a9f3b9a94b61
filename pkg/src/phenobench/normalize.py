"""Typical variation normalization (TVN) and chromosome-arm correction.

TVN is PCA whitening fitted on negative-control embeddings: centre on the
control mean, rotate into the covariance eigenbasis and rescale each axis by
``(lambda + eps) ** -0.5``. Applying the fitted model to every well aligns
experimental batches to a common, whitened control distribution.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import _numerics
from .embedding_store import EmbeddingTable, PERTURBATION
from .errors import (DimensionMismatchError, InsufficientDataError, SchemaError,
                     ValidationError)

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True, eq=False)
class TvnModel:
    mean: np.ndarray
    whitening: np.ndarray
    eigenvalues: np.ndarray
    epsilon: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Map rows ``x`` to ``W (x - mu)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionMismatchError(f"expected dimension {self.dim}, got {x.shape[-1]}")
        return (x - self.mean) @ self.whitening.T


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # Largest-magnitude component of each eigenvector (column) made positive;
    # the first index wins on magnitude ties.
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def tvn_fit(controls: np.ndarray, epsilon: float = DEFAULT_EPSILON, *,
            block_rows: int = _numerics.DEFAULT_BLOCK_ROWS, threads: int = 1) -> TvnModel:
    """Fit a whitening transform on an ``n x d`` matrix of control embeddings.

    The sample covariance (``n - 1`` denominator) is accumulated over fixed
    row blocks, so the fit is bit-identical for every ``threads`` value.
    """
    x = np.asarray(controls, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValidationError(f"controls must be an n x d matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise InsufficientDataError(f"TVN needs at least 2 control rows, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("controls contain non-finite values")
    if not epsilon >= 0:
        raise ValidationError(f"epsilon must be >= 0, got {epsilon}")

    mean = _numerics.blocked_sum(x, block_rows, threads) / n
    centred = x - mean
    cov = _numerics.blocked_gram(centred, block_rows, threads) / (n - 1)
    cov = 0.5 * (cov + cov.T)

    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = _fix_signs(evecs[:, order])

    scale = evals + epsilon
    if np.any(scale <= 0):
        raise InsufficientDataError(
            f"control covariance is singular (rank < {d}); fit with epsilon > 0")
    whitening = evecs.T / np.sqrt(scale)[:, None]
    return TvnModel(mean=mean, whitening=whitening, eigenvalues=evals, epsilon=float(epsilon))


def tvn_apply(model: TvnModel, table: EmbeddingTable) -> EmbeddingTable:
    if table.dim != model.dim:
        raise DimensionMismatchError(
            f"table dimension {table.dim} does not match TVN model dimension {model.dim}")
    return table.with_vectors(model.transform(table.vectors))


@dataclass(frozen=True)
class ArmMap:
    entries: Mapping[str, str]

    def __post_init__(self):
        object.__setattr__(self, "entries", dict(self.entries))

    def __contains__(self, gene: str) -> bool:
        return gene in self.entries

    def __getitem__(self, gene: str) -> str:
        return self.entries[gene]

    def __len__(self) -> int:
        return len(self.entries)


def load_arm_map(path: str | Path) -> ArmMap:
    """Read a ``gene,arm`` CSV. A gene listed twice with different arms is an error."""
    entries: dict[str, str] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["gene", "arm"]:
            raise SchemaError(f"{path}: header must be 'gene,arm', got {header}")
        for row_no, row in enumerate(reader, start=1):
            if len(row) != 2 or not row[0] or not row[1]:
                raise SchemaError(f"{path}: row {row_no} must have a gene and an arm")
            gene, arm = row
            if entries.get(gene, arm) != arm:
                raise ValidationError(f"{path}: gene {gene!r} mapped to both {entries[gene]!r} and {arm!r}")
            entries[gene] = arm
    return ArmMap(entries)


@dataclass(frozen=True)
class ArmCorrection:
    """Corrected table plus a record of which rows were left untouched."""

    table: EmbeddingTable
    unmapped_rows: tuple[int, ...] = ()
    unmapped_genes: tuple[str, ...] = ()
    control_rows: tuple[int, ...] = ()
    arm_sizes: Mapping[str, int] = field(default_factory=dict)
    no_mapped_rows: bool = False


def arm_correct(table: EmbeddingTable, arms: ArmMap) -> ArmCorrection:
    """Remove per-chromosome-arm offsets from gene perturbation rows.

    For a row whose gene lies on arm ``a``: ``x <- x - mean_a + mean_all``,
    where both means run over arm-mapped perturbation rows. Group means are
    computed with an order-free reduction, so shuffling rows cannot change
    any output bit.
    """
    x = table.vectors
    mapped, by_arm = [], {}
    unmapped, unmapped_genes, ctrl = [], [], []
    for i, (_, _, _, gene, well_type) in enumerate(table.meta):
        if well_type != PERTURBATION:
            ctrl.append(i)
        elif gene in arms:
            mapped.append(i)
            by_arm.setdefault(arms[gene], []).append(i)
        else:
            unmapped.append(i)
            unmapped_genes.append(gene)

    if not mapped:
        log.warning("arm correction: no perturbation row has a gene in the arm map; table unchanged")
        return ArmCorrection(table, tuple(unmapped), tuple(sorted(set(unmapped_genes))),
                             tuple(ctrl), {}, no_mapped_rows=True)

    global_mean = _numerics.order_free_mean(x[mapped])
    out = np.array(x, copy=True)
    for arm, rows in by_arm.items():
        shift = global_mean - _numerics.order_free_mean(x[rows])
        out[rows] = x[rows] + shift
    return ArmCorrection(
        table=table.with_vectors(out),
        unmapped_rows=tuple(unmapped),
        unmapped_genes=tuple(sorted(set(unmapped_genes))),
        control_rows=tuple(ctrl),
        arm_sizes={a: len(r) for a, r in sorted(by_arm.items())},
    )
