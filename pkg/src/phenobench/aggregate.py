"""Replicate aggregation and inference tiling arithmetic.

Crop embeddings are averaged into a well embedding; well embeddings of one
perturbation are combined with a spherical mean (normalize each replicate,
average, renormalize) into a unit-norm :class:`PerturbationProfile`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _numerics
from .embedding_store import (META_COLUMNS, PERTURBATION,
                              EmbeddingTable, _dim_from_header, _parse_vector,
                              _read_rows, _write_csv, format_float)
from .errors import (DegenerateVectorError, EmptyGroupError, SchemaError, TilingError,
                     UndefinedMeanError, ValidationError)

NORM_TOL = 1e-12
INT64_MAX = 2**63 - 1

# One 2048 x 2048 x 6 well image tiled into 256 x 256 crops.
WELL_IMAGE_SIDE = 2048
CROP_SIDE = 256
CHANNELS = 6


@dataclass(frozen=True, eq=False)
class PerturbationProfile:
    perturbation_id: str
    vector: np.ndarray
    n_replicates: int

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64)
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)
        if self.n_replicates < 1:
            raise ValidationError(f"{self.perturbation_id}: n_replicates must be >= 1")
        if abs(np.linalg.norm(v) - 1.0) > 1e-12:
            raise ValidationError(f"{self.perturbation_id}: profile vector is not unit norm")


def mean_aggregate(crop_embeddings: np.ndarray) -> np.ndarray:
    """Arithmetic column mean of the ``k x d`` crop embeddings of one well."""
    x = np.asarray(crop_embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyGroupError("mean_aggregate needs at least one crop embedding")
    total = x[0].copy()
    for row in x[1:]:
        total += row
    return total / x.shape[0]


def norms(x: np.ndarray) -> np.ndarray:
    """Euclidean norm along the last axis; the one norm used for all unit scaling."""
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(np.sum(x * x, axis=-1))


def unit_rows(x: np.ndarray, norm_tol: float = NORM_TOL) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms_ = norms(x)
    bad = np.flatnonzero(norms_ <= norm_tol)
    if bad.size:
        raise DegenerateVectorError(f"replicate row {int(bad[0])} has norm <= {norm_tol}")
    return x / norms_[:, None]


def spherical_mean(replicates: np.ndarray, norm_tol: float = NORM_TOL) -> np.ndarray:
    """Unit-norm direction of the mean of the unit-normalized replicate rows."""
    x = np.asarray(replicates, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] == 0:
        raise EmptyGroupError("spherical_mean needs at least one replicate")
    m = _numerics.order_free_mean(unit_rows(x, norm_tol))
    norm = norms(m)
    if norm < norm_tol:
        raise UndefinedMeanError(
            f"replicates cancel: mean of unit vectors has norm {norm:.3g} < {norm_tol}")
    return m / norm


def group_indices(keys: Sequence) -> dict:
    """Row indices per key, keys in sorted order, rows in input order."""
    groups: dict = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    return {k: groups[k] for k in sorted(groups)}


def aggregate_crops(crop_embeddings: np.ndarray,
                    well_keys: Sequence[tuple[str, str, str]]) -> dict[tuple[str, str, str], np.ndarray]:
    """Crop-level rows to one mean vector per (experiment, plate, well) key."""
    x = np.asarray(crop_embeddings, dtype=np.float64)
    if len(well_keys) != x.shape[0]:
        raise ValidationError("one well key per crop row is required")
    return {k: mean_aggregate(x[rows]) for k, rows in group_indices(list(well_keys)).items()}


def profile_perturbations(table: EmbeddingTable, include_controls: bool = False,
                          norm_tol: float = NORM_TOL) -> list[PerturbationProfile]:
    """One spherical-mean profile per perturbation_id, sorted by id."""
    ids = table.column("perturbation_id")
    types = table.column("well_type")
    keys = [pid for pid, wt in zip(ids, types) if include_controls or wt == PERTURBATION]
    rows = [i for i, wt in enumerate(types) if include_controls or wt == PERTURBATION]
    out = []
    for pid, local in group_indices(keys).items():
        idx = [rows[j] for j in local]
        out.append(PerturbationProfile(pid, spherical_mean(table.vectors[idx], norm_tol), len(idx)))
    return out


def profiles_matrix(profiles: Sequence[PerturbationProfile]) -> tuple[list[str], np.ndarray]:
    ids = [p.perturbation_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate perturbation ids among profiles")
    if not profiles:
        return ids, np.empty((0, 0))
    return ids, np.vstack([p.vector for p in profiles])


def save_profiles(profiles: Sequence[PerturbationProfile], path: str | Path) -> None:
    """Write profiles in the embeddings layout, well/plate blank, plus ``n_replicates``."""
    if not profiles:
        raise ValidationError("no profiles to save")
    dim = profiles[0].vector.shape[0]
    header = list(META_COLUMNS) + [f"v{j}" for j in range(dim)] + ["n_replicates"]
    rows = (["", "", "", p.perturbation_id, PERTURBATION, *map(format_float, p.vector),
             str(p.n_replicates)] for p in profiles)
    _write_csv(Path(path), header, rows)


def load_profiles(path: str | Path) -> list[PerturbationProfile]:
    header, reader = _read_rows(path)
    dim = _dim_from_header(header, extra=("n_replicates",))
    out = []
    for row_no, row in enumerate(reader, start=1):
        if len(row) != len(header):
            raise SchemaError(f"{path}: row {row_no} has {len(row)} fields, expected {len(header)}")
        vec = _parse_vector(row[5:5 + dim], row_no)
        try:
            n_rep = int(row[-1])
        except ValueError:
            raise SchemaError(f"{path}: row {row_no} has a non-integer n_replicates") from None
        out.append(PerturbationProfile(row[3], np.array(vec), n_rep))
    return out


@dataclass(frozen=True)
class TilingSpec:
    image_height: int = WELL_IMAGE_SIDE
    image_width: int = WELL_IMAGE_SIDE
    channels: int = CHANNELS
    crop_side: int = CROP_SIDE

    def __post_init__(self):
        for name in ("image_height", "image_width", "channels", "crop_side"):
            if int(getattr(self, name)) < 1:
                raise TilingError(f"{name} must be positive")
        if self.image_height % self.crop_side or self.image_width % self.crop_side:
            raise TilingError(
                f"crop side {self.crop_side} does not divide image "
                f"{self.image_height}x{self.image_width}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.crop_side, self.image_width // self.crop_side


def tile_offsets(spec: TilingSpec) -> list[tuple[int, int]]:
    """Top-left (row, col) of every crop in a non-overlapping row-major grid."""
    rows, cols = spec.grid
    c = spec.crop_side
    return [(r * c, q * c) for r in range(rows) for q in range(cols)]


def tile_image(image: np.ndarray, crop_side: int) -> np.ndarray:
    """Cut a ``(channels, H, W)`` array into ``(n_crops, channels, c, c)`` crops."""
    ch, h, w = image.shape
    spec = TilingSpec(h, w, ch, crop_side)
    return np.stack([image[:, r:r + crop_side, q:q + crop_side] for r, q in tile_offsets(spec)])


def inference_sample_count(crops_per_well: int, wells_per_plate: int,
                           plates_per_experiment: int, experiments: int,
                           limit: int = INT64_MAX) -> int:
    """Total crops that must pass through the encoder; errors past ``limit``."""
    total = 1
    for name, v in (("crops_per_well", crops_per_well), ("wells_per_plate", wells_per_plate),
                    ("plates_per_experiment", plates_per_experiment), ("experiments", experiments)):
        if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
            raise ValidationError(f"{name} must be an integer >= 1, got {v!r}")
        total *= int(v)
        if total > limit:
            raise OverflowError(f"sample count exceeds {limit}")
    return total
