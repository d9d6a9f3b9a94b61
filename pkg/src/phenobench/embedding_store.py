"""Embedding tables: validated well-level embeddings with experimental metadata.

Tables are immutable. Vectors live in a single read-only float64 matrix and
each :class:`EmbeddingRecord` holds a read-only row view of it.

File format (UTF-8, LF, comma separated)::

    well_id,experiment_id,plate_id,perturbation_id,well_type,v0,...,v{d-1}

Floats are written with 17 significant digits so that a save/load cycle is
bit-exact.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import SchemaError, ValidationError

NEGATIVE_CONTROL = "negative_control"
PERTURBATION = "perturbation"
WELL_TYPES = (NEGATIVE_CONTROL, PERTURBATION)
DEFAULT_CONTROL_LABEL = "EMPTY"

META_COLUMNS = ("well_id", "experiment_id", "plate_id", "perturbation_id", "well_type")


def format_float(x: float) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    well_id: str
    experiment_id: str
    plate_id: str
    perturbation_id: str
    well_type: str
    vector: np.ndarray

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.experiment_id, self.plate_id, self.well_id)

    @property
    def is_control(self) -> bool:
        return self.well_type == NEGATIVE_CONTROL

    def meta(self) -> tuple[str, str, str, str, str]:
        return (self.well_id, self.experiment_id, self.plate_id,
                self.perturbation_id, self.well_type)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return self.meta() == other.meta() and _same_bits(self.vector, other.vector)

    __hash__ = None  # type: ignore[assignment]


def _same_bits(a: np.ndarray, b: np.ndarray) -> bool:
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


class EmbeddingTable:
    """Ordered, validated collection of records sharing one dimension."""

    __slots__ = ("dim", "control_label", "_meta", "_vectors", "_records")

    def __init__(self, dim: int, records: Iterable[EmbeddingRecord] = (),
                 control_label: str = DEFAULT_CONTROL_LABEL):
        records = list(records)
        meta = [r.meta() for r in records]
        if records:
            rows = []
            for i, r in enumerate(records):
                v = np.asarray(r.vector, dtype=np.float64)
                if v.ndim != 1 or v.shape[0] != dim:
                    raise ValidationError(
                        f"record {i} has vector length {v.size}, table dim is {dim}")
                rows.append(v)
            vectors = np.vstack(rows)
        else:
            vectors = np.empty((0, dim), dtype=np.float64)
        self._init(dim, meta, vectors, control_label)

    @classmethod
    def from_arrays(cls, meta: Sequence[Sequence[str]], vectors: np.ndarray,
                    control_label: str = DEFAULT_CONTROL_LABEL,
                    dim: int | None = None) -> "EmbeddingTable":
        """Build a table from metadata tuples (in ``META_COLUMNS`` order) and a matrix."""
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            if vectors.size == 0 and dim is not None:
                vectors = vectors.reshape(0, dim)
            else:
                raise ValidationError("vectors must be a 2-d matrix")
        if dim is None:
            dim = vectors.shape[1]
        self = cls.__new__(cls)
        self._init(dim, [tuple(str(f) for f in m) for m in meta], vectors, control_label)
        return self

    def _init(self, dim, meta, vectors, control_label):
        if not isinstance(dim, (int, np.integer)) or dim < 1:
            raise ValidationError(f"dim must be a positive integer, got {dim!r}")
        dim = int(dim)
        vectors = np.array(vectors, dtype=np.float64, order="C", copy=True)
        if vectors.shape != (len(meta), dim):
            raise ValidationError(
                f"vector matrix shape {vectors.shape} does not match {len(meta)} records x dim {dim}")
        _validate(meta, vectors, control_label)
        vectors.setflags(write=False)
        object.__setattr__(self, "dim", dim)
        object.__setattr__(self, "control_label", control_label)
        object.__setattr__(self, "_meta", tuple(tuple(m) for m in meta))
        object.__setattr__(self, "_vectors", vectors)
        object.__setattr__(self, "_records", None)

    def __setattr__(self, name, value):
        raise AttributeError("EmbeddingTable is immutable")

    @property
    def vectors(self) -> np.ndarray:
        """Read-only ``n x dim`` matrix of all vectors, in record order."""
        return self._vectors

    @property
    def meta(self) -> tuple[tuple[str, str, str, str, str], ...]:
        return self._meta

    @property
    def records(self) -> tuple[EmbeddingRecord, ...]:
        if self._records is None:
            recs = tuple(EmbeddingRecord(*m, vector=self._vectors[i])
                         for i, m in enumerate(self._meta))
            object.__setattr__(self, "_records", recs)
        return self._records

    def column(self, name: str) -> tuple[str, ...]:
        idx = META_COLUMNS.index(name)
        return tuple(m[idx] for m in self._meta)

    def control_mask(self) -> np.ndarray:
        return np.array([m[4] == NEGATIVE_CONTROL for m in self._meta], dtype=bool)

    def with_vectors(self, vectors: np.ndarray) -> "EmbeddingTable":
        """Same metadata, new vectors (dimension may change)."""
        vectors = np.asarray(vectors, dtype=np.float64)
        dim = vectors.shape[1] if vectors.ndim == 2 else self.dim
        return EmbeddingTable.from_arrays(self._meta, vectors.reshape(len(self), dim),
                                          self.control_label, dim=dim)

    def take(self, indices: Sequence[int]) -> "EmbeddingTable":
        idx = np.asarray(indices, dtype=np.intp)
        return EmbeddingTable.from_arrays([self._meta[i] for i in idx],
                                          self._vectors[idx], self.control_label, dim=self.dim)

    def __len__(self) -> int:
        return len(self._meta)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (self.dim == other.dim and self._meta == other._meta
                and _same_bits(self._vectors, other._vectors))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"EmbeddingTable(dim={self.dim}, n={len(self)})"


def _validate(meta, vectors: np.ndarray, control_label: str) -> None:
    if not np.all(np.isfinite(vectors)):
        bad = int(np.argwhere(~np.isfinite(vectors))[0][0])
        raise ValidationError(f"record {bad} has a non-finite vector component")
    seen: dict[tuple[str, str, str], int] = {}
    for i, m in enumerate(meta):
        if len(m) != len(META_COLUMNS):
            raise ValidationError(f"record {i} has {len(m)} metadata fields")
        well_id, exp, plate, pert, well_type = m
        if well_type not in WELL_TYPES:
            raise ValidationError(f"record {i}: unknown well_type {well_type!r}")
        if well_type == NEGATIVE_CONTROL and pert != control_label:
            raise ValidationError(
                f"record {i}: negative control must carry perturbation_id {control_label!r}, got {pert!r}")
        key = (exp, plate, well_id)
        if key in seen:
            raise ValidationError(
                f"record {i} duplicates (experiment, plate, well) {key} of record {seen[key]}")
        seen[key] = i


def _header(dim: int) -> list[str]:
    return list(META_COLUMNS) + [f"v{j}" for j in range(dim)]


def _dim_from_header(header: list[str], extra: Sequence[str] = ()) -> int:
    n_meta = len(META_COLUMNS)
    if tuple(header[:n_meta]) != META_COLUMNS:
        raise SchemaError(f"header must start with {','.join(META_COLUMNS)}; got {header[:n_meta]}")
    vcols = header[n_meta:len(header) - len(extra)]
    if tuple(header[len(header) - len(extra):]) != tuple(extra):
        raise SchemaError(f"header must end with {','.join(extra)}")
    for j, name in enumerate(vcols):
        if name != f"v{j}":
            raise SchemaError(f"vector column {j} must be named v{j}, got {name!r}")
    return len(vcols)


def _read_rows(path: Path):
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{path}: empty file, header required") from None
    return header, reader


def _parse_vector(fields: Sequence[str], row_no: int) -> list[float]:
    try:
        vals = [float(f) for f in fields]
    except ValueError as exc:
        raise SchemaError(f"row {row_no}: unparseable number ({exc})") from None
    if not all(math.isfinite(v) for v in vals):
        raise ValidationError(f"row {row_no}: non-finite vector component")
    return vals


def load_embeddings(path: str | Path, dim: int | None = None,
                    control_label: str = DEFAULT_CONTROL_LABEL) -> EmbeddingTable:
    """Read and validate an embeddings file.

    Data rows are numbered from 1 in error messages. ``dim`` is inferred from
    the header when omitted; when given it must agree with the header.
    """
    header, reader = _read_rows(path)
    hdim = _dim_from_header(header)
    if dim is not None and dim != hdim:
        raise SchemaError(f"{path}: header declares {hdim} vector columns, expected {dim}")
    if hdim < 1:
        raise SchemaError(f"{path}: header has no vector columns")
    width = len(header)
    meta, rows = [], []
    for row_no, row in enumerate(reader, start=1):
        if len(row) != width:
            raise SchemaError(f"{path}: row {row_no} has {len(row)} fields, expected {width}")
        meta.append(tuple(row[:5]))
        rows.append(_parse_vector(row[5:], row_no))
    vectors = np.array(rows, dtype=np.float64).reshape(len(rows), hdim)
    return EmbeddingTable.from_arrays(meta, vectors, control_label, dim=hdim)


def _write_csv(path: Path, header: list[str], rows: Iterable[list[str]]) -> None:
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def save_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    rows = ([*m, *map(format_float, v)] for m, v in zip(table.meta, table.vectors))
    _write_csv(Path(path), _header(table.dim), rows)


def select(table: EmbeddingTable,
           by: Callable[[EmbeddingRecord], bool]) -> EmbeddingTable:
    """Order-preserving subset of the records satisfying ``by``."""
    keep = [i for i, r in enumerate(table.records) if by(r)]
    return table.take(keep)


def where(**fields: str | Iterable[str]) -> Callable[[EmbeddingRecord], bool]:
    """Predicate matching metadata fields, e.g. ``where(well_type="negative_control")``.

    A non-string value is treated as a set of allowed values.
    """
    for name in fields:
        if name not in META_COLUMNS:
            raise ValueError(f"unknown metadata field {name!r}")
    allowed = {k: ({v} if isinstance(v, str) else set(v)) for k, v in fields.items()}

    def pred(rec: EmbeddingRecord) -> bool:
        return all(getattr(rec, k) in vs for k, vs in allowed.items())

    return pred


def controls(table: EmbeddingTable) -> EmbeddingTable:
    return select(table, where(well_type=NEGATIVE_CONTROL))


def perturbations(table: EmbeddingTable) -> EmbeddingTable:
    return select(table, where(well_type=PERTURBATION))
