"""Reference baselines: random embeddings, shuffled labels, pixel statistics."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .embedding_store import (DEFAULT_CONTROL_LABEL, NEGATIVE_CONTROL, PERTURBATION,
                              EmbeddingTable)
from .errors import SchemaError, ValidationError

RANDOM_BASELINE_DIMS = (128, 384, 512, 768, 1024)
PIXEL_STATS = ("mean", "std", "min", "max", "median")


@dataclass(frozen=True, eq=False)
class ImagePlanes:
    """Multi-channel image stored as a ``(channels, height, width)`` array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3:
            raise ValidationError(f"expected (channels, height, width) pixels, got shape {px.shape}")
        if not np.issubdtype(px.dtype, np.number):
            raise ValidationError("pixels must be numeric")
        fpx = px.astype(np.float64)
        if not np.all(np.isfinite(fpx)) or np.any(fpx < 0):
            raise ValidationError("pixel intensities must be finite and non-negative")
        object.__setattr__(self, "pixels", px)

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


def gene_ids(n: int, prefix: str = "G") -> list[str]:
    width = max(5, len(str(n - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def random_embeddings(n: int, d: int = 128, seed: int = 0, n_controls: int = 0,
                      control_label: str = DEFAULT_CONTROL_LABEL,
                      replicates: int = 1) -> EmbeddingTable:
    """i.i.d. standard-normal well embeddings for ``n`` synthetic genes.

    ``n_controls`` extra negative-control wells are appended so the table can
    go through TVN; every vector is drawn from the same distribution.
    """
    if n < 1 or d < 1 or replicates < 1 or n_controls < 0:
        raise ValidationError("n, d and replicates must be >= 1, n_controls >= 0")
    rng = np.random.default_rng(seed)
    meta = []
    for g in gene_ids(n):
        for r in range(replicates):
            meta.append((f"W{len(meta):07d}", "EXP0", f"P{r}", g, PERTURBATION))
    for c in range(n_controls):
        meta.append((f"W{len(meta):07d}", "EXP0", "C", control_label, NEGATIVE_CONTROL))
    vectors = rng.standard_normal((len(meta), d))
    return EmbeddingTable.from_arrays(meta, vectors, control_label, dim=d)


def shuffle_labels(table: EmbeddingTable, seed: int = 0, include_controls: bool = False,
                   permutation: Callable[[int], np.ndarray] | None = None) -> EmbeddingTable:
    """Reassign vectors among records uniformly at random; metadata stays in place.

    Only perturbation rows are shuffled unless ``include_controls``.
    ``permutation`` overrides the random draw (it receives the number of
    shuffled rows and returns a permutation of ``range(k)``).
    """
    if len(table) < 2:
        raise ValidationError("shuffling needs at least 2 records")
    if include_controls:
        rows = np.arange(len(table))
    else:
        rows = np.flatnonzero(~table.control_mask())
    perm = (np.random.default_rng(seed).permutation(len(rows)) if permutation is None
            else np.asarray(permutation(len(rows))))
    if sorted(perm.tolist()) != list(range(len(rows))):
        raise ValidationError("permutation hook did not return a permutation")
    vectors = np.array(table.vectors, copy=True)
    vectors[rows] = table.vectors[rows[perm]]
    return table.with_vectors(vectors)


def pixel_stats(image: ImagePlanes) -> np.ndarray:
    """Per channel: mean, population std, min, max, median; channels concatenated."""
    px = image.pixels.astype(np.float64)
    if px.shape[1] == 0 or px.shape[2] == 0:
        raise ValidationError("zero-area image")
    flat = px.reshape(px.shape[0], -1)
    feats = np.stack([flat.mean(axis=1), flat.std(axis=1), flat.min(axis=1),
                      flat.max(axis=1), np.median(flat, axis=1)], axis=1)
    return feats.reshape(-1)


def pixel_stats_table(images: Sequence[tuple[tuple[str, str, str, str, str], ImagePlanes]],
                      control_label: str = DEFAULT_CONTROL_LABEL) -> EmbeddingTable:
    """Embedding table of pixel-statistic features, one row per (metadata, image)."""
    if not images:
        raise ValidationError("no images given")
    meta = [m for m, _ in images]
    feats = np.vstack([pixel_stats(img) for _, img in images])
    return EmbeddingTable.from_arrays(meta, feats, control_label)


_PNG_NAME = re.compile(r"^(?P<well>.+)_c(?P<ch>\d+)\.png$")


def load_png_planes(paths: Sequence[str | Path]) -> ImagePlanes:
    """Stack single-channel 16-bit PNGs (given in channel order) into one image."""
    from PIL import Image

    planes = []
    for p in paths:
        with Image.open(p) as im:
            planes.append(np.array(im, dtype=np.uint16 if im.mode.startswith("I;16") else None))
    shapes = {pl.shape for pl in planes}
    if len(shapes) != 1:
        raise ValidationError(f"channel planes differ in shape: {sorted(shapes)}")
    return ImagePlanes(np.stack(planes))


def save_png_planes(image: ImagePlanes, directory: str | Path, well_id: str) -> list[Path]:
    from PIL import Image

    out = []
    for c in range(image.channels):
        p = Path(directory) / f"{well_id}_c{c}.png"
        Image.fromarray(np.asarray(image.pixels[c], dtype=np.uint16)).save(p)
        out.append(p)
    return out


def scan_png_wells(directory: str | Path) -> dict[str, list[Path]]:
    """Group ``<well_id>_c<k>.png`` files by well id, channels in order 0..k."""
    wells: dict[str, dict[int, Path]] = {}
    for p in sorted(Path(directory).iterdir()):
        m = _PNG_NAME.match(p.name)
        if m:
            wells.setdefault(m["well"], {})[int(m["ch"])] = p
    out = {}
    for well, chans in wells.items():
        if sorted(chans) != list(range(len(chans))):
            raise SchemaError(f"well {well}: channel files must be numbered 0..{len(chans) - 1}")
        out[well] = [chans[c] for c in range(len(chans))]
    return out


def load_raw_planes(path: str | Path) -> ImagePlanes:
    """Raw C-order ``(channels, height, width)`` file with a ``<path>.json`` sidecar."""
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    try:
        info = json.loads(sidecar.read_text(encoding="utf-8"))
        shape = (int(info["channels"]), int(info["height"]), int(info["width"]))
        dtype = np.dtype(info["dtype"])
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise SchemaError(f"{sidecar}: bad or missing sidecar ({exc})") from None
    data = np.fromfile(path, dtype=dtype)
    if data.size != int(np.prod(shape)):
        raise SchemaError(f"{path}: {data.size} values, sidecar declares shape {shape}")
    return ImagePlanes(data.reshape(shape))


def save_raw_planes(image: ImagePlanes, path: str | Path) -> None:
    path = Path(path)
    px = np.ascontiguousarray(image.pixels)
    px.tofile(path)
    info = {"channels": image.channels, "height": image.height, "width": image.width,
            "dtype": px.dtype.str}
    path.with_name(path.name + ".json").write_text(json.dumps(info, sort_keys=True) + "\n",
                                                   encoding="utf-8")
