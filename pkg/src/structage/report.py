"""Population summaries and per-structure BSAGE slice images (binary PPM)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bsa import FeatureTable
from .volgrid import LabelVolume

CLASS_ORDER = ("CN", "A", "B", "C", "D", "E")
COLOR_LIMIT = 15.0  # years at which the colormap saturates


def global_brainage_from_features(table: FeatureTable) -> np.ndarray:
    """Whole-brain gap from the structure table.

    Each BSA is a mean over its structure's voxels, so the volume-weighted mean
    of the raw BSA equals the mean predicted age over all labelled voxels.
    """
    vol = np.where(np.isnan(table.bsa), 0.0, table.volumes)
    total = vol.sum(axis=1)
    if np.any(total <= 0):
        raise ValueError("subject without labelled voxels")
    return (np.nansum(table.bsa * vol, axis=1) / total) - table.ages


@dataclass
class ClassSummary:
    klass: str
    n: int
    mean_brainage: float
    median_brainage: float
    mean_bsage: np.ndarray


def population_summary(table: FeatureTable, classes: Sequence[str] | None = None) -> list[ClassSummary]:
    """Per-class global BrainAGE (mean and median) and mean BSAGE per structure.

    Classes are reported in the order CN, A..E, followed by any other class
    names sorted.  Naming a class that has no subjects is an error.
    """
    if len(table) == 0:
        raise ValueError("empty feature table")
    labels = np.asarray(table.classes, dtype=object)
    present = set(table.classes)
    if classes is None:
        classes = [c for c in CLASS_ORDER if c in present] + sorted(present - set(CLASS_ORDER))
    gap = global_brainage_from_features(table)
    out = []
    for c in classes:
        m = labels == c
        if not m.any():
            raise ValueError(f"class {c!r} has no subjects")
        out.append(ClassSummary(c, int(m.sum()), float(gap[m].mean()), float(np.median(gap[m])),
                                table.bsage[m].mean(axis=0)))
    return out


def write_population_summary(rows: Sequence[ClassSummary], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    s = rows[0].mean_bsage.size if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "n", "mean_brainage", "median_brainage"] + [f"bsage_{j}" for j in range(1, s + 1)])
        for r in rows:
            w.writerow([r.klass, r.n, repr(r.mean_brainage), repr(r.median_brainage)]
                       + [repr(float(v)) for v in r.mean_bsage])


# ----------------------------------------------------------------------------
# colormap and slices


def diverging_rgb(values, limit: float = COLOR_LIMIT) -> np.ndarray:
    """Blue (-limit) -> white (0) -> red (+limit), clamped; uint8 RGB per value."""
    if limit <= 0:
        raise ValueError("limit must be positive")
    t = np.clip(np.asarray(values, dtype=np.float64) / limit, -1.0, 1.0)
    fade = np.floor(255.0 * (1.0 - np.abs(t)) + 0.5)
    rgb = np.empty(t.shape + (3,), dtype=np.float64)
    rgb[..., 0] = np.where(t >= 0, 255.0, fade)
    rgb[..., 1] = fade
    rgb[..., 2] = np.where(t <= 0, 255.0, fade)
    return rgb.astype(np.uint8)


def structure_slice(values: Sequence[float], labels: LabelVolume, axis: int, index: int,
                    limit: float = COLOR_LIMIT) -> np.ndarray:
    """RGB image (rows, cols, 3) of one slice, each structure painted with its value.

    For ``axis`` a the remaining axes (p, q) in increasing order give columns
    along p and rows along q.  Background and structures with a missing value
    are black.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size != labels.num_structures:
        raise ValueError(f"expected {labels.num_structures} values, got {values.size}")
    if axis not in (0, 1, 2):
        raise ValueError("axis must be 0, 1 or 2")
    n = labels.dims[axis]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} outside 0..{n - 1}")
    sl = np.take(labels.labels, index, axis=axis).astype(np.int64)  # (p, q)
    lut = np.zeros((labels.num_structures + 1, 3), dtype=np.uint8)
    lut[1:] = diverging_rgb(np.nan_to_num(values), limit)
    lut[1:][np.isnan(values)] = 0
    return np.ascontiguousarray(lut[sl].transpose(1, 0, 2))


def ppm_bytes(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("expected a (rows, cols, 3) uint8 image")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes()


def write_ppm(image: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ppm_bytes(image))


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
