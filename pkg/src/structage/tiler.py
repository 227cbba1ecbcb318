"""k x k x k overlapping patch layout, extraction, and overlap-average reconstruction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


def compute_origins(D: int, d: int, k: int) -> list[int]:
    """k evenly spread patch starts on an axis of length D, first 0 and last D - d.

    Fractional positions round half away from zero (exact integer arithmetic).
    """
    if d > D:
        raise ValueError(f"patch length {d} exceeds axis length {D}")
    if k < 1 or d < 1:
        raise ValueError("k and d must be positive")
    if k == 1:
        return [0]
    span, den = D - d, k - 1
    out = []
    for i in range(k):
        q, r = divmod(i * span, den)
        out.append(q + (1 if 2 * r >= den else 0))
    return out


def chain_order(k: int) -> list[tuple[int, int, int]]:
    """Serpentine walk over the k^3 grid; consecutive cells differ by one step on one axis."""
    if k < 1:
        raise ValueError("k must be >= 1")
    order = []
    for c in range(k):
        ys = range(k) if c % 2 == 0 else range(k - 1, -1, -1)
        for j, b in enumerate(ys):
            # x direction alternates with every row visited so far
            row = c * k + j
            xs = range(k) if row % 2 == 0 else range(k - 1, -1, -1)
            for a in xs:
                order.append((a, b, c))
    return order


@dataclass(frozen=True)
class PatchLayout:
    k: int
    patch_dims: tuple[int, int, int]
    volume_dims: tuple[int, int, int]
    origins: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]

    @classmethod
    def build(cls, volume_dims: Sequence[int], patch_dims: Sequence[int], k: int) -> "PatchLayout":
        volume_dims = tuple(int(v) for v in volume_dims)
        patch_dims = tuple(int(p) for p in patch_dims)
        origins = tuple(tuple(compute_origins(D, d, k)) for D, d in zip(volume_dims, patch_dims))
        return cls(k, patch_dims, volume_dims, origins)

    @property
    def m(self) -> int:
        return self.k ** 3

    def positions(self) -> list[tuple[int, int, int]]:
        """Grid positions in enumeration (= serpentine chain) order."""
        return chain_order(self.k)

    def origin(self, pos: tuple[int, int, int]) -> tuple[int, int, int]:
        return tuple(self.origins[ax][pos[ax]] for ax in range(3))

    def slices(self, pos) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + d) for o, d in zip(self.origin(pos), self.patch_dims))

    def to_dict(self) -> dict:
        return {"k": self.k, "patch_dims": list(self.patch_dims),
                "volume_dims": list(self.volume_dims), "origins": [list(o) for o in self.origins]}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchLayout":
        return cls(int(d["k"]), tuple(d["patch_dims"]), tuple(d["volume_dims"]),
                   tuple(tuple(o) for o in d["origins"]))


def _check(layout: PatchLayout, dims):
    if tuple(dims) != layout.volume_dims:
        raise ValueError(f"volume dims {tuple(dims)} do not match layout {layout.volume_dims}")


def extract_patches(v: np.ndarray, layout: PatchLayout) -> list[np.ndarray]:
    _check(layout, v.shape)
    return [v[layout.slices(pos)] for pos in layout.positions()]


def reconstruct_average(patches: Sequence[np.ndarray], layout: PatchLayout) -> np.ndarray:
    """Voxel-wise mean of all patch values covering each voxel.

    Sums accumulate in float64 in patch enumeration order, one division at the end.
    """
    if len(patches) != layout.m:
        raise ValueError(f"expected {layout.m} patches, got {len(patches)}")
    total = np.zeros(layout.volume_dims, dtype=np.float64)
    count = np.zeros(layout.volume_dims, dtype=np.int64)
    for pos, p in zip(layout.positions(), patches):
        if tuple(p.shape) != layout.patch_dims:
            raise ValueError(f"patch shape {p.shape} != {layout.patch_dims}")
        sl = layout.slices(pos)
        total[sl] += p
        count[sl] += 1
    if count.min() < 1:
        raise ValueError("layout leaves voxels uncovered")
    return (total / count).astype(np.float32)


def coverage_map(layout: PatchLayout) -> np.ndarray:
    count = np.zeros(layout.volume_dims, dtype=np.int64)
    for pos in layout.positions():
        count[layout.slices(pos)] += 1
    return count
