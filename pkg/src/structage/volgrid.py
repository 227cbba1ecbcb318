"""Dense 3D volumes, label volumes, resampling and the .vol3/.lab3 file formats.

A volume is a plain ``float32`` numpy array of shape ``(nx, ny, nz)``.  On disk
the payload is written x-fastest (Fortran order), little-endian.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

VOL_MAGIC = b"VOL3"
LAB_MAGIC = b"LAB3"
# refuse headers that would allocate more than this many voxels
MAX_VOXELS = 1 << 31


class VolumeFormatError(ValueError):
    """Malformed .vol3/.lab3 file."""


@dataclass
class LabelVolume:
    labels: np.ndarray  # uint16, shape (nx, ny, nz); 0 is background
    num_structures: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError("label volume must be 3D")
        if self.num_structures < 1:
            raise ValueError("num_structures must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_structures):
            raise ValueError(f"labels must lie in [0, {self.num_structures}]")
        self.labels = self.labels.astype(np.uint16, copy=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


def working_dims(native_dims: Sequence[int]) -> tuple[int, ...]:
    return tuple(-(-int(n) // 2) for n in native_dims)


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive ints, got {dims}")
    return dims


def create_volume(dims: Sequence[int], fill: float = 0.0) -> np.ndarray:
    return np.full(_check_dims(dims), fill, dtype=np.float32)


def _smooth_axis(a, axis):
    # [1, 2, 1] / 4 with edge replication
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 1)
    p = np.pad(a, pad, mode="edge")
    n = a.shape[axis]
    lo = np.take(p, np.arange(0, n), axis=axis)
    mid = np.take(p, np.arange(1, n + 1), axis=axis)
    hi = np.take(p, np.arange(2, n + 2), axis=axis)
    return 0.25 * lo + 0.5 * mid + 0.25 * hi


def downscale_by2(v: np.ndarray, smooth: bool = False) -> np.ndarray:
    """Stride-2 subsampling: out[i, j, k] = v[2i, 2j, 2k]; output dims are ceil(n / 2).

    With ``smooth`` a separable [1, 2, 1]/4 filter is applied first.
    """
    v = np.asarray(v)
    if smooth:
        w = v.astype(np.float64)
        for ax in range(3):
            w = _smooth_axis(w, ax)
        v = w.astype(np.float32)
    return np.ascontiguousarray(v[::2, ::2, ::2]).astype(np.float32, copy=False)


def _interp_axis(a: np.ndarray, axis: int, target: int) -> np.ndarray:
    n = a.shape[axis]
    if target == n:
        return a
    if n == 1:
        return np.repeat(a, target, axis=axis)
    coord = np.arange(target, dtype=np.float64) * (n - 1) / (target - 1)
    i0 = np.minimum(np.floor(coord).astype(np.int64), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    w = coord - i0
    shape = [1] * a.ndim
    shape[axis] = target
    w = w.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - w) + np.take(a, i1, axis=axis) * w


def upsample_trilinear(v: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Trilinear resampling to ``target`` dims with align-corners index mapping."""
    target = _check_dims(target)
    if any(t < s for t, s in zip(target, v.shape)):
        raise ValueError(f"target {target} smaller than source {v.shape}")
    out = np.asarray(v, dtype=np.float64)
    for ax in range(3):
        out = _interp_axis(out, ax, target[ax])
    return out.astype(np.float32)


def voxel_counts_per_label(lv: LabelVolume) -> np.ndarray:
    """count[j-1] = number of voxels with label j, j = 1..s."""
    counts = np.bincount(lv.labels.ravel(), minlength=lv.num_structures + 1)
    if counts.size > lv.num_structures + 1:
        raise ValueError("label exceeds num_structures")
    return counts[1:].astype(np.int64)


# ----------------------------------------------------------------------------
# file I/O


def _write(path, header: bytes, payload: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.ravel(order="F").tobytes())


def store_volume(v: np.ndarray, path) -> None:
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError("volume must be 3D")
    if not np.all(np.isfinite(v)):
        raise ValueError("volume contains non-finite values")
    header = VOL_MAGIC + struct.pack("<3I", *v.shape)
    _write(path, header, v.astype("<f4", copy=False))


def _read_header(raw: bytes, magic: bytes, path) -> tuple[int, int, int]:
    if len(raw) < 16:
        raise VolumeFormatError(f"{path}: file too short for header")
    if raw[:4] != magic:
        raise VolumeFormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    dims = struct.unpack("<3I", raw[4:16])
    if min(dims) < 1:
        raise VolumeFormatError(f"{path}: zero dimension in header {dims}")
    if math.prod(dims) > MAX_VOXELS:
        raise VolumeFormatError(f"{path}: dims {dims} overflow the voxel limit")
    return dims


def load_volume(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    dims = _read_header(raw, VOL_MAGIC, path)
    n = math.prod(dims)
    payload = raw[16:]
    if len(payload) != 4 * n:
        raise VolumeFormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * n} (truncated?)")
    return np.frombuffer(payload, dtype="<f4").reshape(dims, order="F").astype(np.float32)


def store_labels(lv: LabelVolume, path) -> None:
    header = LAB_MAGIC + struct.pack("<3IH", *lv.labels.shape, lv.num_structures)
    _write(path, header, lv.labels.astype("<u2", copy=False))


def load_labels(path) -> LabelVolume:
    raw = Path(path).read_bytes()
    dims = _read_header(raw, LAB_MAGIC, path)
    if len(raw) < 18:
        raise VolumeFormatError(f"{path}: file too short for header")
    (s,) = struct.unpack("<H", raw[16:18])
    n = math.prod(dims)
    payload = raw[18:]
    if len(payload) != 2 * n:
        raise VolumeFormatError(f"{path}: payload has {len(payload)} bytes, expected {2 * n} (truncated?)")
    labels = np.frombuffer(payload, dtype="<u2").reshape(dims, order="F").astype(np.uint16)
    return LabelVolume(labels, s)
