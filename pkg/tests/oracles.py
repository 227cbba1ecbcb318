"""Independent reference implementations used only by the tests.

Each oracle is written from the defining formula, without reusing the
package code path it checks.
"""

from __future__ import annotations

import itertools

import numpy as np


def round_half_away(x: float) -> int:
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


def origins_float(D: int, d: int, k: int) -> list[int]:
    """Patch origins by floating-point evaluation of i*(D-d)/(k-1)."""
    if k == 1:
        return [0]
    return [round_half_away(i * (D - d) / (k - 1)) for i in range(k)]


def two_pass_average(patches, origins, patch_dims, volume_dims) -> np.ndarray:
    """Accumulate sums and counts voxel by voxel in patch order, then divide once."""
    ox, oy, oz = origins
    k = len(ox)
    total = np.zeros(volume_dims, dtype=np.float64)
    count = np.zeros(volume_dims, dtype=np.int64)
    it = iter(patches)
    for a, b, c in serpentine(k):
        p = next(it)
        for i, j, l in itertools.product(*(range(n) for n in patch_dims)):
            total[ox[a] + i, oy[b] + j, oz[c] + l] += float(p[i, j, l])
            count[ox[a] + i, oy[b] + j, oz[c] + l] += 1
    assert count.min() >= 1
    return (total / count).astype(np.float32)


def serpentine(k: int) -> list[tuple[int, int, int]]:
    """Boustrophedon walk written as a snake over rows of x, rows stacked in y then z."""
    out = []
    row = 0
    for z in range(k):
        ys = range(k) if z % 2 == 0 else range(k - 1, -1, -1)
        for y in ys:
            xs = range(k) if row % 2 == 0 else range(k - 1, -1, -1)
            out.extend((x, y, z) for x in xs)
            row += 1
    return out


def conv3d_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation by explicit loops over kernel taps."""
    n, cin, X, Y, Z = x.shape
    cout, _, k, _, _ = w.shape
    r = k // 2
    xp = np.zeros((n, cin, X + 2 * r, Y + 2 * r, Z + 2 * r), dtype=np.float64)
    xp[:, :, r:r + X, r:r + Y, r:r + Z] = x
    out = np.zeros((n, cout, X, Y, Z), dtype=np.float64)
    for dx, dy, dz in itertools.product(range(k), repeat=3):
        window = xp[:, :, dx:dx + X, dy:dy + Y, dz:dz + Z]
        out += np.einsum("ncxyz,oc->noxyz", window, w[:, :, dx, dy, dz].astype(np.float64))
    return out + b.astype(np.float64)[None, :, None, None, None]


def trilinear_point(v: np.ndarray, coord) -> float:
    """Trilinear interpolation at a fractional source coordinate from the 8 corners."""
    base = [int(np.floor(c)) for c in coord]
    frac = [c - f for c, f in zip(coord, base)]
    total = 0.0
    for corner in itertools.product((0, 1), repeat=3):
        idx = [min(f + o, n - 1) for f, o, n in zip(base, corner, v.shape)]
        wgt = np.prod([fr if o else 1.0 - fr for fr, o in zip(frac, corner)])
        total += wgt * float(v[tuple(idx)])
    return total


def auc_all_pairs(scores, positive) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    pos, neg = scores[positive], scores[~positive]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (pos.size * neg.size)


def project_box_hyperplane(v: np.ndarray, y: np.ndarray, C: float) -> np.ndarray:
    """Euclidean projection onto {0 <= a <= C, y.a = 0}.

    The projection is clip(v - nu*y, 0, C) with nu a root of the
    non-increasing piecewise-linear h(nu) = y.clip(v - nu*y, 0, C); the root is
    found exactly between consecutive breakpoints.
    """
    bps = np.unique(np.concatenate([y * v, y * (v - C)]))
    h = (y[None, :] * np.clip(v[None, :] - bps[:, None] * y[None, :], 0.0, C)).sum(axis=1)
    if h[0] <= 0:
        nu = bps[0]
    elif h[-1] >= 0:
        nu = bps[-1]
    else:
        k = int(np.flatnonzero(h <= 0)[0])
        a, b, ha, hb = bps[k - 1], bps[k], h[k - 1], h[k]
        nu = a + (b - a) * ha / (ha - hb)
    return np.clip(v - nu * y, 0.0, C)


def svm_dual_pg(K: np.ndarray, y: np.ndarray, C: float, iters: int = 3000) -> tuple[np.ndarray, float]:
    """Accelerated projected gradient ascent on the soft-margin dual; returns (alpha, objective)."""
    Q = K * np.outer(y, y)
    L = max(float(np.linalg.eigvalsh(Q).max()), 1e-12)
    a = np.zeros(y.size)
    z = a.copy()
    t = 1.0
    for _ in range(iters):
        an = project_box_hyperplane(z + (1.0 - Q @ z) / L, y, C)
        tn = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        z = an + (t - 1.0) / tn * (an - a)
        a, t = an, tn
    return a, float(a.sum() - 0.5 * a @ Q @ a)


def finite_difference(f, params: list[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central differences of scalar f() with respect to every entry of every array, in place."""
    out = []
    for p in params:
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def linear_decoding_mae(train_x, train_y, test_x, test_y) -> float:
    """Least-squares decoder of age from per-structure mean intensity (with intercept)."""
    A = np.c_[train_x, np.ones(len(train_x))]
    w, *_ = np.linalg.lstsq(A, train_y, rcond=None)
    pred = np.c_[test_x, np.ones(len(test_x))] @ w
    return float(np.mean(np.abs(pred - test_y)))


def scatter_average(patches, origins, patch_dims, volume_dims) -> np.ndarray:
    """Same sum/count average as two_pass_average, accumulated with np.add.at on flat indices.

    Fast enough for full-size volumes; patches are visited in serpentine order.
    """
    ox, oy, oz = origins
    nx, ny, nz = volume_dims
    total = np.zeros(nx * ny * nz, dtype=np.float64)
    count = np.zeros(nx * ny * nz, dtype=np.int64)
    gi, gj, gl = np.meshgrid(*(np.arange(n) for n in patch_dims), indexing="ij")
    it = iter(patches)
    for a, b, c in serpentine(len(ox)):
        flat = ((ox[a] + gi) * ny + (oy[b] + gj)) * nz + (oz[c] + gl)
        np.add.at(total, flat.ravel(), np.asarray(next(it), dtype=np.float64).ravel())
        np.add.at(count, flat.ravel(), 1)
    assert count.min() >= 1
    return (total / count).astype(np.float32).reshape(volume_dims)
