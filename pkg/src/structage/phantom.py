"""Synthetic "aging brain" phantoms with known structure ages and sizes.

Structures are disjoint axis-aligned ellipsoids, one per cell of a regular
grid over the volume.  Inside structure j the intensity is

    b_j + a_j * (age + delta * [j affected]) + N(0, sigma)

and the background is 0.  Default slopes are negative, so tissue darkens
toward the background with age and atrophy.  Optional per-subject radius jitter and
disease-specific atrophy make structure volumes informative; with both set to
zero the label volume depends on the spec alone.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .volgrid import LabelVolume, voxel_counts_per_label

CLASSES = ("CN", "A", "B", "C", "D", "E")


@dataclass(frozen=True)
class DiseaseEffect:
    name: str
    affected: frozenset = frozenset()
    delta: float = 0.0  # years added to the effective age of affected structures
    atrophy: float = 0.0  # fractional radius loss of affected structures

    def __post_init__(self):
        object.__setattr__(self, "affected", frozenset(int(j) for j in self.affected))
        if self.name == "CN" and (self.delta != 0 or self.affected):
            raise ValueError("CN must have no disease effect")
        if not 0.0 <= self.atrophy < 1.0:
            raise ValueError("atrophy must lie in [0, 1)")


def default_effects() -> dict[str, DiseaseEffect]:
    """CN plus five disease analogs (AD, FTD, MS, PD, SZ in that order)."""
    return {
        "CN": DiseaseEffect("CN"),
        "A": DiseaseEffect("A", {1, 2}, 12.0, 0.10),
        "B": DiseaseEffect("B", {3, 4, 5}, 14.0, 0.10),
        "C": DiseaseEffect("C", {6}, 15.0, 0.10),
        "D": DiseaseEffect("D", {7}, 2.0, 0.12),
        "E": DiseaseEffect("E", {3, 8}, 7.0, 0.08),
    }


def _default_grid(s: int) -> tuple[int, int, int]:
    # smallest near-cubic grid with >= s cells, y axis longest (matches a 2:3:2 volume)
    best = None
    for gx in range(1, s + 1):
        for gy in range(1, s + 1):
            gz = math.ceil(s / (gx * gy))
            cost = (gx * gy * gz - s, max(gx, gy, gz) - min(gx, gy, gz), -gy)
            if best is None or cost < best[0]:
                best = (cost, (gx, gy, gz))
    return best[1]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 48, 32)
    num_structures: int = 12
    base: tuple[float, ...] = ()
    slope: tuple[float, ...] = ()
    noise_sigma: float | None = None  # None -> 2% of the dynamic range
    voxel_volume: float = 1.0  # mm^3
    centers: tuple[tuple[float, float, float], ...] = ()
    radii: tuple[tuple[float, float, float], ...] = ()
    radius_jitter: float = 0.06  # sd of the per-subject radius scale
    seed: int = 20230815  # drives the default intensity/geometry tables

    def __post_init__(self):
        s = self.num_structures
        if s < 1:
            raise ValueError("num_structures must be >= 1")
        rng = np.random.default_rng(self.seed)
        if not self.base:
            object.__setattr__(self, "base", tuple(float(v) for v in rng.uniform(1.3, 1.5, s)))
        if not self.slope:
            object.__setattr__(self, "slope", tuple(float(v) for v in rng.uniform(-0.012, -0.006, s)))
        if not self.centers:
            c, r = _default_geometry(self.dims, s, rng)
            object.__setattr__(self, "centers", c)
            object.__setattr__(self, "radii", r)
        if not (len(self.base) == len(self.slope) == len(self.centers) == len(self.radii) == s):
            raise ValueError("per-structure tables must all have num_structures entries")
        if sum(1 for a in self.slope if a != 0) * 2 < s:
            raise ValueError("at least half of the structures need a nonzero aging slope")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def dynamic_range(self) -> float:
        # largest |intensity| a structure can take over ages 0..100
        return max(max(abs(b), abs(b + a * 100.0)) for b, a in zip(self.base, self.slope))

    @property
    def sigma(self) -> float:
        return 0.02 * self.dynamic_range if self.noise_sigma is None else float(self.noise_sigma)


def _default_geometry(dims, s, rng):
    gx, gy, gz = _default_grid(s)
    cell = (dims[0] / gx, dims[1] / gy, dims[2] / gz)
    centers, radii = [], []
    for idx in range(s):
        i, j, k = idx % gx, (idx // gx) % gy, idx // (gx * gy)
        cen = tuple((n + 0.5) * c - 0.5 for n, c in zip((i, j, k), cell))
        # leave room for +3 sd of radius jitter inside the cell
        rad = tuple(float(c / 2 * rng.uniform(0.55, 0.72)) for c in cell)
        centers.append(tuple(float(v) for v in cen))
        radii.append(rad)
    return tuple(centers), tuple(radii)


@dataclass
class Subject:
    id: str
    volume: np.ndarray  # float32 intensities
    labels: LabelVolume
    age: float
    klass: str
    seed: int
    region_sizes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def structure_radii(spec: PhantomSpec, effect: DiseaseEffect, rng: np.random.Generator) -> np.ndarray:
    scale = 1.0 + spec.radius_jitter * rng.standard_normal(spec.num_structures)
    scale = np.clip(scale, 1.0 - 3 * spec.radius_jitter, 1.0 + 3 * spec.radius_jitter)
    for j in effect.affected:
        scale[j - 1] *= 1.0 - effect.atrophy
    return np.asarray(spec.radii) * scale[:, None]


def label_volume(spec: PhantomSpec, radii: np.ndarray) -> LabelVolume:
    grid = np.indices(spec.dims, dtype=np.float64)
    labels = np.zeros(spec.dims, dtype=np.uint16)
    for j, (cen, rad) in enumerate(zip(spec.centers, radii), start=1):
        inside = sum(((grid[ax] - cen[ax]) / rad[ax]) ** 2 for ax in range(3)) <= 1.0
        if np.any(labels[inside]):
            raise ValueError(f"structure {j} overlaps another structure")
        labels[inside] = j
    return LabelVolume(labels, spec.num_structures)


def generate_subject(spec: PhantomSpec, effect: DiseaseEffect, age: float, seed: int,
                     subject_id: str = "") -> Subject:
    if not 0.0 <= age <= 100.0:
        raise ValueError("age must lie in [0, 100]")
    rng = np.random.default_rng(seed)
    radii = structure_radii(spec, effect, rng)
    lv = label_volume(spec, radii)
    vol = np.zeros(spec.dims, dtype=np.float64)
    for j in range(1, spec.num_structures + 1):
        eff_age = age + (effect.delta if j in effect.affected else 0.0)
        vol[lv.labels == j] = spec.base[j - 1] + spec.slope[j - 1] * eff_age
    sigma = spec.sigma
    if sigma > 0:
        noise = rng.standard_normal(spec.dims) * sigma
        vol = np.where(lv.labels > 0, vol + noise, 0.0)
    return Subject(subject_id, vol.astype(np.float32), lv, float(age), effect.name, int(seed),
                   voxel_counts_per_label(lv))


def allocate_classes(mix: dict[str, float], n: int, rng: np.random.Generator, exact: bool = False) -> list[str]:
    if not mix or sum(mix.values()) <= 0:
        raise ValueError("class mix is empty")
    names = list(mix)
    p = np.array([mix[k] for k in names], dtype=np.float64)
    p /= p.sum()
    if not exact:
        return [names[i] for i in rng.choice(len(names), size=n, p=p)]
    # largest remainder allocation, then shuffle
    raw = p * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    out = [name for name, c in zip(names, counts) for _ in range(c)]
    return [out[i] for i in rng.permutation(n)]


def generate_cohort(spec: PhantomSpec, mix: dict[str, float], age_range: Sequence[float], n: int, seed: int,
                    effects: dict[str, DiseaseEffect] | None = None, exact_mix: bool = False,
                    prefix: str = "sub") -> list[Subject]:
    """N subjects with uniform ages and classes drawn from ``mix``; fully determined by ``seed``."""
    if n < 1:
        raise ValueError("cohort size must be >= 1")
    effects = effects or default_effects()
    unknown = set(mix) - set(effects)
    if unknown:
        raise ValueError(f"no disease effect for classes {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    lo, hi = age_range
    ages = rng.uniform(lo, hi, size=n)
    classes = allocate_classes(mix, n, rng, exact_mix)
    seeds = rng.integers(0, 2 ** 63, size=n)
    return [generate_subject(spec, effects[c], float(a), int(s), f"{prefix}{i:04d}")
            for i, (a, c, s) in enumerate(zip(ages, classes, seeds))]


def write_manifest(subjects: Sequence[Subject], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "age", "class", "seed"])
        for s in subjects:
            w.writerow([s.id, repr(s.age), s.klass, s.seed])


def read_manifest(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{"id": r["id"], "age": float(r["age"]), "class": r["class"], "seed": int(r["seed"])}
                for r in csv.DictReader(fh)]


def without_variation(spec: PhantomSpec) -> PhantomSpec:
    """Same spec with static geometry (no radius jitter)."""
    return replace(spec, radius_jitter=0.0)
