"""Brain Structure Ages: aggregation, per-structure bias correction, BSAGE, volumes."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .volgrid import LabelVolume, voxel_counts_per_label

log = logging.getLogger(__name__)


def compute_bsa(agemap: np.ndarray, labels: LabelVolume) -> np.ndarray:
    """Mean age per structure (index j-1 for label j); NaN marks a structure with no voxels."""
    if agemap.shape != labels.dims:
        raise ValueError(f"age map {agemap.shape} and labels {labels.dims} differ")
    s = labels.num_structures
    lab = labels.labels.ravel()
    sums = np.bincount(lab, weights=agemap.ravel().astype(np.float64), minlength=s + 1)[1:]
    counts = np.bincount(lab, minlength=s + 1)[1:]
    out = np.full(s, np.nan)
    present = counts > 0
    out[present] = sums[present] / counts[present]
    return out


def missing_structures(bsa: np.ndarray) -> list[int]:
    """1-based labels whose BSA is missing."""
    return [int(j) + 1 for j in np.flatnonzero(np.isnan(bsa))]


def compute_structure_volumes(labels: LabelVolume, voxel_volume: float = 1.0) -> np.ndarray:
    return voxel_counts_per_label(labels).astype(np.float64) * voxel_volume


def global_brainage(agemap: np.ndarray, labels: LabelVolume, age: float) -> float:
    """Mean predicted age over all labelled voxels minus chronological age."""
    if agemap.shape != labels.dims:
        raise ValueError(f"age map {agemap.shape} and labels {labels.dims} differ")
    brain = labels.labels > 0
    if not brain.any():
        raise ValueError("label volume has no brain voxels")
    return float(agemap[brain].astype(np.float64).mean() - age)


@dataclass
class CorrectionModel:
    beta: np.ndarray
    intercept: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"beta": [float(b) for b in self.beta],
                "intercept": None if self.intercept is None else [float(v) for v in self.intercept]}

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionModel":
        icpt = d.get("intercept")
        return cls(np.asarray(d["beta"], dtype=np.float64),
                   None if icpt is None else np.asarray(icpt, dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "CorrectionModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_bias_correction(X: np.ndarray, Y: np.ndarray, intercept: bool = False) -> CorrectionModel:
    """Per-structure least squares of true age on predicted structure age.

    Default is the pure slope beta_j = sum(x_ij y_i) / sum(x_ij^2).  With
    ``intercept`` an affine fit is used instead.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != Y.shape[0] or X.shape[0] < 2:
        raise ValueError("need N >= 2 subjects with matching X rows and Y entries")
    if np.isnan(X).any():
        raise ValueError("X contains missing structure ages; impute first")
    if not intercept:
        den = (X * X).sum(axis=0)
        if np.any(den == 0):
            raise ValueError(f"zero denominator for structures {list(np.flatnonzero(den == 0) + 1)}")
        return CorrectionModel((X * Y[:, None]).sum(axis=0) / den)
    xm = X.mean(axis=0)
    ym = Y.mean()
    den = ((X - xm) ** 2).sum(axis=0)
    if np.any(den == 0):
        raise ValueError(f"constant column for structures {list(np.flatnonzero(den == 0) + 1)}")
    slope = ((X - xm) * (Y - ym)[:, None]).sum(axis=0) / den
    return CorrectionModel(slope, ym - slope * xm)


def apply_bias_correction(model: CorrectionModel, bsa: np.ndarray) -> np.ndarray:
    bsa = np.asarray(bsa, dtype=np.float64)
    if bsa.shape[-1] != model.beta.shape[0]:
        raise ValueError(f"expected {model.beta.shape[0]} structures, got {bsa.shape[-1]}")
    out = model.beta * bsa
    if model.intercept is not None:
        out = out + model.intercept
    return out


def compute_bsage(corrected: np.ndarray, age) -> np.ndarray:
    """Signed structure age gap; ``age`` is a scalar or one age per row."""
    corrected = np.asarray(corrected, dtype=np.float64)
    age = np.asarray(age, dtype=np.float64)
    if np.any(age < 0):
        raise ValueError("age must be >= 0")
    if corrected.ndim == 2 and age.ndim == 1:
        age = age[:, None]
    return corrected - age


# ----------------------------------------------------------------------------
# feature table


@dataclass
class FeatureTable:
    subjects: list[str]
    ages: np.ndarray  # (N,)
    classes: list[str]
    bsa: np.ndarray  # (N, s) raw structure ages
    bsage: np.ndarray  # (N, s)
    volumes: np.ndarray  # (N, s)

    @property
    def num_structures(self) -> int:
        return self.bsa.shape[1]

    def __len__(self):
        return len(self.subjects)

    def subset(self, idx) -> "FeatureTable":
        idx = np.asarray(idx)
        return FeatureTable([self.subjects[i] for i in idx], self.ages[idx], [self.classes[i] for i in idx],
                            self.bsa[idx], self.bsage[idx], self.volumes[idx])

    def with_correction(self, model: CorrectionModel | None) -> "FeatureTable":
        corrected = self.bsa if model is None else apply_bias_correction(model, self.bsa)
        return FeatureTable(list(self.subjects), self.ages.copy(), list(self.classes), self.bsa.copy(),
                            compute_bsage(corrected, self.ages), self.volumes.copy())


def impute_missing(table: FeatureTable, reference: np.ndarray | None = None) -> FeatureTable:
    """Replace missing BSA entries with the healthy (CN) cohort mean of that structure."""
    bsa = table.bsa.copy()
    if not np.isnan(bsa).any():
        return table
    if reference is None:
        cn = np.array([c == "CN" for c in table.classes])
        pool = bsa[cn] if cn.any() else bsa
        reference = np.nanmean(pool, axis=0)
    for i, j in zip(*np.nonzero(np.isnan(bsa))):
        log.warning("imputing missing BSA of structure %d for subject %s with %.3f",
                    j + 1, table.subjects[i], reference[j])
        bsa[i, j] = reference[j]
    bsage = table.bsage.copy()
    bad = np.isnan(bsage)
    bsage[bad] = (bsa - table.ages[:, None])[bad]
    return FeatureTable(list(table.subjects), table.ages.copy(), list(table.classes), bsa, bsage,
                        table.volumes.copy())


def feature_header(s: int) -> list[str]:
    return (["subject", "age", "class"] + [f"bsa_{j}" for j in range(1, s + 1)]
            + [f"bsage_{j}" for j in range(1, s + 1)] + [f"vol_{j}" for j in range(1, s + 1)])


def write_features(table: FeatureTable, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(feature_header(table.num_structures))
        for i, sid in enumerate(table.subjects):
            row = [sid, repr(float(table.ages[i])), table.classes[i]]
            row += [repr(float(v)) for v in table.bsa[i]]
            row += [repr(float(v)) for v in table.bsage[i]]
            row += [repr(float(v)) for v in table.volumes[i]]
            w.writerow(row)


def read_features(path) -> FeatureTable:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty feature table")
    header = rows[0]
    s = (len(header) - 3) // 3
    if header != feature_header(s):
        raise ValueError(f"{path}: unexpected feature header")
    body = rows[1:]
    num = np.array([[float(v) for v in r[3:]] for r in body], dtype=np.float64).reshape(len(body), 3 * s)
    return FeatureTable([r[0] for r in body], np.array([float(r[1]) for r in body]), [r[2] for r in body],
                        num[:, :s], num[:, s:2 * s], num[:, 2 * s:])


def build_table(subject_ids: Sequence[str], ages, classes, bsa_rows, volume_rows,
                correction: CorrectionModel | None = None) -> FeatureTable:
    bsa = np.asarray(bsa_rows, dtype=np.float64)
    ages = np.asarray(ages, dtype=np.float64)
    t = FeatureTable(list(subject_ids), ages, list(classes), bsa, bsa - ages[:, None],
                     np.asarray(volume_rows, dtype=np.float64))
    t = impute_missing(t)
    return t.with_correction(correction)
