"""Chronological-age MLP ensemble and one-vs-one kernel SVM classification.

The SVM is trained with SMO (maximal-violating-pair working set with
second-order selection of the partner); everything runs on precomputed
kernel matrices so grid search reuses them across values of C.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nnkit
from .evalkit import classification_metrics
from .nnkit import Dense, Network, ReLU

log = logging.getLogger(__name__)

KERNELS = ("linear", "poly", "rbf")


# ----------------------------------------------------------------------------
# standardization


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0  # constant features map to 0
        return cls(mean, scale)

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))


def kfold_indices(n: int, folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled partition of range(n) into ``folds`` near-equal parts."""
    if n < folds:
        raise ValueError(f"need at least {folds} samples for {folds}-fold CV, got {n}")
    return [np.sort(f) for f in np.array_split(rng.permutation(n), folds)]


def stratified_folds(labels: Sequence, folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Deal each class's shuffled members round-robin across folds.

    Classes with fewer members than folds still get dealt (some folds simply
    lack them); a warning is raised.
    """
    labels = np.asarray(labels, dtype=object)
    out: list[list[int]] = [[] for _ in range(folds)]
    start = 0
    for c in sorted(set(labels.tolist())):
        members = np.flatnonzero(labels == c)
        if members.size < folds:
            warnings.warn(f"class {c!r} has {members.size} < {folds} members; folds will not all contain it")
        members = members[rng.permutation(members.size)]
        for i, m in enumerate(members):
            out[(start + i) % folds].append(int(m))
        start += members.size
    return [np.array(sorted(f), dtype=np.int64) for f in out]


# ----------------------------------------------------------------------------
# MLP regression


@dataclass(frozen=True)
class MlpRecipe:
    batch_size: int = 8
    patience: int = 50
    max_epochs: int = 1000
    lr: float = 1e-3


def build_mlp(s: int, rng: np.random.Generator) -> Network:
    """Dense s -> 4s -> 2s -> s -> 1 with ReLU between layers."""
    net = Network()
    widths = [s, 4 * s, 2 * s, s, 1]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        net.add(Dense(a, b, rng))
        if i < len(widths) - 2:
            net.add(ReLU())
    return net


def mlp_widths(net: Network) -> list[int]:
    return [n.layer.nout for n in net.nodes if isinstance(n.layer, Dense)]


@dataclass
class MlpFold:
    net: Network
    x_norm: Standardizer
    y_center: float
    y_scale: float
    best_epoch: int = 0
    epochs_run: int = 0
    best_val_mae: float = float("nan")

    def predict(self, X) -> np.ndarray:
        x = self.x_norm.transform(np.atleast_2d(X)).astype(np.float32)
        return nnkit.forward(self.net, x)[:, 0].astype(np.float64) * self.y_scale + self.y_center


@dataclass
class MlpEnsemble:
    folds: list  # MlpFold or any object with predict(X) -> ages

    def predict_each(self, X) -> np.ndarray:
        return np.stack([f.predict(X) for f in self.folds])

    def predict(self, X) -> np.ndarray:
        return self.predict_each(X).mean(axis=0)


def predict_age(ens: MlpEnsemble, features) -> np.ndarray | float:
    """Mean of the fold models' predictions; scalar for a single feature vector."""
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    folds = [f for f in ens.folds if isinstance(f, MlpFold)]
    if folds and np.atleast_2d(X).shape[1] != folds[0].x_norm.mean.shape[0]:
        raise ValueError("feature length does not match the ensemble")
    out = ens.predict(np.atleast_2d(X))
    return float(out[0]) if single else out


def _train_mlp_fold(X_tr, y_tr, X_va, y_va, recipe: MlpRecipe, rng) -> MlpFold:
    norm = Standardizer.fit(X_tr)
    yc, ys = float(y_tr.mean()), float(y_tr.std()) or 1.0
    xt = norm.transform(X_tr).astype(np.float32)
    xv = norm.transform(X_va).astype(np.float32)
    yt = ((y_tr - yc) / ys).astype(np.float32)[:, None]
    net = build_mlp(X_tr.shape[1], rng)
    opt = nnkit.OptimizerState("adam", recipe.lr)
    best, best_epoch, best_params = np.inf, 0, net.get_params()
    epoch = 0
    while epoch < recipe.max_epochs:
        epoch += 1
        order = rng.permutation(len(xt))
        for s in range(0, len(order), recipe.batch_size):
            idx = order[s:s + recipe.batch_size]
            _, grads = nnkit.gradients(net, xt[idx], yt[idx])
            nnkit.optimizer_step(opt, net.param_list(), grads)
        pred = nnkit.forward(net, xv)[:, 0].astype(np.float64) * ys + yc
        score = float(np.mean(np.abs(pred - y_va)))
        if score < best:
            best, best_epoch, best_params = score, epoch, net.get_params()
        elif epoch - best_epoch >= recipe.patience:
            break
    net.set_params(best_params)
    return MlpFold(net, norm, yc, ys, best_epoch, epoch, best)


def train_mlp_cv(features, ages, folds: int = 10, recipe: MlpRecipe = MlpRecipe(),
                 rng: np.random.Generator | None = None) -> MlpEnsemble:
    """One MLP per fold: trained on the other folds, early-stopped on the held-out fold."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(ages, dtype=np.float64)
    rng = rng or np.random.default_rng(0)
    parts = kfold_indices(len(X), folds, rng)
    models = []
    for i, va in enumerate(parts):
        tr = np.setdiff1d(np.arange(len(X)), va)
        m = _train_mlp_fold(X[tr], y[tr], X[va], y[va], recipe, rng)
        log.info("mlp fold %d: best val MAE %.3f at epoch %d", i, m.best_val_mae, m.best_epoch)
        models.append(m)
    return MlpEnsemble(models)


def save_mlp(ens: MlpEnsemble, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    folds = []
    for i, f in enumerate(ens.folds):
        nnkit.save_network(f.net, directory / f"fold_{i:02d}")
        folds.append({"file": f"fold_{i:02d}", "x_norm": f.x_norm.to_dict(), "y_center": f.y_center,
                      "y_scale": f.y_scale, "best_epoch": f.best_epoch, "epochs_run": f.epochs_run,
                      "best_val_mae": f.best_val_mae})
    (directory / "mlp.json").write_text(json.dumps({"format": "mlp-ensemble/1", "folds": folds}, indent=1))


def load_mlp(directory) -> MlpEnsemble:
    directory = Path(directory)
    meta = json.loads((directory / "mlp.json").read_text())
    return MlpEnsemble([MlpFold(nnkit.load_network(directory / f["file"]), Standardizer.from_dict(f["x_norm"]),
                                f["y_center"], f["y_scale"], f["best_epoch"], f["epochs_run"], f["best_val_mae"])
                        for f in meta["folds"]])


# ----------------------------------------------------------------------------
# kernels


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    gamma: float | None = None  # None -> 1 / n_features
    coef0: float = 1.0
    degree: int = 3

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown kernel {self.kind!r}")

    def resolved(self, n_features: int) -> "KernelSpec":
        if self.gamma is not None:
            return self
        return KernelSpec(self.kind, 1.0 / n_features, self.coef0, self.degree)

    def to_dict(self):
        return {"kind": self.kind, "gamma": self.gamma, "coef0": self.coef0, "degree": self.degree}


def kernel_eval(spec: KernelSpec, x, z) -> float:
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise ValueError("kernel arguments differ in length")
    spec = spec.resolved(x.size)
    if spec.kind == "linear":
        return float(x @ z)
    if spec.kind == "poly":
        return float((spec.gamma * (x @ z) + spec.coef0) ** spec.degree)
    return float(np.exp(-spec.gamma * np.sum((x - z) ** 2)))


def kernel_matrix(spec: KernelSpec, A, B) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    spec = spec.resolved(A.shape[1])
    dot = A @ B.T
    if spec.kind == "linear":
        return dot
    if spec.kind == "poly":
        return (spec.gamma * dot + spec.coef0) ** spec.degree
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * dot
    return np.exp(-spec.gamma * np.maximum(sq, 0.0))


# ----------------------------------------------------------------------------
# SMO


@dataclass
class SmoResult:
    alpha: np.ndarray
    bias: float
    iterations: int
    violation: float

    def dual_objective(self, K: np.ndarray, y: np.ndarray) -> float:
        return dual_objective(self.alpha, K, y)


def dual_objective(alpha, K, y) -> float:
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


def smo_solve(K: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-3, max_iter: int = 100_000) -> SmoResult:
    """Maximize sum(a) - 1/2 (a*y)^T K (a*y) s.t. 0 <= a <= C, y^T a = 0."""
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if C <= 0:
        raise ValueError("C must be positive")
    Q = K * np.outer(y, y)
    diag = np.diag(Q).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)  # gradient of 1/2 a^T Q a - e^T a
    pos = y > 0
    tau = 1e-12
    it = 0
    gap = np.inf
    while it < max_iter:
        at_upper = alpha >= C
        at_lower = alpha <= 0
        up = (pos & ~at_upper) | (~pos & ~at_lower)
        low = (pos & ~at_lower) | (~pos & ~at_upper)
        minus_yg = -y * G
        if not up.any() or not low.any():
            gap = 0.0
            break
        i = int(np.argmax(np.where(up, minus_yg, -np.inf)))
        m_up = minus_yg[i]
        gap = m_up - np.min(np.where(low, minus_yg, np.inf))
        if gap < tol:
            break
        # second-order choice of j among violating members of the low set
        b = m_up - minus_yg
        cand = low & (b > 0)
        a = diag[i] + diag - 2.0 * K[i]
        a = np.where(a > 0, a, tau)
        j = int(np.argmax(np.where(cand, b * b / a, -np.inf)))
        it += 1
        # two-variable subproblem (LIBSVM update rules)
        ai_old, aj_old = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = max(diag[i] + diag[j] + 2.0 * Q[i, j], tau)
            delta = (-G[i] - G[j]) / quad
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            quad = max(diag[i] + diag[j] - 2.0 * Q[i, j], tau)
            delta = (G[i] - G[j]) / quad
            total = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        G += Q[:, i] * (ai - ai_old) + Q[:, j] * (aj - aj_old)

    minus_yg = -y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        bias = float(minus_yg[free].mean())
    else:
        at_upper = alpha >= C
        at_lower = alpha <= 0
        up = (pos & ~at_upper) | (~pos & ~at_lower)
        low = (pos & ~at_lower) | (~pos & ~at_upper)
        hi = minus_yg[up].max() if up.any() else 0.0
        lo = minus_yg[low].min() if low.any() else 0.0
        bias = float((hi + lo) / 2.0)
    return SmoResult(alpha, bias, it, float(gap))


@dataclass
class BinarySvm:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i
    bias: float
    kernel: KernelSpec

    def decision(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.support_vectors.shape[0] == 0:
            return np.full(X.shape[0], self.bias)
        return kernel_matrix(self.kernel, X, self.support_vectors) @ self.dual_coef + self.bias


def _binary_from_solution(X, y, res: SmoResult, kernel: KernelSpec) -> BinarySvm:
    sv = res.alpha > 0
    return BinarySvm(np.asarray(X)[sv].copy(), (res.alpha * y)[sv], res.bias, kernel)


def smo_train_binary(X, y, kernel: KernelSpec, C: float, tol: float = 1e-3) -> BinarySvm:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if set(np.unique(y).tolist()) != {-1.0, 1.0}:
        raise ValueError("binary SVM needs labels from both classes -1 and +1")
    kernel = kernel.resolved(X.shape[1])
    res = smo_solve(kernel_matrix(kernel, X, X), y, C, tol)
    return _binary_from_solution(X, y, res, kernel)


# ----------------------------------------------------------------------------
# one-vs-one


@dataclass
class SvmModel:
    classes: list
    pairs: list  # (class_a, class_b, BinarySvm); +1 means class_a
    norm: Standardizer
    kernel: KernelSpec
    C: float

    def decisions(self, X) -> np.ndarray:
        Z = self.norm.transform(np.atleast_2d(X))
        return np.stack([m.decision(Z) for _, _, m in self.pairs], axis=1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _vote(classes, pair_index, dec):
    n = dec.shape[0]
    nc = len(classes)
    votes = np.zeros((n, nc))
    margin = np.zeros((n, nc))
    for p, (a, b) in enumerate(pair_index):
        d = dec[:, p]
        win_a = d > 0
        votes[:, a] += win_a
        votes[:, b] += ~win_a
        margin[:, a] += d
        margin[:, b] -= d
    scores = votes + _sigmoid(margin)
    return scores


def ovo_train(X, labels, kernel: KernelSpec, C: float, tol: float = 1e-3) -> SvmModel:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    labels = list(labels)
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    lab = np.asarray(labels, dtype=object)
    for c in classes:
        if (lab == c).sum() < 2:
            raise ValueError(f"class {c!r} has fewer than 2 samples")
    norm = Standardizer.fit(X)
    Z = norm.transform(X)
    kernel = kernel.resolved(X.shape[1])
    K = kernel_matrix(kernel, Z, Z)
    pairs = []
    for a, b in combinations(classes, 2):
        idx = np.flatnonzero((lab == a) | (lab == b))
        y = np.where(lab[idx] == a, 1.0, -1.0)
        res = smo_solve(K[np.ix_(idx, idx)], y, C, tol)
        pairs.append((a, b, _binary_from_solution(Z[idx], y, res, kernel)))
    return SvmModel(classes, pairs, norm, kernel, C)


def ovo_scores(model: SvmModel, X) -> np.ndarray:
    """Per-class score = votes + logistic(summed signed margins); (N, n_classes)."""
    index = {c: i for i, c in enumerate(model.classes)}
    pair_index = [(index[a], index[b]) for a, b, _ in model.pairs]
    return _vote(model.classes, pair_index, model.decisions(X))


def ovo_classify(model: SvmModel, x):
    """Class of a single sample (or list of classes for a batch) and the per-class scores."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    scores = ovo_scores(model, np.atleast_2d(X))
    pred = [model.classes[i] for i in np.argmax(scores, axis=1)]
    return (pred[0], scores[0]) if single else (pred, scores)


def save_svm(model: SvmModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pairs = []
    for n, (a, b, m) in enumerate(model.pairs):
        name = f"pair_{n:03d}.bin"
        payload = np.concatenate([m.support_vectors.ravel(), m.dual_coef]).astype("<f8")
        (directory / name).write_bytes(payload.tobytes())
        pairs.append({"a": a, "b": b, "file": name, "n_sv": int(m.support_vectors.shape[0]),
                      "bias": m.bias})
    meta = {"format": "svm-ovo/1", "classes": model.classes, "kernel": model.kernel.to_dict(), "C": model.C,
            "n_features": int(model.norm.mean.shape[0]), "norm": model.norm.to_dict(), "pairs": pairs}
    (directory / "svm.json").write_text(json.dumps(meta, indent=1))


def load_svm(directory) -> SvmModel:
    directory = Path(directory)
    meta = json.loads((directory / "svm.json").read_text())
    kernel = KernelSpec(**meta["kernel"])
    nf = meta["n_features"]
    pairs = []
    for p in meta["pairs"]:
        raw = np.frombuffer((directory / p["file"]).read_bytes(), dtype="<f8")
        n = p["n_sv"]
        pairs.append((p["a"], p["b"], BinarySvm(raw[:n * nf].reshape(n, nf).copy(), raw[n * nf:].copy(),
                                                p["bias"], kernel)))
    return SvmModel(meta["classes"], pairs, Standardizer.from_dict(meta["norm"]), kernel, meta["C"])


# ----------------------------------------------------------------------------
# grid search


def make_c_grid(n: int = 100, lo: float = -1.5, hi: float = 0.5) -> np.ndarray:
    """C_i = 10^(lo + (hi - lo) i / (n - 1))."""
    return 10.0 ** (lo + (hi - lo) * np.arange(n) / (n - 1))


@dataclass
class GridSearchConfig:
    kernels: tuple = KERNELS
    c_values: np.ndarray = field(default_factory=make_c_grid)
    folds: int = 10
    tol: float = 1e-3

    @classmethod
    def reduced(cls, n_c: int = 10) -> "GridSearchConfig":
        return cls(c_values=make_c_grid(n_c))


@dataclass
class GridSearchResult:
    kernel: str
    C: float
    bacc: float
    rows: list  # (kernel, C, fold, bacc)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("kernel,C,fold,bacc\n")
            for k, c, f, b in self.rows:
                fh.write(f"{k},{c!r},{f},{b!r}\n")


def grid_search(X, labels, cfg: GridSearchConfig, rng: np.random.Generator) -> GridSearchResult:
    """Stratified k-fold CV over (kernel, C); the best mean BACC wins.

    Ties go to the smaller C, then to the earlier kernel in linear < poly < rbf.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    lab = np.asarray(list(labels), dtype=object)
    classes = sorted(set(lab.tolist()))
    folds = stratified_folds(lab, cfg.folds, rng)
    rows = []
    # per fold: standardize on the training part, then reuse kernel matrices across C
    for f, te in enumerate(folds):
        tr = np.setdiff1d(np.arange(len(X)), te)
        if te.size == 0:
            continue
        norm = Standardizer.fit(X[tr])
        Ztr, Zte = norm.transform(X[tr]), norm.transform(X[te])
        ltr = lab[tr]
        pair_sets = [(classes.index(a), classes.index(b), np.flatnonzero((ltr == a) | (ltr == b)), a)
                     for a, b in combinations(classes, 2)]
        for kname in cfg.kernels:
            kern = KernelSpec(kname).resolved(X.shape[1])
            Ktr = kernel_matrix(kern, Ztr, Ztr)
            Kte = kernel_matrix(kern, Zte, Ztr)
            for C in cfg.c_values:
                dec = np.zeros((te.size, len(pair_sets)))
                for p, (_, _, idx, a) in enumerate(pair_sets):
                    y = np.where(ltr[idx] == a, 1.0, -1.0)
                    if np.all(y > 0) or np.all(y < 0):
                        dec[:, p] = y[0]
                        continue
                    res = smo_solve(Ktr[np.ix_(idx, idx)], y, float(C), cfg.tol)
                    dec[:, p] = Kte[:, idx] @ (res.alpha * y) + res.bias
                scores = _vote(classes, [(a, b) for a, b, _, _ in pair_sets], dec)
                pred = [classes[i] for i in np.argmax(scores, axis=1)]
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    bacc = classification_metrics(pred, None, lab[te].tolist(), classes).bacc
                rows.append((kname, float(C), f, bacc))
    best = None
    for ki, kname in enumerate(cfg.kernels):
        for C in cfg.c_values:
            vals = [r[3] for r in rows if r[0] == kname and r[1] == float(C)]
            m = float(np.mean(vals))
            key = (-m, float(C), ki)
            if best is None or key < best[0]:
                best = (key, kname, float(C), m)
    rows.sort(key=lambda r: (cfg.kernels.index(r[0]), r[1], r[2]))
    return GridSearchResult(best[1], best[2], best[3], rows)
