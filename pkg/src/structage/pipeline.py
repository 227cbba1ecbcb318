"""End-to-end phantom pipeline: configuration, artifacts on disk, one function per step.

Directory layout under the output root (names configurable in ``[paths]``)::

    data/<cohort>/manifest.csv, <id>.vol3, <id>.lab3
    models/voxel/              U-Net ensemble
    models/correction.json     per-structure bias correction
    models/mlp/                chronological-age MLP folds
    models/svm_<features>/     one-vs-one SVM, grid table, train/test split
    reports/                   feature tables, predictions, evaluation, images
    manifests/<step>.json      run manifest of the last invocation of each step
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import importlib.metadata
import io
import json
import logging
import platform
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bsa as bsamod
from . import phantom, predictors, report, voxelage
from .evalkit import classification_metrics, regression_metrics
from .tiler import PatchLayout
from .volgrid import (LabelVolume, downscale_by2, load_labels, load_volume, store_labels, store_volume,
                      working_dims)

log = logging.getLogger(__name__)

FEATURE_KINDS = ("bsage", "vol", "bsage+vol", "true-age", "pred-age")
COHORTS = ("train", "test", "disease")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class MissingArtifact(FileNotFoundError):
    """An upstream artifact needed by a step does not exist (CLI exit code 3)."""


DEFAULT_INI = """\
[run]
seed = 0

[paths]
data = data
models = models
reports = reports

[phantom]
dims = 32,48,32
num_structures = 12
noise_sigma = auto
radius_jitter = 0.06
voxel_volume = 1.0
table_seed = 20230815

[cohort.train]
n = 120
age_range = 20,90
mix = CN:1
seed = auto

[cohort.test]
n = 40
age_range = 20,90
mix = CN:1
seed = auto

[cohort.disease]
n = 720
age_range = 20,75
mix = CN:1,A:1,B:1,C:1,D:1,E:1
seed = auto

[voxel]
k = 3
patch_dims = 8,8,8
widths = 8,16
bottleneck = 32
batch_size = 8
patience = 20
max_epochs = 200
optimizer = sgd
lr = 0.01
shift = 1
mixup_alpha = 0.2
brain_mask_weighting = false
smooth_downscale = false

[correction]
cohort = train
intercept = false

[mlp]
folds = 10
batch_size = 8
patience = 50
max_epochs = 1000
lr = 0.001

[svm]
kernels = linear,poly,rbf
c_points = 10
full_grid = false
c_log_range = -1.5,0.5
folds = 10
tol = 0.001
train_fraction = 0.5
"""


def _ints(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated integers, got {text!r}") from None


def _floats(text: str, what: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def _mix(text: str, what: str) -> dict[str, float]:
    out = {}
    for part in text.split(","):
        name, _, w = part.strip().partition(":")
        try:
            out[name.strip()] = float(w) if w else 1.0
        except ValueError:
            raise ConfigError(f"{what}: bad class weight in {part!r}") from None
    return out


def derive_seed(master: int, name: str) -> int:
    """Independent 64-bit seed for a named stream of a master seed."""
    state = np.random.SeedSequence([int(master), zlib.crc32(name.encode())]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


@dataclass
class CohortConfig:
    name: str
    n: int
    age_range: tuple[float, float]
    mix: dict
    seed: int | None  # None -> derived from the run seed


@dataclass
class PipelineConfig:
    seed: int
    paths: dict
    phantom: phantom.PhantomSpec
    cohorts: dict
    k: int
    unet: voxelage.UNetConfig
    recipe: voxelage.TrainRecipe
    smooth_downscale: bool
    correction_cohort: str
    correction_intercept: bool
    mlp_folds: int
    mlp_recipe: predictors.MlpRecipe
    svm_kernels: tuple
    svm_c_values: np.ndarray
    svm_folds: int
    svm_tol: float
    svm_train_fraction: float
    text: str = field(repr=False, default="")

    # ------------------------------------------------------------------ io

    @classmethod
    def from_text(cls, text: str | None = None, seed: int | None = None) -> "PipelineConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(DEFAULT_INI)
        if text:
            user = configparser.ConfigParser(interpolation=None)
            try:
                user.read_string(text)
            except configparser.Error as exc:
                raise ConfigError(f"unreadable config: {exc}") from None
            for sec in user.sections():
                if not parser.has_section(sec):
                    raise ConfigError(f"unknown config section [{sec}]")
                for key, val in user.items(sec, raw=True):
                    if key not in parser[sec]:
                        raise ConfigError(f"unknown key {key!r} in [{sec}]")
                    parser[sec][key] = val
        if seed is not None:
            parser["run"]["seed"] = str(int(seed))
        buf = io.StringIO()
        parser.write(buf)
        return cls._parse(parser, buf.getvalue())

    @classmethod
    def load(cls, path, seed: int | None = None) -> "PipelineConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        return cls.from_text(p.read_text(encoding="utf-8"), seed)

    @classmethod
    def _parse(cls, cp: configparser.ConfigParser, text: str) -> "PipelineConfig":
        def get(sec, key, conv=str):
            raw = cp[sec][key].strip()
            try:
                return conv(raw)
            except ValueError:
                raise ConfigError(f"[{sec}] {key}: cannot parse {raw!r}") from None

        def flag(sec, key):
            try:
                return cp.getboolean(sec, key)
            except ValueError:
                raise ConfigError(f"[{sec}] {key}: expected true/false") from None

        seed = get("run", "seed", int)
        if seed < 0:
            raise ConfigError("[run] seed must be >= 0")
        noise = cp["phantom"]["noise_sigma"].strip()
        try:
            spec = phantom.PhantomSpec(
                dims=_ints(cp["phantom"]["dims"], "[phantom] dims"),
                num_structures=get("phantom", "num_structures", int),
                noise_sigma=None if noise == "auto" else float(noise),
                voxel_volume=get("phantom", "voxel_volume", float),
                radius_jitter=get("phantom", "radius_jitter", float),
                seed=get("phantom", "table_seed", int))
        except ValueError as exc:
            raise ConfigError(f"[phantom] {exc}") from None
        if len(spec.dims) != 3 or min(spec.dims) < 1:
            raise ConfigError("[phantom] dims needs three positive integers")

        cohorts = {}
        for name in COHORTS:
            sec = f"cohort.{name}"
            lo_hi = _floats(cp[sec]["age_range"], f"[{sec}] age_range")
            if len(lo_hi) != 2 or not 0 <= lo_hi[0] <= lo_hi[1] <= 100:
                raise ConfigError(f"[{sec}] age_range must be lo,hi within [0, 100]")
            mix = _mix(cp[sec]["mix"], f"[{sec}] mix")
            unknown = set(mix) - set(phantom.CLASSES)
            if unknown:
                raise ConfigError(f"[{sec}] unknown classes {sorted(unknown)}")
            s = cp[sec]["seed"].strip()
            cohorts[name] = CohortConfig(name, get(sec, "n", int), lo_hi, mix, None if s == "auto" else int(s))
            if cohorts[name].n < 1:
                raise ConfigError(f"[{sec}] n must be >= 1")

        v = "voxel"
        unet = voxelage.UNetConfig(_ints(cp[v]["patch_dims"], "[voxel] patch_dims"),
                                   _ints(cp[v]["widths"], "[voxel] widths"), get(v, "bottleneck", int))
        alpha = cp[v]["mixup_alpha"].strip()
        recipe = voxelage.TrainRecipe(
            batch_size=get(v, "batch_size", int), patience=get(v, "patience", int),
            max_epochs=get(v, "max_epochs", int), optimizer=get(v, "optimizer"), lr=get(v, "lr", float),
            shift=get(v, "shift", int),
            mixup_alpha=None if alpha in ("none", "0", "0.0") else float(alpha),
            brain_mask_weighting=flag(v, "brain_mask_weighting"))
        if recipe.optimizer not in ("sgd", "adam"):
            raise ConfigError("[voxel] optimizer must be sgd or adam")
        try:
            recipe.validate()
        except ValueError as exc:
            raise ConfigError(f"[voxel] {exc}") from None

        kernels = tuple(s.strip() for s in cp["svm"]["kernels"].split(","))
        bad = [k for k in kernels if k not in predictors.KERNELS]
        if bad:
            raise ConfigError(f"[svm] unknown kernels {bad}")
        lo, hi = _floats(cp["svm"]["c_log_range"], "[svm] c_log_range")
        n_c = 100 if flag("svm", "full_grid") else get("svm", "c_points", int)
        if n_c < 2:
            raise ConfigError("[svm] c_points must be >= 2")
        frac = get("svm", "train_fraction", float)
        if not 0 < frac < 1:
            raise ConfigError("[svm] train_fraction must lie in (0, 1)")

        corr_cohort = get("correction", "cohort")
        if corr_cohort not in COHORTS:
            raise ConfigError(f"[correction] cohort must be one of {COHORTS}")

        cfg = cls(
            seed=seed, paths=dict(cp["paths"]), phantom=spec, cohorts=cohorts, k=get(v, "k", int),
            unet=unet, recipe=recipe, smooth_downscale=flag(v, "smooth_downscale"),
            correction_cohort=corr_cohort, correction_intercept=flag("correction", "intercept"),
            mlp_folds=get("mlp", "folds", int),
            mlp_recipe=predictors.MlpRecipe(get("mlp", "batch_size", int), get("mlp", "patience", int),
                                            get("mlp", "max_epochs", int), get("mlp", "lr", float)),
            svm_kernels=kernels, svm_c_values=predictors.make_c_grid(n_c, lo, hi),
            svm_folds=get("svm", "folds", int), svm_tol=get("svm", "tol", float), svm_train_fraction=frac,
            text=text)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        wd = self.working_dims
        if self.k < 1:
            raise ConfigError("[voxel] k must be >= 1")
        try:
            self.unet.validate()
        except ValueError as exc:
            raise ConfigError(f"[voxel] {exc}") from None
        for ax, (d, D) in enumerate(zip(self.unet.patch_dims, wd)):
            if d > D:
                raise ConfigError(f"[voxel] patch dim {d} exceeds working dim {D} on axis {ax}")
            if self.k * d < D:
                raise ConfigError(f"[voxel] k={self.k} patches of {d} cannot cover working dim {D} on axis {ax}")
        if self.mlp_folds < 2 or self.svm_folds < 2:
            raise ConfigError("fold counts must be >= 2")

    # ------------------------------------------------------------ derived

    @property
    def working_dims(self) -> tuple[int, int, int]:
        return tuple(working_dims(self.phantom.dims))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def layout(self) -> PatchLayout:
        return PatchLayout.build(self.working_dims, self.unet.patch_dims, self.k)

    def cohort_seed(self, name: str) -> int:
        c = self.cohorts[name]
        return derive_seed(self.seed, f"cohort/{name}") if c.seed is None else c.seed

    def rng(self, stream: str) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.seed, stream))

    def grid_config(self) -> predictors.GridSearchConfig:
        return predictors.GridSearchConfig(self.svm_kernels, self.svm_c_values, self.svm_folds, self.svm_tol)

    def seeds(self) -> dict:
        return {"run": self.seed, **{f"cohort.{n}": self.cohort_seed(n) for n in COHORTS}}


# ----------------------------------------------------------------------------
# artifact paths


class Layout:
    """Resolves artifact paths under one output root."""

    def __init__(self, root, cfg: PipelineConfig):
        self.root = Path(root)
        self.data = self.root / cfg.paths["data"]
        self.models = self.root / cfg.paths["models"]
        self.reports = self.root / cfg.paths["reports"]

    def cohort_dir(self, cohort: str) -> Path:
        return self.data / cohort

    def manifest(self, cohort: str) -> Path:
        return self.cohort_dir(cohort) / "manifest.csv"

    @property
    def voxel_model(self) -> Path:
        return self.models / "voxel"

    @property
    def correction(self) -> Path:
        return self.models / "correction.json"

    @property
    def mlp(self) -> Path:
        return self.models / "mlp"

    def svm(self, kind: str) -> Path:
        return self.models / f"svm_{feature_tag(kind)}"

    def features(self, cohort: str) -> Path:
        return self.reports / f"features_{cohort}.csv"

    def predicted_age(self, cohort: str) -> Path:
        return self.reports / f"predicted_age_{cohort}.csv"

    def classified(self, kind: str) -> Path:
        return self.reports / f"classify_{feature_tag(kind)}.csv"


def feature_tag(kind: str) -> str:
    return kind.replace("+", "_").replace("-", "_")


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}; run `{hint}` first")
    return path


# ----------------------------------------------------------------------------
# run manifest


def _versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for dist in ("artifact", "scipy", "torch"):
        try:
            out[dist] = importlib.metadata.version(dist)
        except importlib.metadata.PackageNotFoundError:
            out[dist] = None
    return out


def write_run_manifest(root, cfg: PipelineConfig, step: str, args: dict) -> Path:
    """Record everything needed to replay ``step``; no timestamps, so reruns are bit-identical."""
    path = Path(root) / "manifests" / f"{step}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"step": step, "args": args, "config_sha256": cfg.hash, "config": cfg.text,
            "seeds": cfg.seeds(), "versions": _versions()}
    path.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ----------------------------------------------------------------------------
# steps


def phantom_gen(cfg: PipelineConfig, root, cohorts: Sequence[str] = COHORTS) -> dict:
    paths = Layout(root, cfg)
    out = {}
    for name in cohorts:
        c = cfg.cohorts[name]
        subjects = phantom.generate_cohort(cfg.phantom, c.mix, c.age_range, c.n, cfg.cohort_seed(name),
                                           exact_mix=True, prefix=f"{name}")
        d = paths.cohort_dir(name)
        d.mkdir(parents=True, exist_ok=True)
        for s in subjects:
            store_volume(s.volume, d / f"{s.id}.vol3")
            store_labels(s.labels, d / f"{s.id}.lab3")
        phantom.write_manifest(subjects, paths.manifest(name))
        log.info("cohort %s: %d subjects in %s", name, len(subjects), d)
        out[name] = len(subjects)
    return out


def _cohort_rows(paths: Layout, cohort: str) -> list[dict]:
    return phantom.read_manifest(_require(paths.manifest(cohort), f"cohort {cohort!r}", "phantom-gen"))


def _subject_volume(paths: Layout, cohort: str, sid: str) -> np.ndarray:
    return load_volume(_require(paths.cohort_dir(cohort) / f"{sid}.vol3", f"volume {sid}", "phantom-gen"))


def _subject_labels(paths: Layout, cohort: str, sid: str, s: int) -> LabelVolume:
    lv = load_labels(_require(paths.cohort_dir(cohort) / f"{sid}.lab3", f"labels {sid}", "phantom-gen"))
    if lv.num_structures != s:
        raise ConfigError(f"labels of {sid} have {lv.num_structures} structures, config says {s}")
    return lv


def train_voxel(cfg: PipelineConfig, root, on_unit=None) -> voxelage.EnsembleModel:
    paths = Layout(root, cfg)
    rows = _cohort_rows(paths, "train")
    subjects, masks = [], []
    for r in rows:
        vol = _subject_volume(paths, "train", r["id"])
        if vol.shape != tuple(cfg.phantom.dims):
            raise ConfigError(f"volume {r['id']} has dims {vol.shape}, config says {cfg.phantom.dims}")
        subjects.append((downscale_by2(vol, cfg.smooth_downscale), r["age"]))
        if cfg.recipe.brain_mask_weighting:
            lv = _subject_labels(paths, "train", r["id"], cfg.phantom.num_structures)
            masks.append((lv.labels[::2, ::2, ::2] > 0).astype(np.float32))
    model = voxelage.train_chain(subjects, cfg.layout(), cfg.unet, cfg.recipe, cfg.rng("voxel/chain"),
                                 masks=masks or None, on_unit=on_unit)
    model.seed = derive_seed(cfg.seed, "voxel/chain")
    voxelage.save_ensemble(model, paths.voxel_model)
    return model


def _load_ensemble(paths: Layout) -> voxelage.EnsembleModel:
    _require(paths.voxel_model / "ensemble.json", "voxel ensemble", "train-voxel")
    return voxelage.load_ensemble(paths.voxel_model)


def age_map(cfg: PipelineConfig, model: voxelage.EnsembleModel, volume: np.ndarray) -> np.ndarray:
    """Native-resolution age map of a native-resolution intensity volume."""
    if volume.shape != tuple(cfg.phantom.dims):
        raise ConfigError(f"volume dims {volume.shape} differ from configured {cfg.phantom.dims}")
    return voxelage.predict_age_map(model, downscale_by2(volume, cfg.smooth_downscale), volume.shape)


def predict_map(cfg: PipelineConfig, root, input_path, output_path) -> Path:
    paths = Layout(root, cfg)
    model = _load_ensemble(paths)
    src = Path(input_path)
    if not src.is_file():
        raise MissingArtifact(f"input volume {src} not found")
    out = Path(output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    store_volume(age_map(cfg, model, load_volume(src)).astype(np.float32), out)
    return out


def _load_correction(paths: Layout) -> bsamod.CorrectionModel | None:
    return bsamod.CorrectionModel.load(paths.correction) if paths.correction.exists() else None


def features(cfg: PipelineConfig, root, cohort: str) -> bsamod.FeatureTable:
    """BSA, BSAGE and volumes per subject; BSAGE uses the fitted correction when present."""
    paths = Layout(root, cfg)
    model = _load_ensemble(paths)
    rows = _cohort_rows(paths, cohort)
    s = cfg.phantom.num_structures
    bsa_rows, vol_rows = [], []
    for r in rows:
        lv = _subject_labels(paths, cohort, r["id"], s)
        amap = age_map(cfg, model, _subject_volume(paths, cohort, r["id"]))
        bsa_rows.append(bsamod.compute_bsa(amap, lv))
        vol_rows.append(bsamod.compute_structure_volumes(lv, cfg.phantom.voxel_volume))
    table = bsamod.build_table([r["id"] for r in rows], [r["age"] for r in rows], [r["class"] for r in rows],
                               bsa_rows, vol_rows, _load_correction(paths))
    bsamod.write_features(table, paths.features(cohort))
    return table


def _read_table(paths: Layout, cohort: str) -> bsamod.FeatureTable:
    return bsamod.read_features(_require(paths.features(cohort), f"features of {cohort!r}",
                                         f"features --cohort {cohort}"))


def fit_correction(cfg: PipelineConfig, root) -> bsamod.CorrectionModel:
    """Fit on the healthy subjects of the configured cohort, then refresh every feature table."""
    paths = Layout(root, cfg)
    table = _read_table(paths, cfg.correction_cohort)
    cn = np.array([c == "CN" for c in table.classes])
    if cn.sum() < 2:
        raise ConfigError(f"cohort {cfg.correction_cohort!r} has fewer than 2 CN subjects for bias correction")
    model = bsamod.fit_bias_correction(table.bsa[cn], table.ages[cn], cfg.correction_intercept)
    paths.correction.parent.mkdir(parents=True, exist_ok=True)
    model.save(paths.correction)
    for name in COHORTS:
        if paths.features(name).exists():
            bsamod.write_features(_read_table(paths, name).with_correction(model), paths.features(name))
    return model


def train_mlp(cfg: PipelineConfig, root) -> predictors.MlpEnsemble:
    paths = Layout(root, cfg)
    table = _read_table(paths, "train")
    ens = predictors.train_mlp_cv(table.bsa, table.ages, cfg.mlp_folds, cfg.mlp_recipe, cfg.rng("mlp"))
    predictors.save_mlp(ens, paths.mlp)
    return ens


def _load_mlp(paths: Layout) -> predictors.MlpEnsemble:
    _require(paths.mlp / "mlp.json", "MLP ensemble", "train-mlp")
    return predictors.load_mlp(paths.mlp)


def predict_age(cfg: PipelineConfig, root, cohort: str) -> np.ndarray:
    paths = Layout(root, cfg)
    table = _read_table(paths, cohort)
    pred = np.atleast_1d(predictors.predict_age(_load_mlp(paths), table.bsa))
    out = paths.predicted_age(cohort)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "class", "age", "predicted_age"])
        for sid, c, a, p in zip(table.subjects, table.classes, table.ages, pred):
            w.writerow([sid, c, repr(float(a)), repr(float(p))])
    return pred


def _read_predicted(path: Path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        return {r["subject"]: float(r["predicted_age"]) for r in csv.DictReader(fh)}


def select_features(table: bsamod.FeatureTable, kind: str, predicted: dict | None = None) -> np.ndarray:
    """Feature matrix for one classification ablation row."""
    if kind == "bsage":
        return table.bsage
    if kind == "vol":
        return table.volumes
    if kind == "bsage+vol":
        return np.hstack([table.bsage, table.volumes])
    if kind == "true-age":
        return table.ages[:, None]
    if kind == "pred-age":
        if predicted is None:
            raise ValueError("pred-age features need predicted ages")
        return np.array([[predicted[s]] for s in table.subjects])
    raise ConfigError(f"unknown feature set {kind!r}; choose from {FEATURE_KINDS}")


def _disease_features(cfg: PipelineConfig, paths: Layout, kind: str):
    table = _read_table(paths, "disease")
    predicted = None
    if kind == "pred-age":
        predicted = _read_predicted(_require(paths.predicted_age("disease"), "predicted ages of 'disease'",
                                             "predict-age --cohort disease"))
    return table, select_features(table, kind, predicted)


def split_indices(classes: Sequence[str], fraction: float, rng: np.random.Generator):
    """Per-class random split; each class contributes round(fraction * n_c) training subjects."""
    lab = np.asarray(list(classes), dtype=object)
    train = []
    for c in sorted(set(lab.tolist())):
        idx = np.flatnonzero(lab == c)
        idx = idx[rng.permutation(idx.size)]
        train.extend(idx[: int(np.floor(fraction * idx.size + 0.5))].tolist())
    train = np.array(sorted(train), dtype=np.int64)
    return train, np.setdiff1d(np.arange(lab.size), train)


def train_svm(cfg: PipelineConfig, root, kind: str) -> tuple[predictors.SvmModel, predictors.GridSearchResult]:
    paths = Layout(root, cfg)
    table, X = _disease_features(cfg, paths, kind)
    tr, te = split_indices(table.classes, cfg.svm_train_fraction, cfg.rng("svm/split"))
    labels = [table.classes[i] for i in tr]
    gs = predictors.grid_search(X[tr], labels, cfg.grid_config(), cfg.rng(f"svm/grid/{kind}"))
    model = predictors.ovo_train(X[tr], labels, predictors.KernelSpec(gs.kernel), gs.C, cfg.svm_tol)
    d = paths.svm(kind)
    predictors.save_svm(model, d)
    gs.write_csv(d / "grid.csv")
    split = {"features": kind, "kernel": gs.kernel, "C": gs.C, "cv_bacc": gs.bacc,
             "train": [table.subjects[i] for i in tr], "test": [table.subjects[i] for i in te]}
    (d / "split.json").write_text(json.dumps(split, indent=1) + "\n", encoding="utf-8")
    log.info("svm %s: %s C=%.4g cv BACC %.3f", kind, gs.kernel, gs.C, gs.bacc)
    return model, gs


def classify(cfg: PipelineConfig, root, kind: str):
    """Classify the held-out part of the disease cohort; writes per-subject labels and scores."""
    paths = Layout(root, cfg)
    d = paths.svm(kind)
    _require(d / "svm.json", f"SVM for {kind!r}", f"train-svm --features {kind}")
    model = predictors.load_svm(d)
    split = json.loads((d / "split.json").read_text(encoding="utf-8"))
    table, X = _disease_features(cfg, paths, kind)
    index = {s: i for i, s in enumerate(table.subjects)}
    missing = [s for s in split["test"] if s not in index]
    if missing:
        raise MissingArtifact(f"held-out subjects {missing[:3]} absent from the disease features")
    te = np.array([index[s] for s in split["test"]], dtype=np.int64)
    pred, scores = predictors.ovo_classify(model, X[te])
    out = paths.classified(kind)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "truth", "predicted"] + [f"score_{c}" for c in model.classes])
        for i, p, sc in zip(te, pred, scores):
            w.writerow([table.subjects[i], table.classes[i], p] + [repr(float(v)) for v in sc])
    return pred, scores


def read_classified(path) -> tuple[list, list, np.ndarray, list]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    classes = [h[len("score_"):] for h in header[3:]]
    truth = [r[1] for r in body]
    pred = [r[2] for r in body]
    scores = np.array([[float(v) for v in r[3:]] for r in body]).reshape(len(body), len(classes))
    return truth, pred, scores, classes


def evaluate(cfg: PipelineConfig, root) -> dict:
    """Regression metrics for every predicted-age table and classification metrics per feature set."""
    paths = Layout(root, cfg)
    result: dict = {"regression": {}, "classification": {}}
    for name in COHORTS:
        p = paths.predicted_age(name)
        if not p.exists():
            continue
        with open(p, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.DictReader(fh) if r["class"] == "CN"]
        if len(rows) >= 2:
            rep = regression_metrics([float(r["predicted_age"]) for r in rows], [float(r["age"]) for r in rows])
            result["regression"][name] = {"n_cn": len(rows), **rep.to_dict()}
    for kind in FEATURE_KINDS:
        p = paths.classified(kind)
        if not p.exists():
            continue
        truth, pred, scores, classes = read_classified(p)
        rep = classification_metrics(pred, scores, truth, classes)
        result["classification"][kind] = rep.to_dict()
    if not result["regression"] and not result["classification"]:
        raise MissingArtifact("nothing to evaluate; run predict-age or classify first")
    out = paths.reports / "evaluation.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return result


def population_summary(cfg: PipelineConfig, root, cohort: str = "disease",
                       classes: Sequence[str] | None = None) -> list[report.ClassSummary]:
    paths = Layout(root, cfg)
    try:
        rows = report.population_summary(_read_table(paths, cohort), classes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    report.write_population_summary(rows, paths.reports / f"population_{cohort}.csv")
    return rows


def template_labels(cfg: PipelineConfig) -> LabelVolume:
    """Label volume of the phantom geometry without per-subject jitter."""
    spec = cfg.phantom
    return phantom.label_volume(spec, np.asarray(spec.radii))


def export_slices(cfg: PipelineConfig, root, klass: str, axis: int, index: int | None = None,
                  cohort: str = "disease", labels_path=None, output=None) -> Path:
    """Slice image of the class-mean BSAGE painted on each structure."""
    paths = Layout(root, cfg)
    table = _read_table(paths, cohort)
    mask = np.array([c == klass for c in table.classes])
    if not mask.any():
        raise ConfigError(f"class {klass!r} has no subjects in cohort {cohort!r}")
    values = table.bsage[mask].mean(axis=0)
    if labels_path is None:
        lv = template_labels(cfg)
    else:
        lv = load_labels(_require(Path(labels_path), "label volume", "phantom-gen"))
    if axis not in (0, 1, 2):
        raise ConfigError("axis must be 0, 1 or 2")
    if index is None:
        index = lv.dims[axis] // 2
    try:
        img = report.structure_slice(values, lv, axis, index)
    except IndexError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(output) if output else paths.reports / "slices" / f"{cohort}_{klass}_axis{axis}_{index}.ppm"
    report.write_ppm(img, out)
    return out


def run_all(cfg: PipelineConfig, root, kinds: Sequence[str] = FEATURE_KINDS) -> dict:
    """Every step in order on the configured phantom cohorts."""
    phantom_gen(cfg, root)
    train_voxel(cfg, root)
    for name in COHORTS:
        features(cfg, root, name)
    fit_correction(cfg, root)
    train_mlp(cfg, root)
    for name in COHORTS:
        predict_age(cfg, root, name)
    for kind in kinds:
        train_svm(cfg, root, kind)
        classify(cfg, root, kind)
    result = evaluate(cfg, root)
    summary = population_summary(cfg, root, "disease")
    for row in summary:
        export_slices(cfg, root, row.klass, 2)
    return result
