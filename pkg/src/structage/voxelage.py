"""Patch-wise U-Net ensemble: build, train along the transfer chain, predict age maps."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nnkit
from .nnkit import Concat, Conv3d, MaxPool2, Network, ReLU, Upsample2
from .tiler import PatchLayout, chain_order, extract_patches, reconstruct_average
from .volgrid import upsample_trilinear

log = logging.getLogger(__name__)

__all__ = [
    "UNetConfig", "TrainRecipe", "UnitRecord", "EnsembleModel", "build_unet", "chain_order",
    "train_unit", "train_chain", "predict_age_map", "save_ensemble", "load_ensemble",
]


@dataclass(frozen=True)
class UNetConfig:
    patch_dims: tuple[int, int, int] = (32, 48, 32)
    widths: tuple[int, ...] = (8, 16)
    bottleneck: int = 32
    in_channels: int = 1

    @property
    def depth(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("U-Net depth must be >= 1")
        f = 2 ** self.depth
        bad = [d for d in self.patch_dims if d % f]
        if bad:
            raise ValueError(f"patch dims {self.patch_dims} not divisible by {f} (depth {self.depth})")


@dataclass(frozen=True)
class TrainRecipe:
    batch_size: int = 8
    patience: int = 20
    max_epochs: int = 200
    train_fraction: float = 0.8
    optimizer: str = "sgd"
    lr: float = 0.01
    shift: int = 1  # random shift t in {-shift..shift}; 0 disables
    mixup_alpha: float | None = 0.2  # None disables mixup
    brain_mask_weighting: bool = False

    def validate(self) -> None:
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


def build_unet(cfg: UNetConfig, rng: np.random.Generator) -> Network:
    """Encoder (conv-ReLU x2, pool) per level, bottleneck, mirrored decoder, 1x1x1 head."""
    cfg.validate()
    net = Network()
    skips = []
    cin, x = cfg.in_channels, -1
    for w in cfg.widths:
        net.add(Conv3d(cin, w, 3, rng), x)
        net.add(ReLU())
        net.add(Conv3d(w, w, 3, rng))
        skips.append(net.add(ReLU()))
        x = net.add(MaxPool2())
        cin = w
    net.add(Conv3d(cin, cfg.bottleneck, 3, rng), x)
    net.add(ReLU())
    net.add(Conv3d(cfg.bottleneck, cfg.bottleneck, 3, rng))
    x = net.add(ReLU())
    cin = cfg.bottleneck
    for w, skip in zip(reversed(cfg.widths), reversed(skips)):
        up = net.add(Upsample2(), x)
        net.add(Concat(), (up, skip))
        net.add(Conv3d(cin + w, w, 3, rng))
        net.add(ReLU())
        net.add(Conv3d(w, w, 3, rng))
        x = net.add(ReLU())
        cin = w
    net.add(Conv3d(cin, 1, 1, rng))
    return net


# ----------------------------------------------------------------------------
# training


@dataclass
class UnitRecord:
    position: tuple[int, int, int]
    seed: int
    epochs_run: int
    best_epoch: int
    best_val_loss: float  # years
    init_digest: str
    final_digest: str
    n_train: int
    n_val: int
    history: list[float] = field(default_factory=list)


def _patch_batch(vols, origin, patch_dims, shifts):
    ps = [nnkit.shifted_patch(v, origin, patch_dims, t) for v, t in zip(vols, shifts)]
    return np.ascontiguousarray(np.stack(ps)[:, None], dtype=np.float32)


def _evaluate(net, vols, ages, origin, patch_dims, age_center, age_scale, masks=None, batch=16):
    """Validation MAE in years (unshifted patches, no mixup)."""
    sl = tuple(slice(o, o + d) for o, d in zip(origin, patch_dims))
    total, weight = 0.0, 0.0
    for s in range(0, len(vols), batch):
        x = np.ascontiguousarray(np.stack([v[sl] for v in vols[s:s + batch]])[:, None], dtype=np.float32)
        pred = nnkit.forward(net, x).astype(np.float64) * age_scale + age_center
        err = np.abs(pred - np.asarray(ages[s:s + batch], dtype=np.float64).reshape(-1, 1, 1, 1, 1))
        if masks is None:
            total += err.sum()
            weight += err.size
        else:
            m = np.stack([mk[sl] for mk in masks[s:s + batch]])[:, None].astype(np.float64)
            total += (err * m).sum()
            weight += m.sum()
    return total / max(weight, 1e-12)


def train_unit(position, init: Network, train: Sequence[tuple[np.ndarray, float]],
               val: Sequence[tuple[np.ndarray, float]], layout: PatchLayout, recipe: TrainRecipe,
               rng: np.random.Generator, age_center: float = 0.0, age_scale: float = 1.0,
               train_masks=None, val_masks=None) -> tuple[Network, UnitRecord]:
    """Train one unit on its patch; returns the best-validation network and a record.

    Targets are the subject ages broadcast over the patch, standardized with
    ``(age - age_center) / age_scale``.  Training stops once ``recipe.patience``
    epochs pass without a validation improvement.
    """
    recipe.validate()
    if len(train) < 1 or len(val) < 1:
        raise ValueError("train_unit needs at least one training and one validation subject")
    origin = layout.origin(position)
    pdims = layout.patch_dims
    net = init.copy()
    init_digest = net.digest()
    opt = nnkit.OptimizerState(recipe.optimizer, recipe.lr)
    tv = [v for v, _ in train]
    ta = np.array([a for _, a in train], dtype=np.float64)
    vv = [v for v, _ in val]
    va = np.array([a for _, a in val], dtype=np.float64)
    use_mask = recipe.brain_mask_weighting and train_masks is not None

    best, best_params, best_epoch = np.inf, net.get_params(), 0
    history = []
    epoch = 0
    while epoch < recipe.max_epochs:
        epoch += 1
        order = rng.permutation(len(tv))
        for s in range(0, len(order), recipe.batch_size):
            idx = order[s:s + recipe.batch_size]
            shifts = [nnkit.draw_shift(rng, recipe.shift) if recipe.shift else (0, 0, 0) for _ in idx]
            x = _patch_batch([tv[i] for i in idx], origin, pdims, shifts)
            y = ((ta[idx] - age_center) / age_scale).astype(np.float32).reshape(-1, 1, 1, 1, 1)
            y = np.broadcast_to(y, x.shape).copy()
            w = None
            if use_mask:
                # background keeps a small weight so every patch has a nonzero denominator
                w = _patch_batch([train_masks[i] for i in idx], origin, pdims, shifts) + 1e-3
            if recipe.mixup_alpha:
                x, y = nnkit.mixup_batch(x, y, rng, recipe.mixup_alpha)
            _, grads = nnkit.gradients(net, x, y, w)
            nnkit.optimizer_step(opt, net.param_list(), grads)
        score = _evaluate(net, vv, va, origin, pdims, age_center, age_scale, val_masks if use_mask else None)
        history.append(score)
        if score < best:
            best, best_epoch, best_params = score, epoch, net.get_params()
        elif epoch - best_epoch >= recipe.patience:
            break
    net.set_params(best_params)
    rec = UnitRecord(tuple(position), -1, epoch, best_epoch, float(best), init_digest, net.digest(),
                     len(train), len(val), history)
    return net, rec


@dataclass
class EnsembleModel:
    layout: PatchLayout
    config: UNetConfig
    units: dict  # grid position -> Network (or any callable patch -> patch prediction in years)
    age_center: float = 0.0
    age_scale: float = 1.0
    records: list[UnitRecord] = field(default_factory=list)
    seed: int | None = None

    @property
    def m(self) -> int:
        return len(self.units)


def train_chain(subjects: Sequence[tuple[np.ndarray, float]], layout: PatchLayout, cfg: UNetConfig,
                recipe: TrainRecipe, master_rng: np.random.Generator, masks=None,
                on_unit: Callable[[int, Network, Network], None] | None = None) -> EnsembleModel:
    """Train all k^3 units in serpentine order, each starting from its predecessor.

    The 80/20 train/validation split is redrawn from ``master_rng`` before each unit.
    ``on_unit(i, initial, trained)`` is called after every unit.
    """
    n = len(subjects)
    if n < 5:
        raise ValueError("train_chain needs at least 5 subjects")
    if tuple(cfg.patch_dims) != layout.patch_dims:
        raise ValueError("UNetConfig patch dims differ from the layout")
    ages = np.array([a for _, a in subjects], dtype=np.float64)
    age_center = float(ages.mean())
    age_scale = float(ages.std()) or 1.0
    n_train = int(np.floor(recipe.train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    units: dict = {}
    records = []
    prev: Network | None = None
    for i, pos in enumerate(chain_order(layout.k)):
        perm = master_rng.permutation(n)
        seed = int(master_rng.integers(2 ** 63))
        rng = np.random.default_rng(seed)
        init = build_unet(cfg, rng) if prev is None else prev.copy()
        tr, va = perm[:n_train], perm[n_train:]
        net, rec = train_unit(
            pos, init, [subjects[j] for j in tr], [subjects[j] for j in va], layout, recipe, rng,
            age_center, age_scale,
            None if masks is None else [masks[j] for j in tr],
            None if masks is None else [masks[j] for j in va])
        rec.seed = seed
        log.info("unit %d %s: %d epochs, best %.3f y at epoch %d", i, pos, rec.epochs_run,
                 rec.best_val_loss, rec.best_epoch)
        if on_unit is not None:
            on_unit(i, init, net)
        units[pos] = net
        records.append(rec)
        prev = net
    return EnsembleModel(layout, cfg, units, age_center, age_scale, records)


# ----------------------------------------------------------------------------
# prediction


def _predict_patch(model: EnsembleModel, unit, patch: np.ndarray) -> np.ndarray:
    if isinstance(unit, Network):
        x = np.ascontiguousarray(patch[None, None], dtype=np.float32)
        out = nnkit.forward(unit, x)[0, 0].astype(np.float64)
        return out * model.age_scale + model.age_center
    return np.asarray(unit(patch), dtype=np.float64)


def predict_age_map(model: EnsembleModel, volume: np.ndarray, native_dims: Sequence[int] | None = None) -> np.ndarray:
    """Voxel-wise age map (years): per-unit patch predictions, overlap average, upsample."""
    if tuple(volume.shape) != model.layout.volume_dims:
        raise ValueError(f"volume dims {volume.shape} do not match layout {model.layout.volume_dims}")
    patches = extract_patches(volume, model.layout)
    preds = [_predict_patch(model, model.units[pos], p)
             for pos, p in zip(model.layout.positions(), patches)]
    agemap = reconstruct_average(preds, model.layout)
    if native_dims is not None and tuple(native_dims) != agemap.shape:
        agemap = upsample_trilinear(agemap, native_dims)
    return agemap


# ----------------------------------------------------------------------------
# serialization


def save_ensemble(model: EnsembleModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    units = []
    for i, pos in enumerate(model.layout.positions()):
        name = f"unit_{i:03d}"
        nnkit.save_network(model.units[pos], directory / name)
        units.append({"position": list(pos), "file": name})
    manifest = {
        "format": "ensemble/1",
        "layout": model.layout.to_dict(),
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(model.config).items()},
        "age_center": model.age_center,
        "age_scale": model.age_scale,
        "seed": model.seed,
        "units": units,
        "records": [{**asdict(r), "position": list(r.position)} for r in model.records],
    }
    (directory / "ensemble.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_ensemble(directory) -> EnsembleModel:
    directory = Path(directory)
    manifest = json.loads((directory / "ensemble.json").read_text())
    layout = PatchLayout.from_dict(manifest["layout"])
    c = manifest["config"]
    cfg = UNetConfig(tuple(c["patch_dims"]), tuple(c["widths"]), c["bottleneck"], c["in_channels"])
    units = {tuple(u["position"]): nnkit.load_network(directory / u["file"]) for u in manifest["units"]}
    records = [UnitRecord(**{**r, "position": tuple(r["position"])}) for r in manifest.get("records", [])]
    return EnsembleModel(layout, cfg, units, manifest["age_center"], manifest["age_scale"], records,
                         manifest.get("seed"))
