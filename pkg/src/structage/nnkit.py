"""Small dense / 3D-convolutional network toolkit with hand-written backprop.

Tensors are plain numpy arrays.  Volumetric batches are channels-first,
``(N, C, X, Y, Z)``; dense batches are ``(N, F)``.  A :class:`Network` is an
ordered list of layers, each reading from earlier nodes (``-1`` is the network
input), so U-Net skip connections are ordinary multi-input layers.

The conv3d kernels run through ``torch.nn.functional`` when torch is
importable (no autograd involved, only the raw kernels); otherwise a numpy
im2col path is used.  Everything else, including the chain rule, is numpy.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

try:
    import torch
    import torch.nn.functional as _F

    _HAVE_TORCH = True
except ImportError:  # pragma: no cover
    _HAVE_TORCH = False

DTYPE = np.float32

# ----------------------------------------------------------------------------
# conv3d primitives


def conv3d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' 3D cross-correlation, numpy im2col.

    x: (N, C, X, Y, Z); w: (O, C, k, k, k) with odd k; b: (O,).
    """
    n, c, nx, ny, nz = x.shape
    o, _, k, _, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    cols = np.empty((n, nx, ny, nz, c, k, k, k), dtype=np.result_type(x, w))
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols[..., i, j, l] = np.moveaxis(xp[:, :, i:i + nx, j:j + ny, l:l + nz], 1, -1)
    out = cols.reshape(-1, c * k ** 3) @ w.reshape(o, -1).T
    out = out.reshape(n, nx, ny, nz, o) + b
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def _conv3d_reference_backward(x, w, dout):
    n, c, nx, ny, nz = x.shape
    o, _, k, _, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                xs = xp[:, :, i:i + nx, j:j + ny, l:l + nz]
                dw[:, :, i, j, l] = np.einsum("noxyz,ncxyz->oc", dout, xs)
                dxp[:, :, i:i + nx, j:j + ny, l:l + nz] += np.einsum(
                    "noxyz,oc->ncxyz", dout, w[:, :, i, j, l])
    dx = dxp[:, :, p:p + nx, p:p + ny, p:p + nz]
    return np.ascontiguousarray(dx), dw


def _conv3d(x, w, b):
    if not _HAVE_TORCH:
        return conv3d_reference(x, w, b)
    p = w.shape[-1] // 2
    y = _F.conv3d(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b), padding=p)
    return y.numpy()


def _conv3d_backward(x, w, dout, need_dx=True):
    if not _HAVE_TORCH:
        return _conv3d_reference_backward(x, w, dout)
    p = w.shape[-1] // 2
    tx, tw, tg = torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(np.ascontiguousarray(dout))
    dx, dw, _ = torch.ops.aten.convolution_backward(
        tg, tx, tw, None, [1, 1, 1], [p, p, p], [1, 1, 1], False, [0, 0, 0], 1,
        [need_dx, True, False])
    return (dx.numpy() if need_dx else None), dw.numpy()


# ----------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"
    n_inputs = 1

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def forward(self, *xs):
        raise NotImplementedError

    def backward(self, dout, cache):
        """Return (list of input gradients, dict of parameter gradients)."""
        raise NotImplementedError

    def attrs(self) -> dict:
        return {}


class Conv3d(Layer):
    kind = "conv3d"

    def __init__(self, cin: int, cout: int, ksize: int = 3, rng=None, dtype=DTYPE):
        super().__init__()
        if ksize % 2 != 1:
            raise ValueError("conv3d kernel size must be odd")
        self.cin, self.cout, self.ksize = cin, cout, ksize
        fan_in = cin * ksize ** 3
        if rng is None:
            w = np.zeros((cout, cin, ksize, ksize, ksize))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, ksize, ksize, ksize))
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(cout, dtype=dtype)}

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != self.cin:
            raise ValueError(f"conv3d expects (N, {self.cin}, X, Y, Z), got {x.shape}")
        return _conv3d(x, self.params["weight"], self.params["bias"]), x

    def backward(self, dout, x, need_dx=True):
        dx, dw = _conv3d_backward(x, self.params["weight"], dout, need_dx)
        return [dx], {"weight": dw, "bias": dout.sum(axis=(0, 2, 3, 4))}

    def attrs(self):
        return {"cin": self.cin, "cout": self.cout, "ksize": self.ksize}


class Dense(Layer):
    kind = "dense"

    def __init__(self, nin: int, nout: int, rng=None, dtype=DTYPE):
        super().__init__()
        self.nin, self.nout = nin, nout
        if rng is None:
            w = np.zeros((nout, nin))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / nin), size=(nout, nin))
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(nout, dtype=dtype)}

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.nin:
            raise ValueError(f"dense expects (N, {self.nin}), got {x.shape}")
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, dout, x):
        return [dout @ self.params["weight"]], {"weight": dout.T @ x, "bias": dout.sum(axis=0)}

    def attrs(self):
        return {"nin": self.nin, "nout": self.nout}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, mask):
        return [dout * mask], {}


class MaxPool2(Layer):
    """2x2x2 max pooling; odd extents are padded with -inf (ceil mode)."""

    kind = "maxpool2"

    def forward(self, x):
        n, c, nx, ny, nz = x.shape
        px, py, pz = nx % 2, ny % 2, nz % 2
        if px or py or pz:
            x = np.pad(x, ((0, 0), (0, 0), (0, px), (0, py), (0, pz)), constant_values=-np.inf)
        mx, my, mz = x.shape[2] // 2, x.shape[3] // 2, x.shape[4] // 2
        blocks = x.reshape(n, c, mx, 2, my, 2, mz, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
        blocks = blocks.reshape(n, c, mx, my, mz, 8)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (arg, (nx, ny, nz))

    def backward(self, dout, cache):
        arg, (nx, ny, nz) = cache
        n, c, mx, my, mz = dout.shape
        blocks = np.zeros((n, c, mx, my, mz, 8), dtype=dout.dtype)
        np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
        dx = blocks.reshape(n, c, mx, my, mz, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        dx = dx.reshape(n, c, 2 * mx, 2 * my, 2 * mz)
        return [np.ascontiguousarray(dx[:, :, :nx, :ny, :nz])], {}


class Upsample2(Layer):
    """Nearest-neighbour x2 upsampling."""

    kind = "upsample2"

    def forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4), None

    def backward(self, dout, cache):
        n, c, nx, ny, nz = dout.shape
        dx = dout.reshape(n, c, nx // 2, 2, ny // 2, 2, nz // 2, 2).sum(axis=(3, 5, 7))
        return [dx], {}


class Concat(Layer):
    """Channel concatenation of two or more inputs."""

    kind = "concat"
    n_inputs = 2

    def forward(self, *xs):
        if len({x.shape[2:] for x in xs}) != 1:
            raise ValueError(f"concat spatial mismatch: {[x.shape for x in xs]}")
        return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]

    def backward(self, dout, widths):
        cuts = np.cumsum(widths)[:-1]
        return list(np.split(dout, cuts, axis=1)), {}


_LAYER_KINDS = {cls.kind: cls for cls in (Conv3d, Dense, ReLU, MaxPool2, Upsample2, Concat)}


# ----------------------------------------------------------------------------
# network


@dataclass
class Node:
    layer: Layer
    inputs: tuple[int, ...]


@dataclass
class Network:
    nodes: list[Node] = field(default_factory=list)

    def add(self, layer: Layer, inputs: int | Sequence[int] | None = None) -> int:
        """Append ``layer`` and return its node index.

        ``inputs`` defaults to the previous node (or the network input).
        """
        if inputs is None:
            inputs = (len(self.nodes) - 1,)
        elif isinstance(inputs, int):
            inputs = (inputs,)
        inputs = tuple(int(i) for i in inputs)
        for i in inputs:
            if not -1 <= i < len(self.nodes):
                raise ValueError(f"input node {i} does not exist yet")
        self.nodes.append(Node(layer, inputs))
        return len(self.nodes) - 1

    def param_list(self) -> list[np.ndarray]:
        """Parameter arrays in deterministic (node, name) order; live references."""
        return [node.layer.params[k] for node in self.nodes for k in sorted(node.layer.params)]

    def param_names(self) -> list[str]:
        return [f"{i}.{k}" for i, node in enumerate(self.nodes) for k in sorted(node.layer.params)]

    def get_params(self) -> list[np.ndarray]:
        return [p.copy() for p in self.param_list()]

    def set_params(self, values: Sequence[np.ndarray]) -> None:
        current = self.param_list()
        if len(values) != len(current):
            raise ValueError("parameter count mismatch")
        for dst, src in zip(current, values):
            if dst.shape != src.shape:
                raise ValueError(f"parameter shape mismatch {dst.shape} vs {src.shape}")
            dst[...] = src

    def n_params(self) -> int:
        return sum(p.size for p in self.param_list())

    def copy(self) -> "Network":
        return clone(self)

    def digest(self) -> str:
        """SHA-256 over parameter bytes; equal digests mean bit-identical weights."""
        h = hashlib.sha256()
        for p in self.param_list():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def __call__(self, x):
        return forward(self, x)


def _run(net: Network, x: np.ndarray):
    acts: list[np.ndarray] = []
    caches = []
    for node in net.nodes:
        ins = [x if i == -1 else acts[i] for i in node.inputs]
        out, cache = node.layer.forward(*ins)
        acts.append(out)
        caches.append(cache)
    return acts, caches


def forward(net: Network, batch: np.ndarray) -> np.ndarray:
    if not net.nodes:
        return batch
    acts, _ = _run(net, batch)
    return acts[-1]


def mae_loss(pred: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Mean absolute error; with ``weights`` a weighted mean (weights broadcast to pred)."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    err = np.abs(pred.astype(np.float64) - target)
    if weights is None:
        return float(err.mean())
    w = np.broadcast_to(weights, pred.shape).astype(np.float64)
    return float((err * w).sum() / w.sum())


def _mae_grad(pred, target, weights):
    g = np.sign(pred - target)  # sign(0) == 0: subgradient at a kink
    if weights is None:
        return (g / pred.size).astype(pred.dtype)
    w = np.broadcast_to(weights, pred.shape)
    return (g * w / w.sum()).astype(pred.dtype)


def gradients(net: Network, batch: np.ndarray, target: np.ndarray,
              weights: np.ndarray | None = None) -> tuple[float, list[np.ndarray]]:
    """MAE loss and its exact gradient for every parameter (``param_list`` order)."""
    acts, caches = _run(net, batch)
    pred = acts[-1]
    loss = mae_loss(pred, target, weights)
    douts: list[np.ndarray | None] = [None] * len(net.nodes)
    douts[-1] = _mae_grad(pred, np.asarray(target, dtype=pred.dtype), weights)
    pgrads: list[dict] = [{} for _ in net.nodes]
    for idx in range(len(net.nodes) - 1, -1, -1):
        d = douts[idx]
        node = net.nodes[idx]
        if d is None:  # dead branch
            pgrads[idx] = {k: np.zeros_like(v) for k, v in node.layer.params.items()}
            continue
        if isinstance(node.layer, Conv3d) and node.inputs == (-1,):
            dins, dparams = node.layer.backward(d, caches[idx], need_dx=False)
        else:
            dins, dparams = node.layer.backward(d, caches[idx])
        pgrads[idx] = dparams
        for src, g in zip(node.inputs, dins):
            if src == -1:
                continue
            douts[src] = g if douts[src] is None else douts[src] + g
    grads = [pgrads[i][k] for i, node in enumerate(net.nodes) for k in sorted(node.layer.params)]
    return loss, grads


# ----------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """Update ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    state.step += 1
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p -= (state.lr * g).astype(p.dtype)
        return
    if state.m is None:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g, dtype=np.float64)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# ----------------------------------------------------------------------------
# augmentation


def draw_shift(rng: np.random.Generator, shift: int = 1) -> np.ndarray:
    """Per-axis integer offset, uniform in {-shift..shift}."""
    return rng.integers(-shift, shift + 1, size=3)


def shifted_patch(volume: np.ndarray, origin: Sequence[int], patch_dims: Sequence[int],
                  t: Sequence[int]) -> np.ndarray:
    """Patch at ``origin + t`` with the start clamped to [0, D - d] on each axis."""
    start = [int(np.clip(o + dt, 0, n - d)) for o, dt, n, d in zip(origin, t, volume.shape, patch_dims)]
    return volume[tuple(slice(s, s + d) for s, d in zip(start, patch_dims))]


def random_shift(volume: np.ndarray, origin: Sequence[int], patch_dims: Sequence[int],
                 rng: np.random.Generator, shift: int = 1) -> np.ndarray:
    return shifted_patch(volume, origin, patch_dims, draw_shift(rng, shift))


def mixup_batch(x: np.ndarray, y: np.ndarray, rng: np.random.Generator, alpha: float = 0.2,
                return_lam: bool = False):
    """Mix each sample with a random partner: x' = lam*x_i + (1-lam)*x_j, same for targets.

    One lam ~ Beta(alpha, alpha) per sample. A batch of one is returned untouched.
    """
    if alpha <= 0:
        raise ValueError("mixup alpha must be positive")
    n = x.shape[0]
    if n < 2:
        lam = np.ones(n)
        return (x, y, lam) if return_lam else (x, y)
    lam = rng.beta(alpha, alpha, size=n)
    partner = rng.permutation(n)
    shape = (n,) + (1,) * (x.ndim - 1)
    lx = lam.reshape(shape).astype(x.dtype)
    x_mix = lx * x + (1 - lx) * x[partner]
    ly = lam.reshape((n,) + (1,) * (y.ndim - 1)).astype(y.dtype)
    y_mix = ly * y + (1 - ly) * y[partner]
    return (x_mix, y_mix, lam) if return_lam else (x_mix, y_mix)


# ----------------------------------------------------------------------------
# serialization


def clone(net: Network) -> Network:
    out = Network()
    for node in net.nodes:
        layer = _LAYER_KINDS[node.layer.kind].__new__(_LAYER_KINDS[node.layer.kind])
        layer.__dict__.update(node.layer.__dict__)
        layer.params = {k: v.copy() for k, v in node.layer.params.items()}
        out.nodes.append(Node(layer, node.inputs))
    return out


def network_manifest(net: Network) -> dict:
    layers = []
    for node in net.nodes:
        layers.append({
            "kind": node.layer.kind,
            "inputs": list(node.inputs),
            "attrs": node.layer.attrs(),
            "params": {k: list(v.shape) for k, v in sorted(node.layer.params.items())},
        })
    return {"format": "nnkit/1", "dtype": "<f4", "layers": layers}


def network_from_manifest(manifest: dict) -> Network:
    net = Network()
    for spec in manifest["layers"]:
        kind, attrs = spec["kind"], spec.get("attrs", {})
        if kind == "conv3d":
            layer = Conv3d(attrs["cin"], attrs["cout"], attrs["ksize"])
        elif kind == "dense":
            layer = Dense(attrs["nin"], attrs["nout"])
        elif kind in _LAYER_KINDS:
            layer = _LAYER_KINDS[kind]()
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        net.add(layer, spec["inputs"])
    return net


def params_to_bytes(net: Network) -> bytes:
    return b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.param_list())


def params_from_bytes(net: Network, payload: bytes) -> None:
    expected = 4 * net.n_params()
    if len(payload) != expected:
        raise ValueError(f"parameter payload has {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype="<f4")
    pos = 0
    for p in net.param_list():
        p[...] = flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size


def save_network(net: Network, path: str | Path) -> None:
    """Write ``<path>.json`` (layer manifest) and ``<path>.bin`` (little-endian float32)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".json").write_text(json.dumps(network_manifest(net), indent=1, sort_keys=True))
    path.with_suffix(".bin").write_bytes(params_to_bytes(net))


def load_network(path: str | Path) -> Network:
    path = Path(path)
    net = network_from_manifest(json.loads(path.with_suffix(".json").read_text()))
    params_from_bytes(net, path.with_suffix(".bin").read_bytes())
    return net

