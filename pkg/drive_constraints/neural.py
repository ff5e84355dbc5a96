"""Small numpy network substrate: layers, backprop, Adam, gradient checks.

Networks are flat stacks of layers over batch-first float64 arrays. Each
layer is a ``LayerSpec`` (kind plus input/output shape) and owns a dict of
parameters (``W``, ``b``) or nothing. Kinds:

  dense    x @ W + b                      W (in, out)
  conv     2x2 kernel, stride 2           W (out_c, in_c, 2, 2); halves H, W
  deconv   2x2 transposed kernel, stride 2 W (in_c, out_c, 2, 2); doubles H, W
  act      smooth leaky rectifier  LEAK*x + (1-LEAK)*softplus(x)
  flatten  (N, ...) -> (N, prod)
  reshape  (N, prod) -> (N, *shape)

``forward`` returns the output and a cache; ``backward`` consumes the cache
and returns (parameter gradients, input gradient). A cache is tied to the
model and its parameter version, so a cache taken before an optimizer step is
rejected.

Checkpoints are a magic string, a length-prefixed JSON header describing the
networks, then every parameter as little-endian float64 in layer order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

LEAK = 0.1  # slope of the smooth leaky rectifier for large negative inputs
LEARNING_RATE = 1e-3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
MAGIC = b"DRVCNET1"

LAYER_KINDS = ("dense", "conv", "deconv", "act", "flatten", "reshape")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]


@dataclass(eq=False)
class NetworkModel:
    layers: tuple[LayerSpec, ...]
    params: list[dict[str, np.ndarray]]
    rng_seed: int = 0
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if len(self.layers) != len(self.params):
            raise ValueError(
                f"{len(self.layers)} layers but {len(self.params)} parameter sets"
            )
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_shape != b.in_shape:
                raise ValueError(
                    f"layer shapes do not compose: {a.kind}{a.out_shape} -> "
                    f"{b.kind}{b.in_shape}"
                )

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.layers[0].in_shape

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.layers[-1].out_shape

    @property
    def n_params(self) -> int:
        return sum(a.size for p in self.params for a in p.values())

    def copy(self) -> "NetworkModel":
        return NetworkModel(
            self.layers,
            [{k: a.copy() for k, a in p.items()} for p in self.params],
            self.rng_seed,
        )

    @classmethod
    def build(cls, input_shape, plan, seed: int = 0) -> "NetworkModel":
        """Build from a plan such as ``[("dense", 64), ("act",), ("dense", 8)]``.

        Weights are drawn from N(0, 1/fan_in) with one seeded generator;
        biases start at zero.
        """
        rng = np.random.default_rng(seed)
        shape = tuple(int(x) for x in input_shape)
        layers, params = [], []
        for step in plan:
            kind, arg = step[0], (step[1] if len(step) > 1 else None)
            if kind == "dense":
                if len(shape) != 1:
                    raise ValueError(f"dense layer needs a flat input, got {shape}")
                out = (int(arg),)
                p = {
                    "W": rng.standard_normal((shape[0], out[0])) / math.sqrt(shape[0]),
                    "b": np.zeros(out[0]),
                }
            elif kind in ("conv", "deconv"):
                if len(shape) != 3:
                    raise ValueError(f"{kind} layer needs a (C, H, W) input, got {shape}")
                c, h, w = shape
                if kind == "conv":
                    if h % 2 or w % 2:
                        raise ValueError(f"conv needs even spatial extents, got {shape}")
                    out = (int(arg), h // 2, w // 2)
                    wshape = (out[0], c, 2, 2)
                else:
                    out = (int(arg), h * 2, w * 2)
                    wshape = (c, out[0], 2, 2)
                p = {
                    "W": rng.standard_normal(wshape) / math.sqrt(4 * c),
                    "b": np.zeros(out[0]),
                }
            elif kind == "act":
                out, p = shape, {}
            elif kind == "flatten":
                out, p = (int(np.prod(shape)),), {}
            elif kind == "reshape":
                out = tuple(int(x) for x in arg)
                if np.prod(out) != np.prod(shape):
                    raise ValueError(f"cannot reshape {shape} to {out}")
                p = {}
            else:
                raise ValueError(f"unknown layer kind {kind!r}; expected {LAYER_KINDS}")
            layers.append(LayerSpec(kind, shape, out))
            params.append(p)
            shape = out
        return cls(tuple(layers), params, seed)


@dataclass(frozen=True)
class Cache:
    model_id: int
    version: int
    inputs: tuple[np.ndarray, ...]


# --- layer math ---


def _act(x):
    return LEAK * x + (1.0 - LEAK) * np.logaddexp(0.0, x)


def _layer_forward(spec: LayerSpec, p, x):
    n = x.shape[0]
    if spec.kind == "dense":
        return x @ p["W"] + p["b"]
    if spec.kind == "conv":
        c, h, w = spec.in_shape
        xp = x.reshape(n, c, h // 2, 2, w // 2, 2)
        y = np.einsum("nchawb,ocab->nohw", xp, p["W"], optimize=True)
        return y + p["b"][None, :, None, None]
    if spec.kind == "deconv":
        y6 = np.einsum("nchw,coab->nohawb", x, p["W"], optimize=True)
        return y6.reshape((n,) + spec.out_shape) + p["b"][None, :, None, None]
    if spec.kind == "act":
        return _act(x)
    return x.reshape((n,) + spec.out_shape)


def _layer_backward(spec: LayerSpec, p, x, dy):
    n = x.shape[0]
    if spec.kind == "dense":
        return {"W": x.T @ dy, "b": dy.sum(axis=0)}, dy @ p["W"].T
    if spec.kind == "conv":
        c, h, w = spec.in_shape
        xp = x.reshape(n, c, h // 2, 2, w // 2, 2)
        grads = {
            "W": np.einsum("nchawb,nohw->ocab", xp, dy, optimize=True),
            "b": dy.sum(axis=(0, 2, 3)),
        }
        dx = np.einsum("nohw,ocab->nchawb", dy, p["W"], optimize=True)
        return grads, dx.reshape(x.shape)
    if spec.kind == "deconv":
        o, h2, w2 = spec.out_shape
        dy6 = dy.reshape(n, o, h2 // 2, 2, w2 // 2, 2)
        grads = {
            "W": np.einsum("nchw,nohawb->coab", x, dy6, optimize=True),
            "b": dy.sum(axis=(0, 2, 3)),
        }
        return grads, np.einsum("nohawb,coab->nchw", dy6, p["W"], optimize=True)
    if spec.kind == "act":
        return {}, dy * (LEAK + (1.0 - LEAK) * expit(x))
    return {}, dy.reshape(x.shape)


# --- passes ---


def forward(model: NetworkModel, x: np.ndarray):
    x = np.asarray(x, dtype=float)
    if x.shape[1:] != model.input_shape:
        raise ValueError(
            f"input shape {x.shape[1:]} does not match the network's "
            f"{model.input_shape} (batch dimension first)"
        )
    inputs = []
    for spec, p in zip(model.layers, model.params):
        inputs.append(x)
        x = _layer_forward(spec, p, x)
    if not np.isfinite(x).all():
        raise FloatingPointError("non-finite network output")
    return x, Cache(id(model), model.version, tuple(inputs))


def backward(model: NetworkModel, cache: Cache, output_grad: np.ndarray):
    """Parameter gradients and the gradient w.r.t. the network input."""
    if cache.model_id != id(model) or cache.version != model.version:
        raise ValueError(
            "stale activation cache: it was recorded for another model or "
            "before the last parameter update"
        )
    dy = np.asarray(output_grad, dtype=float)
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        grads[i], dy = _layer_backward(
            model.layers[i], model.params[i], cache.inputs[i], dy
        )
    return grads, dy


def zero_grads(model: NetworkModel):
    return [{k: np.zeros_like(a) for k, a in p.items()} for p in model.params]


def add_grads(a, b):
    return [{k: a[i][k] + b[i][k] for k in a[i]} for i in range(len(a))]


# --- optimizer ---


@dataclass(eq=False)
class OptimizerState:
    learning_rate: float
    m: list[dict[str, np.ndarray]]
    v: list[dict[str, np.ndarray]]
    step_count: int = 0
    betas: tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS

    @classmethod
    def for_model(cls, model: NetworkModel, learning_rate: float = LEARNING_RATE):
        return cls(learning_rate, zero_grads(model), zero_grads(model))


def step(optimizer: OptimizerState, model: NetworkModel, grads) -> NetworkModel:
    """One Adam update, in place. Non-finite gradients reject the update."""
    if len(grads) != len(model.params):
        raise ValueError(
            f"{len(grads)} gradient sets for {len(model.params)} layers"
        )
    for g, p in zip(grads, model.params):
        for k, a in p.items():
            if g[k].shape != a.shape:
                raise ValueError(
                    f"gradient shape {g[k].shape} does not match parameter {a.shape}"
                )
            if not np.isfinite(g[k]).all():
                raise FloatingPointError("non-finite gradient; update rejected")
    b1, b2 = optimizer.betas
    optimizer.step_count += 1
    t = optimizer.step_count
    lr = optimizer.learning_rate * math.sqrt(1 - b2**t) / (1 - b1**t)
    for g, p, m, v in zip(grads, model.params, optimizer.m, optimizer.v):
        for k in p:
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v[k] = b2 * v[k] + (1 - b2) * g[k] ** 2
            p[k] = p[k] - lr * m[k] / (np.sqrt(v[k]) + optimizer.eps)
    model.version += 1
    return model


# --- gradient verification ---


def check_gradients(params, loss_and_grads, h: float = 1e-5, max_entries=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``params`` is a list of parameter dicts that ``loss_and_grads()`` reads
    (mutated in place and restored); it returns (loss, grads) with grads
    aligned to ``params``. ``max_entries`` samples that many entries per
    tensor instead of all of them.
    """
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")
    loss, analytic = loss_and_grads()
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss in gradient check")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        for k, a in p.items():
            flat = a.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            for i in idx:
                keep = flat[i]
                flat[i] = keep + h
                up = loss_and_grads()[0]
                flat[i] = keep - h
                down = loss_and_grads()[0]
                flat[i] = keep
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise FloatingPointError("non-finite loss in gradient check")
                numeric = (up - down) / (2 * h)
                exact = g[k].reshape(-1)[i]
                err = abs(exact - numeric) / (abs(exact) + abs(numeric) + 1e-12)
                worst = max(worst, err)
    return worst


def grad_check(model: NetworkModel, loss_fn, x, h: float = 1e-5, max_entries=None):
    """Gradient check of ``loss_fn(output) -> (loss, output_grad)`` through
    the network."""

    def run():
        y, cache = forward(model, x)
        loss, dy = loss_fn(y)
        return loss, backward(model, cache, dy)[0]

    return check_gradients(model.params, run, h, max_entries)


# --- checkpoints ---


def _describe(name, model: NetworkModel) -> dict:
    return {
        "name": name,
        "seed": model.rng_seed,
        "layers": [[s.kind, list(s.in_shape), list(s.out_shape)] for s in model.layers],
        "params": [
            [[k, list(p[k].shape)] for k in sorted(p)] for p in model.params
        ],
    }


def save_checkpoint(path, models: dict[str, NetworkModel], meta: dict | None = None):
    path = Path(path)
    header = {
        "meta": meta or {},
        "networks": [_describe(name, m) for name, m in models.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for m in models.values():
            for p in m.params:
                for k in sorted(p):
                    fh.write(np.ascontiguousarray(p[k], dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Return ({name: NetworkModel}, meta)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a network checkpoint (bad magic)")
    pos = len(MAGIC)
    (size,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos : pos + size].decode("utf-8"))
    pos += size
    models = {}
    for net in header["networks"]:
        layers = tuple(
            LayerSpec(kind, tuple(a), tuple(b)) for kind, a, b in net["layers"]
        )
        params = []
        for entries in net["params"]:
            p = {}
            for k, shape in entries:
                count = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
                p[k] = arr.astype(float).reshape(shape)
                pos += 8 * count
            params.append(p)
        models[net["name"]] = NetworkModel(layers, params, net["seed"])
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes after parameters")
    return models, header["meta"]
