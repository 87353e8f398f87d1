"""Dense encoder / projection head / classifier with hand-written backpropagation.

The network is tiny on purpose: ``encoder`` maps inputs to embeddings through
two ReLU layers, ``projection`` maps embeddings to unit vectors for the
contrastive loss, and ``classifier`` is a single linear layer on the
embeddings. All arithmetic is float64.

Forward functions come in two flavours: ``encode`` / ``project`` / ``classify``
return outputs only, while the ``*_fwd`` variants also return a cache that
:func:`backward` consumes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NORM_EPS = 1e-12
CKPT_MAGIC = b"MDMX-CKPT-1\n"


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    """A parameter or gradient became non-finite."""


@dataclass(frozen=True)
class Arch:
    in_dim: int
    n_classes: int
    hidden: int = 64
    d_h: int = 32
    proj_hidden: int = 32
    d_z: int = 16

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "enc.W1": (self.in_dim, self.hidden),
            "enc.b1": (self.hidden,),
            "enc.W2": (self.hidden, self.d_h),
            "enc.b2": (self.d_h,),
            "proj.W1": (self.d_h, self.proj_hidden),
            "proj.b1": (self.proj_hidden,),
            "proj.W2": (self.proj_hidden, self.d_z),
            "proj.b2": (self.d_z,),
            "clf.W": (self.d_h, self.n_classes),
            "clf.b": (self.n_classes,),
        }


@dataclass
class Model:
    arch: Arch
    params: dict[str, np.ndarray]

    def copy(self) -> "Model":
        return Model(self.arch, {k: v.copy() for k, v in self.params.items()})

    def check_finite(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p)):
                raise DivergenceError(f"parameter {name} is not finite")


def init_model(in_dim: int, n_classes: int, seed: int, **arch_kw) -> Model:
    """Glorot-uniform weights, zero biases."""
    arch = Arch(in_dim, n_classes, **arch_kw)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.shapes().items():
        if len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return Model(arch, params)


def zero_grads(model: Model) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def _check_input(x: np.ndarray, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what} expects shape (B, {width}), got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class EncodeCache:
    owner: Model
    x: np.ndarray
    pre1: np.ndarray
    act1: np.ndarray
    pre2: np.ndarray


@dataclass
class ProjectCache:
    owner: Model
    h: np.ndarray
    pre1: np.ndarray
    act1: np.ndarray
    u: np.ndarray
    norm: np.ndarray


@dataclass
class ClassifyCache:
    owner: Model
    h: np.ndarray


def encode_fwd(model: Model, x) -> tuple[np.ndarray, EncodeCache]:
    p = model.params
    x = _check_input(x, model.arch.in_dim, "encode")
    pre1 = x @ p["enc.W1"] + p["enc.b1"]
    act1 = np.maximum(pre1, 0.0)
    pre2 = act1 @ p["enc.W2"] + p["enc.b2"]
    return np.maximum(pre2, 0.0), EncodeCache(model, x, pre1, act1, pre2)


def project_fwd(model: Model, h) -> tuple[np.ndarray, ProjectCache]:
    p = model.params
    h = _check_input(h, model.arch.d_h, "project")
    pre1 = h @ p["proj.W1"] + p["proj.b1"]
    act1 = np.maximum(pre1, 0.0)
    u = act1 @ p["proj.W2"] + p["proj.b2"]
    norm = np.sqrt(np.sum(u * u, axis=1, keepdims=True))
    return u / (norm + NORM_EPS), ProjectCache(model, h, pre1, act1, u, norm)


def classify_fwd(model: Model, h) -> tuple[np.ndarray, ClassifyCache]:
    h = _check_input(h, model.arch.d_h, "classify")
    return h @ model.params["clf.W"] + model.params["clf.b"], ClassifyCache(model, h)


def encode(model: Model, x) -> np.ndarray:
    return encode_fwd(model, x)[0]


def project(model: Model, h) -> np.ndarray:
    return project_fwd(model, h)[0]


def classify(model: Model, h) -> np.ndarray:
    return classify_fwd(model, h)[0]


def predict_logits(model: Model, x) -> np.ndarray:
    return classify(model, encode(model, x))


# ---------------------------------------------------------------------------
# backward passes


def backward(model: Model, cache, grad_out, grads: dict | None = None):
    """Backpropagate ``grad_out`` through the pass that produced ``cache``.

    Parameter gradients are accumulated into ``grads`` (created if omitted).
    Returns ``(grads, grad_input)``.
    """
    if cache is None:
        raise StateError("backward called without a recorded forward pass")
    if cache.owner is not model:
        raise StateError("cache was recorded on a different model")
    if grads is None:
        grads = zero_grads(model)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    p = model.params
    if isinstance(cache, ClassifyCache):
        grads["clf.W"] += cache.h.T @ grad_out
        grads["clf.b"] += grad_out.sum(axis=0)
        return grads, grad_out @ p["clf.W"].T
    if isinstance(cache, ProjectCache):
        # z = u / (|u| + eps)
        denom = cache.norm + NORM_EPS
        safe = np.where(cache.norm > 0, cache.norm, 1.0)
        radial = np.sum(cache.u * grad_out, axis=1, keepdims=True)
        g_u = grad_out / denom - cache.u * radial / (safe * denom * denom)
        grads["proj.W2"] += cache.act1.T @ g_u
        grads["proj.b2"] += g_u.sum(axis=0)
        g_pre1 = (g_u @ p["proj.W2"].T) * (cache.pre1 > 0)
        grads["proj.W1"] += cache.h.T @ g_pre1
        grads["proj.b1"] += g_pre1.sum(axis=0)
        return grads, g_pre1 @ p["proj.W1"].T
    if isinstance(cache, EncodeCache):
        g_pre2 = grad_out * (cache.pre2 > 0)
        grads["enc.W2"] += cache.act1.T @ g_pre2
        grads["enc.b2"] += g_pre2.sum(axis=0)
        g_pre1 = (g_pre2 @ p["enc.W2"].T) * (cache.pre1 > 0)
        grads["enc.W1"] += cache.x.T @ g_pre1
        grads["enc.b1"] += g_pre1.sum(axis=0)
        return grads, g_pre1 @ p["enc.W1"].T
    raise StateError(f"unknown cache type {type(cache).__name__}")


# ---------------------------------------------------------------------------
# optimisation


def cosine_lr(base_lr: float, epoch: float, total_epochs: int) -> float:
    if total_epochs <= 0:
        return base_lr
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class OptState:
    lr_classifier: float = 0.1
    lr_backbone: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    total_epochs: int = 1
    trainable: tuple[str, ...] = ("enc", "proj", "clf")
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def base_lr(self, name: str) -> float:
        return self.lr_classifier if name.startswith("clf.") else self.lr_backbone


def sgd_step(model: Model, opt: OptState, grads: dict[str, np.ndarray], epoch: float) -> Model:
    """One SGD-with-momentum step, in place.

    ``v <- mu * v + g + wd * p`` then ``p <- p - lr(epoch) * v``.
    """
    for name in model.params:
        if not np.all(np.isfinite(grads[name])):
            raise DivergenceError(f"gradient of {name} is not finite")
    for name, p in model.params.items():
        if name.split(".", 1)[0] not in opt.trainable:
            continue
        v = opt.buffers.get(name)
        if v is None:
            v = opt.buffers[name] = np.zeros_like(p)
        if v.shape != p.shape:
            raise ShapeError(f"momentum buffer for {name} has shape {v.shape}, expected {p.shape}")
        v *= opt.momentum
        v += grads[name]
        if opt.weight_decay:
            v += opt.weight_decay * p
        p -= cosine_lr(opt.base_lr(name), epoch, opt.total_epochs) * v
    model.check_finite()
    return model


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, opt: OptState | None = None, meta: dict | None = None) -> None:
    """Write a self-describing checkpoint atomically (temp file, then rename).

    Layout: magic line, one JSON header line, then the little-endian float64
    payload of every tensor in header order.
    """
    tensors = [("param/" + k, v) for k, v in model.params.items()]
    opt_meta = None
    if opt is not None:
        tensors += [("momentum/" + k, v) for k, v in sorted(opt.buffers.items())]
        opt_meta = {
            "lr_classifier": opt.lr_classifier,
            "lr_backbone": opt.lr_backbone,
            "momentum": opt.momentum,
            "weight_decay": opt.weight_decay,
            "total_epochs": opt.total_epochs,
            "trainable": list(opt.trainable),
        }
    index, offset = [], 0
    for name, arr in tensors:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "arch": vars(model.arch),
        "tensors": index,
        "opt": opt_meta,
        "meta": meta or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[Model, OptState | None, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not an MDMX-CKPT-1 checkpoint")
    end = blob.index(b"\n", len(CKPT_MAGIC))
    header = json.loads(blob[len(CKPT_MAGIC):end])
    payload = memoryview(blob)[end + 1:]
    arrays = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        raw = payload[t["offset"]: t["offset"] + count * 8]
        if len(raw) != count * 8:
            raise ValueError(f"{path}: truncated tensor {t['name']}")
        arrays[t["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(t["shape"])
    arch = Arch(**header["arch"])
    params = {k: arrays["param/" + k] for k in arch.shapes()}
    opt = None
    if header["opt"] is not None:
        o = dict(header["opt"])
        o["trainable"] = tuple(o["trainable"])
        buffers = {k[len("momentum/"):]: v for k, v in arrays.items() if k.startswith("momentum/")}
        opt = OptState(**o, buffers=buffers)
    return Model(arch, params), opt, header["meta"]
