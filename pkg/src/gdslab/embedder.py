"""Small tanh MLP producing unit-norm embeddings, with manual backprop and Adam."""
from __future__ import annotations

from dataclasses import dataclass, field
import json
import struct

import numpy as np

CHECKPOINT_VERSION = 1
_MAGIC = b"GDSCKPT\x00"


@dataclass
class MlpParams:
    """Layer weights ``W{i}`` (in x out), biases ``b{i}`` and optional
    classifier ``cls`` (embed x classes), plus Adam moment buffers."""

    sizes: tuple
    arrays: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def has_classifier(self) -> bool:
        return "cls" in self.arrays

    def copy(self) -> "MlpParams":
        return MlpParams(
            tuple(self.sizes),
            {k: v.copy() for k, v in self.arrays.items()},
            {k: v.copy() for k, v in self.adam_m.items()},
            {k: v.copy() for k, v in self.adam_v.items()},
            self.step,
        )

    def drop_classifier(self) -> "MlpParams":
        """Copy without the classifier head and with fresh optimizer state."""
        arrays = {k: v.copy() for k, v in self.arrays.items() if k != "cls"}
        return MlpParams(tuple(self.sizes), arrays)


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    activations: list  # activations[i] is the input to layer i
    features: np.ndarray  # pre-normalisation output f
    norms: np.ndarray  # ||f|| per row
    embeddings: np.ndarray
    params_id: int
    linear: bool = False
    params_step: int = 0


def init_params(sizes=(32, 64, 64, 16), n_classes=0, rng=None) -> MlpParams:
    """Fan-in scaled uniform init."""
    rng = np.random.default_rng(rng)
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(3.0 / fan_in)
        arrays[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[f"b{i}"] = np.zeros(fan_out)
    if n_classes:
        bound = np.sqrt(3.0 / sizes[-1])
        arrays["cls"] = rng.uniform(-bound, bound, size=(sizes[-1], n_classes))
    return MlpParams(tuple(int(s) for s in sizes), arrays)


def forward(params: MlpParams, inputs, *, linear: bool = False):
    """Return ``(unit embeddings, trace)``.

    Hidden layers use tanh unless ``linear`` is set; the last layer is affine.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.sizes[0]:
        raise ValueError(f"expected inputs of shape (n, {params.sizes[0]}), got {x.shape}")
    acts = [x]
    h = x
    for i in range(params.n_layers):
        h = h @ params.arrays[f"W{i}"] + params.arrays[f"b{i}"]
        if i < params.n_layers - 1 and not linear:
            h = np.tanh(h)
        acts.append(h)
    f = h
    norms = np.sqrt(np.einsum("ij,ij->i", f, f))
    if np.any(norms == 0.0):
        raise FloatingPointError("zero-norm feature cannot be normalised")
    emb = f / norms[:, None]
    return emb, ForwardTrace(x, acts[:-1], f, norms, emb, id(params.arrays), linear, params.step)


def embed(params: MlpParams, inputs) -> np.ndarray:
    return forward(params, inputs)[0]


def normalize_backward(embeddings, norms, grad_embeddings):
    """Backprop through ``x = f / ||f||``: ``(I - x x^T) g / ||f||``."""
    g = np.asarray(grad_embeddings, dtype=np.float64)
    radial = np.einsum("ij,ij->i", embeddings, g)
    return (g - embeddings * radial[:, None]) / norms[:, None]


def backward(params: MlpParams, trace: ForwardTrace, grad_embeddings):
    """Gradients of ``<grad_embeddings, embeddings>`` w.r.t. params and inputs.

    Returns ``(param_grads, input_grads)``; ``param_grads`` has no ``cls`` key
    (see :func:`classifier_forward`).
    """
    if trace.params_id != id(params.arrays):
        raise ValueError("trace was produced with different params")
    if trace.params_step != params.step:
        raise ValueError("stale trace: params were updated after the forward pass")
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if g.shape != trace.embeddings.shape:
        raise ValueError("gradient shape does not match embeddings")
    delta = normalize_backward(trace.embeddings, trace.norms, g)
    grads = {}
    for i in reversed(range(params.n_layers)):
        a_in = trace.activations[i]
        grads[f"W{i}"] = a_in.T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        delta = delta @ params.arrays[f"W{i}"].T
        if i > 0 and not trace.linear:
            delta = delta * (1.0 - a_in * a_in)  # a_in = tanh(z_{i-1})
    return grads, delta


def classifier_forward(params: MlpParams, embeddings):
    return embeddings @ params.arrays["cls"]


def classifier_backward(params: MlpParams, embeddings, grad_logits):
    """Returns ``(grad_cls, grad_embeddings)``."""
    return embeddings.T @ grad_logits, grad_logits @ params.arrays["cls"].T


def adam_step(params: MlpParams, grads: dict, lr: float, betas=(0.9, 0.999), eps=1e-8) -> MlpParams:
    """One bias-corrected Adam update, in place; returns ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(g))[0]
            raise FloatingPointError(f"non-finite gradient in {name} at index {tuple(bad)}")
    b1, b2 = betas
    params.step += 1
    c1 = 1.0 - b1 ** params.step
    c2 = 1.0 - b2 ** params.step
    for name, g in grads.items():
        m = params.adam_m.get(name)
        if m is None:
            m = params.adam_m[name] = np.zeros_like(g)
            params.adam_v[name] = np.zeros_like(g)
        v = params.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.arrays[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def save_checkpoint(params: MlpParams, path) -> None:
    """Magic, 8-byte header length, JSON header, then raw little-endian float64
    arrays in header order. Contains no timestamps, so identical params give
    identical bytes."""
    entries = []
    for group, arrays in (("p", params.arrays), ("m", params.adam_m), ("v", params.adam_v)):
        for name in sorted(arrays):
            entries.append((group, name, np.ascontiguousarray(arrays[name], dtype="<f8")))
    header = {
        "version": CHECKPOINT_VERSION,
        "sizes": list(params.sizes),
        "step": params.step,
        "entries": [[g, n, list(a.shape)] for g, n, a in entries],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, _, a in entries:
            fh.write(a.tobytes())


def load_checkpoint(path) -> MlpParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    pos = len(_MAGIC)
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos:pos + n].decode())
    pos += n
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    groups = {"p": {}, "m": {}, "v": {}}
    for group, name, shape in header["entries"]:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape)
        groups[group][name] = arr.astype(np.float64)
        pos += 8 * count
    if pos != len(raw):
        raise ValueError("trailing bytes in checkpoint")
    return MlpParams(tuple(header["sizes"]), groups["p"], groups["m"], groups["v"], header["step"])
