"""Central finite-difference checks for every analytic gradient in the package.

The error metric is ``max|analytic - numeric| / max(max|numeric|, tiny)``,
taken over all entries of the checked tensor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import embedder as emb
from .data import enumerate_pairs
from .losses import LossConfig, cross_entropy, gds_h_loss, triplet_batch_hard
from .stats import GaussianStats

H = 1e-6
TOLERANCE = 1e-5


@dataclass
class CheckResult:
    suite: str
    instance: int
    max_rel_error: float
    worst_tensor: str
    worst_index: tuple

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def numeric_grad(f, x, h=H):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def relative_error(analytic, numeric):
    diff = np.abs(analytic - numeric)
    scale = max(float(np.max(np.abs(numeric))), 1e-300)
    worst = np.unravel_index(int(np.argmax(diff)), diff.shape)
    return float(diff.max()) / scale, tuple(int(v) for v in worst)


def _unit_rows(rng, n, dim):
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _labels(rng, batch):
    # 4 identities x 4 samples at batch 16, shuffled
    k = 4
    return rng.permutation(np.repeat(np.arange(batch // k), k))


def _random_stats(rng):
    beta = float(rng.uniform(0.5, 0.99))
    pos = GaussianStats(float(rng.uniform(0.2, 0.45)), float(rng.uniform(0.005, 0.05)), beta)
    neg = GaussianStats(float(rng.uniform(0.55, 0.8)), float(rng.uniform(0.005, 0.05)), beta)
    return pos, neg


def _random_cfg(rng):
    return LossConfig(float(rng.uniform(0.1, 1.0)), float(rng.uniform(0.5, 2.0)),
                      float(rng.uniform(1.0, 4.0)))


def check_gds_h(rng, batch=16, dim=8, sign=1.0):
    x = _unit_rows(rng, batch, dim)
    pos_pairs, neg_pairs = enumerate_pairs(_labels(rng, batch))
    pos, neg = _random_stats(rng)
    cfg = _random_cfg(rng)
    out, _, _ = gds_h_loss(x, pos_pairs, neg_pairs, pos, neg, cfg)
    num = numeric_grad(lambda: gds_h_loss(x, pos_pairs, neg_pairs, pos, neg, cfg)[0].value, x)
    err, idx = relative_error(sign * out.grad, num)
    return err, "embeddings", idx


def check_triplet(rng, batch=16, dim=8, sign=1.0):
    x = _unit_rows(rng, batch, dim)
    y = _labels(rng, batch)
    out = triplet_batch_hard(x, y)
    num = numeric_grad(lambda: triplet_batch_hard(x, y).value, x)
    err, idx = relative_error(sign * out.grad, num)
    return err, "embeddings", idx


def check_cross_entropy(rng, batch=16, classes=5, sign=1.0):
    z = rng.standard_normal((batch, classes)) * 2.0
    y = rng.integers(classes, size=batch)
    out = cross_entropy(z, y)
    num = numeric_grad(lambda: cross_entropy(z, y).value, z)
    err, idx = relative_error(sign * out.grad, num)
    return err, "logits", idx


def check_end_to_end(rng, batch=16, dim=8, sign=1.0, sizes=None):
    """Raw MLP weights -> normalisation -> stats update -> GDS-H loss."""
    sizes = sizes or (6, 10, 10, dim)
    params = emb.init_params(sizes, rng=rng)
    inputs = rng.standard_normal((batch, sizes[0]))
    pos_pairs, neg_pairs = enumerate_pairs(_labels(rng, batch))
    pos, neg = _random_stats(rng)
    cfg = _random_cfg(rng)

    def loss():
        x, _ = emb.forward(params, inputs)
        return gds_h_loss(x, pos_pairs, neg_pairs, pos, neg, cfg)[0].value

    x, trace = emb.forward(params, inputs)
    out, _, _ = gds_h_loss(x, pos_pairs, neg_pairs, pos, neg, cfg)
    grads, input_grads = emb.backward(params, trace, out.grad)
    worst = (0.0, "", ())
    tensors = [(name, params.arrays[name], grads[name]) for name in sorted(grads)]
    tensors.append(("inputs", inputs, input_grads))
    for name, arr, analytic in tensors:
        num = numeric_grad(loss, arr)
        err, idx = relative_error(sign * analytic, num)
        if err >= worst[0]:
            worst = (err, name, idx)
    return worst


SUITES = {
    "gds_h_loss": check_gds_h,
    "triplet_batch_hard": check_triplet,
    "cross_entropy": check_cross_entropy,
    "end_to_end": check_end_to_end,
}


def run_all(seed=0, instances=20, inject_sign_error=False) -> list[CheckResult]:
    """Run every suite on ``instances`` random instances each.

    ``inject_sign_error`` flips the analytic gradients; it exists only as a
    negative control proving the checker can fail.
    """
    sign = -1.0 if inject_sign_error else 1.0
    results = []
    for name, fn in SUITES.items():
        rng = np.random.default_rng([seed, list(SUITES).index(name)])
        for i in range(instances):
            err, tensor, idx = fn(rng, sign=sign)
            results.append(CheckResult(name, i, err, tensor, idx))
    return results
