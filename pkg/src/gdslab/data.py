"""Synthetic multi-identity domains, PK batch sampling and pair enumeration."""
from __future__ import annotations

from dataclasses import dataclass
import csv

import numpy as np


@dataclass(frozen=True)
class DomainShift:
    """Shared affine distortion applied to a whole domain.

    ``x -> R diag(s) x + offset + noise``, with ``R`` a random rotation
    (identity when ``rotate`` is false), ``s`` drawn uniformly from
    ``scale_range`` per dimension, and isotropic per-sample noise of standard
    deviation ``noise * cluster_spread``.
    """

    rotate: bool = True
    scale_range: tuple = (0.5, 2.0)
    offset_scale: float = 0.0
    noise: float = 0.3


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    domain: str
    identity_count: int
    rng_seed: int | None = None

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.features[index], self.labels[index], self.domain,
                              self.identity_count, self.rng_seed)

    def relabeled(self, labels) -> "LabeledDataset":
        labels = np.asarray(labels, dtype=np.int64)
        count = int(labels.max()) + 1 if labels.size else 0
        return LabeledDataset(self.features, labels, self.domain, count, self.rng_seed)


@dataclass(frozen=True)
class PkBatch:
    indices: np.ndarray
    labels: np.ndarray
    P: int
    K: int


def random_rotation(dim, rng):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def generate_domain(identity_count, samples_per_identity, dim=32, cluster_spread=1.0,
                    domain_shift: DomainShift | None = None, seed=0, *,
                    domain="source", center_scale=1.0, nuisance_rank=0,
                    nuisance_scale=0.0) -> LabeledDataset:
    """Gaussian identity clusters around random centres.

    ``nuisance_rank`` > 0 adds within-identity variation along a shared random
    subspace (the same for every identity of the domain), mimicking viewpoint
    or pose changes that a good embedding must learn to ignore.
    """
    if identity_count < 1 or samples_per_identity < 1 or dim < 1:
        raise ValueError("identity_count, samples_per_identity and dim must be >= 1")
    if cluster_spread < 0:
        raise ValueError("cluster_spread must be >= 0")
    rng = np.random.default_rng(seed)
    centers = center_scale * rng.standard_normal((identity_count, dim))
    labels = np.repeat(np.arange(identity_count), samples_per_identity)
    n = labels.size
    feats = centers[labels] + cluster_spread * rng.standard_normal((n, dim))
    if nuisance_rank > 0 and nuisance_scale > 0:
        basis = random_rotation(dim, rng)[:, :nuisance_rank]
        feats += nuisance_scale * rng.standard_normal((n, nuisance_rank)) @ basis.T
    if domain_shift is not None:
        rot = random_rotation(dim, rng) if domain_shift.rotate else np.eye(dim)
        lo, hi = domain_shift.scale_range
        scales = rng.uniform(lo, hi, size=dim)
        offset = domain_shift.offset_scale * rng.standard_normal(dim)
        feats = (feats * scales) @ rot.T + offset
        feats += domain_shift.noise * cluster_spread * rng.standard_normal((n, dim))
    return LabeledDataset(feats, labels, domain, identity_count, seed)


def split_by_identity(dataset: LabeledDataset, train_fraction=0.7, seed=0):
    """Split into two datasets with disjoint identities, each relabeled 0..n-1."""
    rng = np.random.default_rng(seed)
    ids = rng.permutation(dataset.identity_count)
    n_train = int(round(train_fraction * dataset.identity_count))
    parts = []
    for chosen in (np.sort(ids[:n_train]), np.sort(ids[n_train:])):
        idx = np.flatnonzero(np.isin(dataset.labels, chosen))
        remap = {int(old): new for new, old in enumerate(chosen)}
        sub = dataset.subset(idx)
        sub = sub.relabeled(np.array([remap[int(v)] for v in sub.labels], dtype=np.int64))
        parts.append(sub)
    return parts[0], parts[1]


def split_by_sample(dataset: LabeledDataset, train_fraction=0.7, seed=0):
    """Split every identity's samples ``train_fraction`` / rest; labels unchanged."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for ident in range(dataset.identity_count):
        members = rng.permutation(np.flatnonzero(dataset.labels == ident))
        n_train = int(round(train_fraction * members.size))
        train_idx.append(members[:n_train])
        test_idx.append(members[n_train:])
    return (dataset.subset(np.sort(np.concatenate(train_idx))),
            dataset.subset(np.sort(np.concatenate(test_idx))))


def pk_sample(labels, P, K, rng) -> PkBatch:
    """Draw ``P`` identities, then ``K`` samples of each, all without replacement."""
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    eligible = ids[counts >= K]
    if eligible.size < P:
        raise ValueError(
            f"need {P} identities with >= {K} samples, only {eligible.size} available"
        )
    chosen = rng.choice(eligible, size=P, replace=False)
    indices = []
    for ident in chosen:
        members = np.flatnonzero(labels == ident)
        indices.append(rng.choice(members, size=K, replace=False))
    indices = np.concatenate(indices)
    return PkBatch(indices, labels[indices], P, K)


def enumerate_pairs(batch_labels):
    """All unordered within-batch pairs split into (positive, negative) arrays
    of shape ``(m, 2)``, ordered lexicographically by (i, j)."""
    y = np.asarray(getattr(batch_labels, "labels", batch_labels))
    i, j = np.triu_indices(len(y), k=1)
    same = y[i] == y[j]
    return np.stack([i[same], j[same]], axis=1), np.stack([i[~same], j[~same]], axis=1)


def save_csv(path, *datasets: LabeledDataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = datasets[0].features.shape[1]
        w.writerow(["domain", "identity"] + [f"f{k}" for k in range(dim)])
        for ds in datasets:
            for feat, ident in zip(ds.features, ds.labels):
                w.writerow([ds.domain, int(ident)] + [repr(float(v)) for v in feat])


def load_csv(path) -> dict:
    """Read a dataset CSV back into ``{domain: LabeledDataset}``."""
    rows = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            rows.setdefault(row[0], []).append(row)
    out = {}
    for domain, items in rows.items():
        labels = np.array([int(x[1]) for x in items], dtype=np.int64)
        feats = np.array([[float(v) for v in x[2:]] for x in items], dtype=np.float64)
        out[domain] = LabeledDataset(feats, labels, domain, int(labels.max()) + 1)
    return out
