"""Three-stage unsupervised adaptation: source pretraining, then alternating
target clustering and pseudo-label fine-tuning."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
import csv
import json
import logging
import math
import os

import numpy as np

from . import clustering as clus
from . import embedder as emb
from .data import (
    DomainShift,
    enumerate_pairs,
    generate_domain,
    pk_sample,
    split_by_identity,
    split_by_sample,
)
from .evaluation import EvalReport, evaluate_embeddings
from .losses import (
    DegenerateBatchError,
    LossConfig,
    cross_entropy,
    gds_h_loss,
    triplet_batch_hard,
)
from .stats import GaussianStats, INIT_MEAN, INIT_VARIANCE, snapshot

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LOSSES = ("triplet", "gds", "gds-h")
SWEEPABLE = ("beta", "kappa", "lambda_h", "lambda_sigma", "clustering", "loss")
_STREAMS = {"data": 0, "init": 1, "sampler": 2, "clustering": 3, "eval": 4}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    # benchmark
    source_ids: int = 64
    target_ids: int = 64
    samples_per_id: int = 20
    dim: int = 32
    cluster_spread: float = 0.5
    center_scale: float = 1.0
    nuisance_rank: int = 0
    nuisance_scale: float = 0.0
    shift_rotate: bool = True
    shift_scale_lo: float = 0.5
    shift_scale_hi: float = 2.0
    shift_noise: float = 0.3
    train_fraction: float = 0.7
    split: str = "identity"
    # model
    hidden: int = 64
    embed_dim: int = 16
    # sampling
    P: int = 32
    K: int = 4
    # stage 1
    pretrain_epochs: int = 100
    pretrain_lr: float = 3e-4
    # stages 2-3
    rounds: int = 10
    epochs_per_round: int = 10
    adapt_lr: float = 3e-4
    loss: str = "gds-h"
    lambda_h: float = 0.5
    lambda_sigma: float = 3.0
    kappa: float = 3.0
    beta: float = 0.99
    gds_weight: float = 100.0
    warmup_batches: int = 5
    reset_stats_each_round: bool = False
    init_mean: float = INIT_MEAN
    init_variance: float = INIT_VARIANCE
    clustering: str = "dbscan"
    eps_percentile: float = 0.16
    min_pts: int = 4
    kmeans_k: int = 45
    max_cluster_failures: int = 3
    hist_bins: int = 100
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("P", "K", "rounds", "epochs_per_round", "min_pts", "source_ids",
                     "target_ids", "samples_per_id", "dim", "hidden", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be >= 0")
        for name in ("pretrain_lr", "adapt_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.split not in ("sample", "identity"):
            raise ValueError(f"split must be 'sample' or 'identity', got {self.split!r}")
        if self.clustering not in ("dbscan", "kmeans"):
            raise ValueError(f"unknown clustering {self.clustering!r}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        self.loss_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambda_h, self.lambda_sigma, self.kappa)

    def rng(self, stream: str, *extra) -> np.random.Generator:
        return np.random.default_rng([self.seed, _STREAMS[stream], *extra])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunLog:
    epochs: list = field(default_factory=list)
    stats: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    notes: list = field(default_factory=list)


@dataclass
class Benchmark:
    source: object
    target_train: object
    target_test: object


def make_benchmark(cfg: TrainConfig) -> Benchmark:
    """Source domain plus a shifted target domain split into train and test parts."""
    seed = int(cfg.rng("data").integers(2**31))
    common = dict(dim=cfg.dim, cluster_spread=cfg.cluster_spread, center_scale=cfg.center_scale,
                  nuisance_rank=cfg.nuisance_rank, nuisance_scale=cfg.nuisance_scale)
    source = generate_domain(cfg.source_ids, cfg.samples_per_id, seed=seed, domain="source", **common)
    shift = DomainShift(cfg.shift_rotate, (cfg.shift_scale_lo, cfg.shift_scale_hi), 0.0, cfg.shift_noise)
    target = generate_domain(cfg.target_ids, cfg.samples_per_id, domain_shift=shift,
                             seed=seed + 1, domain="target", **common)
    splitter = split_by_sample if cfg.split == "sample" else split_by_identity
    train, test = splitter(target, cfg.train_fraction, seed=seed + 2)
    return Benchmark(source, train, test)


def _n_batches(n_samples, cfg):
    return max(1, math.ceil(n_samples / (cfg.P * cfg.K)))


def _embed_grad_step(params, trace, grad_embeddings, lr, extra=None):
    grads, _ = emb.backward(params, trace, grad_embeddings)
    if extra:
        grads.update(extra)
    emb.adam_step(params, grads, lr)


def pretrain_source(cfg: TrainConfig, source, runlog: RunLog | None = None):
    """Stage 1: classification + batch-hard triplet on labelled source data.

    Returns params without the classifier head.
    """
    runlog = runlog if runlog is not None else RunLog()
    sizes = (cfg.dim, cfg.hidden, cfg.hidden, cfg.embed_dim)
    params = emb.init_params(sizes, n_classes=source.identity_count, rng=cfg.rng("init"))
    rng = cfg.rng("sampler", 0)
    P = min(cfg.P, source.identity_count)
    for epoch in range(cfg.pretrain_epochs):
        totals = np.zeros(2)
        nb = _n_batches(len(source), cfg)
        for _ in range(nb):
            batch = pk_sample(source.labels, P, cfg.K, rng)
            x, trace = emb.forward(params, source.features[batch.indices])
            ce = cross_entropy(emb.classifier_forward(params, x), batch.labels)
            tri = triplet_batch_hard(x, batch.labels)
            if not (math.isfinite(ce.value) and math.isfinite(tri.value)):
                raise TrainingError(f"non-finite loss in pretraining epoch {epoch}")
            g_cls, g_emb = emb.classifier_backward(params, x, ce.grad)
            _embed_grad_step(params, trace, g_emb + tri.grad, cfg.pretrain_lr, {"cls": g_cls})
            totals += (ce.value, tri.value)
        row = {"stage": "pretrain", "round": -1, "epoch": epoch,
               "ce": totals[0] / nb, "triplet": totals[1] / nb}
        runlog.epochs.append(row)
    return params.drop_classifier()


def _cluster(cfg, feats, round_idx):
    if cfg.clustering == "dbscan":
        eps = clus.eps_from_percentile(feats, cfg.eps_percentile)
        return clus.dbscan(feats, eps, cfg.min_pts), eps
    seed = int(cfg.rng("clustering", round_idx).integers(2**31))
    return clus.kmeans(feats, min(cfg.kmeans_k, len(feats)), seed=seed), None


def adapt_target(cfg: TrainConfig, params, target_train, runlog: RunLog | None = None,
                 on_round_end=None, cluster_dir=None):
    """Stages 2-3, alternated ``cfg.rounds`` times.

    ``on_round_end(round_idx, params, runlog)`` is called after each round,
    e.g. for evaluation and checkpointing. With ``cluster_dir`` each round's
    pseudo labels are dumped to ``round_<r>.csv`` there. The global distance statistics
    persist across batches, epochs and rounds unless
    ``cfg.reset_stats_each_round`` is set.
    """
    runlog = runlog if runlog is not None else RunLog()
    params = params.copy()
    lcfg = cfg.loss_config()
    use_gds = cfg.loss in ("gds", "gds-h")
    hard = cfg.loss == "gds-h"

    def fresh_stats():
        return (GaussianStats(cfg.init_mean, cfg.init_variance, cfg.beta),
                GaussianStats(cfg.init_mean, cfg.init_variance, cfg.beta))

    pos_stats, neg_stats = fresh_stats()
    if use_gds and cfg.warmup_batches:
        runlog.notes.append(f"first {cfg.warmup_batches} batches update stats without GDS gradient")
    rng = cfg.rng("sampler", 1)
    labels_prev = None
    failures = 0
    batch_count = 0
    for r in range(cfg.rounds):
        feats = emb.embed(params, target_train.features)
        assignment, eps = _cluster(cfg, feats, r)
        try:
            kept, pseudo = clus.pseudo_label_filter(assignment, np.arange(len(feats)), cfg.K)
            failures = 0
        except clus.NoUsableClustersError:
            failures += 1
            if labels_prev is None or failures >= cfg.max_cluster_failures:
                raise TrainingError(f"no usable clusters in round {r}")
            kept, pseudo = labels_prev
            runlog.notes.append(f"round {r}: clustering failed, reusing previous labels")
        labels_prev = (kept, pseudo)
        if cluster_dir is not None:
            clus.save_assignment_csv(os.path.join(cluster_dir, f"round_{r}.csv"), kept, pseudo)
        n_clusters = int(pseudo.max()) + 1
        round_rec = {"round": r, "clusters": assignment.cluster_count, "usable_clusters": n_clusters,
                     "kept": int(len(kept)), "noise": assignment.noise_count, "eps": eps,
                     "purity": _purity(target_train.labels[kept], pseudo)}
        if cfg.reset_stats_each_round and r > 0:
            pos_stats, neg_stats = fresh_stats()
        P = min(cfg.P, n_clusters)
        if P < 2:
            raise TrainingError(f"round {r}: fewer than two usable clusters")
        x_all = target_train.features[kept]
        for e in range(cfg.epochs_per_round):
            sums = {"triplet": 0.0, "gds_h": 0.0}
            nb = _n_batches(len(kept), cfg)
            for _ in range(nb):
                batch = pk_sample(pseudo, P, cfg.K, rng)
                x, trace = emb.forward(params, x_all[batch.indices])
                tri = triplet_batch_hard(x, batch.labels)
                grad = tri.grad
                sums["triplet"] += tri.value
                if use_gds:
                    pos_pairs, neg_pairs = enumerate_pairs(batch.labels)
                    try:
                        out, new_pos, new_neg = gds_h_loss(x, pos_pairs, neg_pairs, pos_stats,
                                                           neg_stats, lcfg, hard_mining=hard)
                    except DegenerateBatchError:
                        out = None
                    if out is not None:
                        pos_stats, neg_stats = new_pos, new_neg
                        sums["gds_h"] += out.value
                        if batch_count >= cfg.warmup_batches:
                            grad = grad + cfg.gds_weight * out.grad
                batch_count += 1
                if not math.isfinite(tri.value) or not np.all(np.isfinite(grad)):
                    raise TrainingError(f"non-finite loss in round {r} epoch {e}")
                _embed_grad_step(params, trace, grad, cfg.adapt_lr)
            runlog.epochs.append({"stage": "adapt", "round": r, "epoch": e,
                                  "triplet": sums["triplet"] / nb, "gds_h": sums["gds_h"] / nb})
            runlog.stats.append(snapshot(pos_stats, neg_stats, len(runlog.stats)))
        runlog.rounds.append(round_rec)
        if on_round_end is not None:
            on_round_end(r, params, runlog)
    return params, runlog


def _purity(true_labels, pseudo):
    """Fraction of kept samples whose pseudo cluster's majority identity matches theirs."""
    hits = 0
    for c in np.unique(pseudo):
        members = true_labels[pseudo == c]
        hits += np.bincount(members).max()
    return float(hits / max(len(pseudo), 1))


def evaluate(cfg, params, dataset) -> EvalReport:
    return evaluate_embeddings(emb.embed(params, dataset.features), dataset.labels, cfg.hist_bins)


def _summary(report: EvalReport) -> dict:
    sep = report.separation
    return {"map": report.map, "rank1": report.rank1, "auc": report.auc,
            "gap_in_sigmas": sep.gap_in_sigmas, "overlap": sep.empirical_overlap,
            "mean_gap": sep.mean_gap}


def run_experiment(cfg: TrainConfig, run_dir=None, bench: Benchmark | None = None,
                   pretrained=None) -> dict:
    """Full pipeline on the synthetic benchmark; optionally writes a run directory.

    ``pretrained`` lets sweeps share one stage-1 model between runs of the
    same seed (stage 1 does not depend on any swept adaptation parameter).
    """
    bench = bench or make_benchmark(cfg)
    runlog = RunLog()
    if run_dir is not None:
        for sub in ("checkpoints", "logs", "clusters", "eval"):
            os.makedirs(os.path.join(run_dir, sub), exist_ok=True)
        with open(os.path.join(run_dir, "config.json"), "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
    params = pretrained.copy() if pretrained is not None else pretrain_source(cfg, bench.source, runlog)
    direct = evaluate(cfg, params, bench.target_test)
    result = {"direct": _summary(direct)}
    if run_dir is not None:
        emb.save_checkpoint(params, os.path.join(run_dir, "checkpoints", "pretrain.bin"))
        direct.save(os.path.join(run_dir, "eval", "direct.json"))

    def on_round_end(r, p, rl):
        rep = evaluate(cfg, p, bench.target_test)
        rl.rounds[-1]["eval"] = _summary(rep)
        if run_dir is not None:
            emb.save_checkpoint(p, os.path.join(run_dir, "checkpoints", f"round_{r}.bin"))
            rep.save(os.path.join(run_dir, "eval", f"round_{r}.json"),
                     os.path.join(run_dir, "eval", f"round_{r}") if r == cfg.rounds - 1 else None)

    cluster_dir = os.path.join(run_dir, "clusters") if run_dir is not None else None
    params, runlog = adapt_target(cfg, params, bench.target_train, runlog, on_round_end, cluster_dir)
    final = evaluate(cfg, params, bench.target_test)
    result.update(final=_summary(final), rounds=runlog.rounds, stats=runlog.stats,
                  notes=runlog.notes)
    result["report"] = final
    result["params"] = params
    if run_dir is not None:
        _write_logs(run_dir, runlog)
    return result


def _write_logs(run_dir, runlog: RunLog):
    keys = ["stage", "round", "epoch", "ce", "triplet", "gds_h"]
    with open(os.path.join(run_dir, "logs", "epochs.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, restval="")
        w.writeheader()
        w.writerows(runlog.epochs)
    with open(os.path.join(run_dir, "logs", "stats.json"), "w") as fh:
        json.dump(runlog.stats, fh, indent=1)
    with open(os.path.join(run_dir, "logs", "rounds.json"), "w") as fh:
        json.dump({"rounds": runlog.rounds, "notes": runlog.notes}, fh, indent=1, sort_keys=True)


def ablation_sweep(cfg: TrainConfig, parameter: str, values, csv_path=None, seeds=None,
                   run_root=None) -> list:
    """One full pipeline run per (value, seed); all else held fixed."""
    if parameter not in SWEEPABLE:
        raise ValueError(f"cannot sweep {parameter!r}; choose from {SWEEPABLE}")
    seeds = [cfg.seed] if seeds is None else list(seeds)
    rows = []
    for seed in seeds:
        base = replace(cfg, seed=seed)
        bench = make_benchmark(base)
        pretrained = pretrain_source(base, bench.source)
        for value in values:
            run_cfg = replace(base, **{parameter: _coerce(parameter, value)})
            run_dir = None
            if run_root is not None:
                run_dir = os.path.join(run_root, f"{parameter}={value}", f"seed={seed}")
            res = run_experiment(run_cfg, run_dir, bench, pretrained)
            rows.append({"parameter": parameter, "value": value, "seed": seed,
                         **{f"direct_{k}": v for k, v in res["direct"].items()},
                         **res["final"]})
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows


def _coerce(parameter, value):
    if parameter in ("clustering", "loss"):
        return str(value)
    return float(value)
