"""Command-line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 runtime or training
failure. Relative run directories are resolved against ``$GDSLAB_RUN_ROOT``
when it is set.
"""
from __future__ import annotations

import argparse
from dataclasses import fields
import glob
import json
import logging
import os
import sys

from . import embedder as emb
from . import gradcheck
from .clustering import NoUsableClustersError
from .data import LabeledDataset, load_csv, save_csv
from .evaluation import evaluate_embeddings
from .pipeline import (
    SWEEPABLE,
    Benchmark,
    TrainConfig,
    TrainingError,
    ablation_sweep,
    make_benchmark,
    run_experiment,
)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
RUN_ROOT_ENV = "GDSLAB_RUN_ROOT"

log = logging.getLogger("gdslab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag name -> TrainConfig field
_TRAIN_FLAGS = {
    "seed": "seed",
    "loss": "loss",
    "rounds": "rounds",
    "epochs": "epochs_per_round",
    "pretrain_epochs": "pretrain_epochs",
    "beta": "beta",
    "kappa": "kappa",
    "lambda_h": "lambda_h",
    "lambda_sigma": "lambda_sigma",
    "clustering": "clustering",
}


def _field_types():
    return {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name, text):
    kind = _field_types().get(name)
    if kind is None:
        raise ValueError(f"unknown config key {name!r}")
    if kind == "bool":
        if text.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"{name} expects true/false, got {text!r}")
        return text.lower() in ("true", "1")
    return {"int": int, "float": float, "str": str}[kind](text)


def resolve_config(args) -> TrainConfig:
    """Defaults, then the JSON file, then command-line flags."""
    values = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            values.update(json.load(fh))
    for flag, name in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    for item in getattr(args, "set", None) or []:
        key, sep, text = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = _coerce(key.strip(), text)
    return TrainConfig.from_dict(values)


def resolve_run_dir(path):
    if path is None:
        return None
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not os.path.isabs(path):
        path = os.path.join(root, path)
    return path


def _writable_dir(path):
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise ValueError(f"run directory {path} is not writable")
    return path


def _load_benchmark(cfg, data_path):
    if data_path is None:
        return make_benchmark(cfg)
    parts = load_csv(data_path)
    missing = {"source", "target_train", "target_test"} - set(parts)
    if missing:
        raise ValueError(f"{data_path} lacks domains {sorted(missing)}")
    return Benchmark(parts["source"], parts["target_train"], parts["target_test"])


def _tagged(ds: LabeledDataset, tag):
    return LabeledDataset(ds.features, ds.labels, tag, ds.identity_count, ds.rng_seed)


# commands ------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.seed, args.instances, args.inject_sign_error)
    ok = True
    for suite in gradcheck.SUITES:
        rows = [r for r in results if r.suite == suite]
        worst = max(rows, key=lambda r: r.max_rel_error)
        status = "ok" if worst.passed else "FAIL"
        print(f"{suite:20s} max_rel_error={worst.max_rel_error:.3e} {status}")
        if not worst.passed:
            ok = False
            print(f"  worst: instance {worst.instance}, tensor {worst.worst_tensor}, "
                  f"index {worst.worst_index}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    bench = make_benchmark(cfg)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_csv(args.out, _tagged(bench.source, "source"), _tagged(bench.target_train, "target_train"),
             _tagged(bench.target_test, "target_test"))
    print(f"wrote {args.out}: source {len(bench.source)}, target train {len(bench.target_train)}, "
          f"target test {len(bench.target_test)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    run_dir = _writable_dir(resolve_run_dir(args.run_dir))
    bench = _load_benchmark(cfg, args.data)
    res = run_experiment(cfg, run_dir, bench)
    summary = {"direct": res["direct"], "final": res["final"]}
    with open(os.path.join(run_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _run_config(run_dir):
    path = os.path.join(run_dir, "config.json")
    if not os.path.exists(path):
        raise ValueError(f"{run_dir} has no config.json")
    with open(path) as fh:
        return TrainConfig.from_dict(json.load(fh))


def _latest_checkpoint(run_dir):
    rounds = glob.glob(os.path.join(run_dir, "checkpoints", "round_*.bin"))
    if rounds:
        return max(rounds, key=lambda p: int(os.path.basename(p)[6:-4]))
    pre = os.path.join(run_dir, "checkpoints", "pretrain.bin")
    if os.path.exists(pre):
        return pre
    raise ValueError(f"no checkpoints under {run_dir}")


def _eval_from_run(args):
    run_dir = resolve_run_dir(args.run_dir)
    cfg = _run_config(run_dir)
    ckpt = args.checkpoint or _latest_checkpoint(run_dir)
    params = emb.load_checkpoint(ckpt)
    test = _load_benchmark(cfg, args.data).target_test
    feats = emb.embed(params, test.features)
    neg_sample = "match" if args.match_negatives else None
    report = evaluate_embeddings(feats, test.labels, cfg.hist_bins, neg_sample, seed=cfg.seed)
    return run_dir, ckpt, test, feats, report


def cmd_eval(args) -> int:
    run_dir, ckpt, _, _, report = _eval_from_run(args)
    out = args.out or os.path.join(run_dir, "eval", "eval.json")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    report.save(out)
    sep = report.separation
    print(json.dumps({"checkpoint": os.path.basename(ckpt), "map": report.map,
                      "rank1": report.rank1, "auc": report.auc,
                      "gap_in_sigmas": sep.gap_in_sigmas,
                      "overlap": sep.empirical_overlap}, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    _, _, test, feats, report = _eval_from_run(args)
    out_dir = _writable_dir(args.out_dir)
    report.save(os.path.join(out_dir, "report.json"), os.path.join(out_dir, "target_test"))
    save_csv(os.path.join(out_dir, "embeddings.csv"),
             LabeledDataset(feats, test.labels, "target_test", test.identity_count))
    print(f"exported to {out_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.param not in SWEEPABLE:
        raise UsageError(f"unknown parameter {args.param!r}; choose from {', '.join(SWEEPABLE)}")
    cfg = resolve_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    run_root = resolve_run_dir(args.run_dir)
    if run_root is not None:
        _writable_dir(run_root)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    rows = ablation_sweep(cfg, args.param, values, args.out, seeds, run_root)
    for row in rows:
        print(f"{args.param}={row['value']} seed={row['seed']} map={row['map']:.4f} "
              f"rank1={row['rank1']:.4f}")
    return EXIT_OK


# parser --------------------------------------------------------------------

def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file (flags override its values)")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field, repeatable")


def _add_train_flags(p):
    p.add_argument("--loss", choices=["triplet", "gds", "gds-h"])
    p.add_argument("--rounds", type=int)
    p.add_argument("--epochs", type=int, help="epochs per round")
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--lambda-h", type=float)
    p.add_argument("--lambda-sigma", type=float)
    p.add_argument("--clustering", choices=["dbscan", "kmeans"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gdslab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--inject-sign-error", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write the synthetic benchmark to CSV")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pretrain on source, then adapt to target")
    _add_config_flags(p)
    _add_train_flags(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", help="CSV from gen-data instead of regenerating")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint on target test"),
                                 ("export", cmd_export, "export curves, histograms and embeddings")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--run-dir", required=True)
        p.add_argument("--checkpoint", help="default: latest round checkpoint")
        p.add_argument("--data")
        p.add_argument("--match-negatives", action="store_true",
                       help="subsample negatives to the positive count for histograms")
        if name == "eval":
            p.add_argument("--out")
        else:
            p.add_argument("--out-dir", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="sweep one parameter with shared seeds")
    _add_config_flags(p)
    _add_train_flags(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated")
    p.add_argument("--seeds", help="comma-separated, default: the config seed")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--run-dir", help="optional root for per-run directories")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, NoUsableClustersError, FloatingPointError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
