"""Command-line entry point: ``gradscore <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from gradscore import data as dio
from gradscore.config import ExperimentConfig, dump_config, load_config
from gradscore.diagnostics import (
    default_ks,
    heatmap_matrix,
    label_entropy_topk,
    overlap_curve,
    random_overlap_baseline,
    write_bounds_csv,
    write_entropy_csv,
    write_heatmap_csv,
    write_overlap_csv,
)
from gradscore.errors import StageError
from gradscore.harness import (
    load_splits,
    retrain,
    run_analysis,
    subsample_size,
    train_full,
)
from gradscore.importance import ScoreTable, batch_bound_pairs, score_dataset
from gradscore.nn import load_model, save_model
from gradscore.sampling import POLICY_KINDS, SelectionPolicy, Subsample, select
from gradscore.training import TrainLog


def _config(args) -> ExperimentConfig:
    overrides = dict(kv.split("=", 1) for kv in args.set)
    if args.seed is not None:
        overrides.setdefault("train.seed", str(args.seed))
    if args.data_dir is not None:
        os.environ["DATA_DIR"] = args.data_dir
        overrides.setdefault("data.root", args.data_dir)
    if args.out is not None:
        overrides.setdefault("out", args.out)
    return load_config(args.config, overrides)


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> None:
    spec = dio.SynthSpec(args.kind, args.classes, args.dim, args.n, args.seed or 0, args.spread, args.modes)
    if args.n_test:
        train_set, test_set = dio.synth_with_test(spec, args.n_test)
    else:
        train_set, test_set = dio.synth(spec), None
    out = Path(args.out or "synth")
    out.mkdir(parents=True, exist_ok=True)
    dio.write_csv(train_set, out / "train.csv")
    if test_set is not None:
        dio.write_csv(test_set, out / "test.csv")
    print(f"wrote {len(train_set)} training examples to {out / 'train.csv'}")


def cmd_train(args) -> None:
    cfg = _config(args)
    out = _out(cfg)
    splits = load_splits(cfg)
    model, tlog, acc = train_full(cfg, splits)
    save_model(model, out / "model.npz")
    tlog.save(out / "train_log.csv", out / "probe.csv")
    (out / "config.txt").write_text(dump_config(cfg))
    print(f"best epoch {tlog.best_epoch}; test accuracy {acc:.4f}")


def cmd_score(args) -> None:
    cfg = _config(args)
    out = _out(cfg)
    model = load_model(args.model or out / "model.npz")
    splits = load_splits(cfg)
    table = score_dataset(model, splits.train, cfg.norm, model_id=args.model_id or Path(args.model or "model").stem)
    table.seed = cfg.train.seed
    path = Path(args.scores or out / "scores.csv")
    table.save(path)
    print(f"scored {len(table)} examples -> {path}")


def cmd_subsample(args) -> None:
    table = ScoreTable.load(args.scores)
    if (args.k is None) == (args.fraction is None):
        raise SystemExit("give exactly one of --k or --fraction")
    k = args.k if args.k is not None else subsample_size(args.fraction, len(table))
    policy = SelectionPolicy(args.policy, args.discard_fraction, args.seed or 0)
    sub = select(policy, table, k)
    sub.save(args.output)
    print(f"selected {k} of {len(table)} with {args.policy} -> {args.output}")


def cmd_retrain(args) -> None:
    cfg = _config(args)
    sub = Subsample.load(args.subsample)
    splits = load_splits(cfg)
    seed = cfg.train.seed if args.seed is None else args.seed
    _, acc = retrain(sub, cfg, splits, seed)
    print(f"test accuracy {acc:.4f} (k={sub.k}, policy={sub.policy.kind}, seed={seed})")


def cmd_diagnose(args) -> None:
    cfg = _config(args)
    out = _out(cfg)
    table = ScoreTable.load(args.scores)
    ks = list(cfg.diag.ks) or default_ks(len(table))
    write_entropy_csv(label_entropy_topk(table, ks), out / "entropy.csv")
    curves = [random_overlap_baseline(len(table), ks, cfg.train.seed, cfg.diag.overlap_trials)]
    if args.overlap_with:
        other = ScoreTable.load(args.overlap_with)
        curves.insert(0, overlap_curve(table, other, ks, (table.model_id or "a", other.model_id or "b")))
    write_overlap_csv(curves, out / "overlap.csv")
    if args.log_dir:
        d = Path(args.log_dir)
        tlog = TrainLog.load(d / "train_log.csv", d / "probe.csv")
        write_heatmap_csv(heatmap_matrix(tlog), out / "heatmap.csv")
    if args.model:
        model = load_model(args.model)
        splits = load_splits(cfg)
        bs = cfg.diag.bound_batch_size or cfg.train.batch_size
        pairs = batch_bound_pairs(model, splits.train, bs, cfg.diag.bound_batches, cfg.train.seed)
        write_bounds_csv(pairs, out / "bounds.csv")
        lhs = np.array([p.lhs for p in pairs])
        rhs = np.array([p.rhs for p in pairs])
        print(f"bounds: {len(pairs)} batches, corr(lhs, rhs) = {np.corrcoef(lhs, rhs)[0, 1]:.3f}")
    print(f"diagnostics written to {out}")


def cmd_analyze(args) -> None:
    cfg = _config(args)
    report = run_analysis(cfg)
    print((Path(cfg.output_dir) / "summary.txt").read_text(), end="")
    print(f"{len(report.runs)} retraining runs; artifacts in {cfg.output_dir}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data-dir", help="dataset root (default: $DATA_DIR)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gradscore", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset as CSV")
    p.add_argument("--kind", choices=dio.SYNTH_KINDS, default="redundant")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--spread", type=float)
    p.add_argument("--modes", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train on the full training split")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", parents=[common], help="write the per-example score table")
    p.add_argument("--model", help="model .npz (default: <out>/model.npz)")
    p.add_argument("--model-id")
    p.add_argument("--scores", help="output CSV (default: <out>/scores.csv)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("subsample", parents=[common], help="select a subsample from a score table")
    p.add_argument("--scores", required=True)
    p.add_argument("--policy", choices=POLICY_KINDS, required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--discard-fraction", type=float, default=0.05)
    p.add_argument("--output", required=True, help="index file to write")
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("retrain", parents=[common], help="retrain from scratch on a subsample")
    p.add_argument("--subsample", required=True)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("diagnose", parents=[common], help="entropy/overlap/heatmap/bounds CSVs")
    p.add_argument("--scores", required=True)
    p.add_argument("--overlap-with", help="second score table for the overlap curve")
    p.add_argument("--log-dir", help="directory with train_log.csv and probe.csv")
    p.add_argument("--model", help="trained model for the bound scatter")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("analyze", parents=[common], help="full train/score/subsample/retrain/diagnose run")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, ArithmeticError, KeyError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
