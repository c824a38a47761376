"""End-to-end gradient analysis: train, score, subsample, retrain, diagnose."""

from __future__ import annotations

import csv
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from gradscore import data as dio
from gradscore.config import ExperimentConfig, dump_config
from gradscore.data import Dataset, SplitSpec
from gradscore.diagnostics import (
    default_ks,
    export_topk_examples,
    heatmap_matrix,
    label_entropy_topk,
    overlap_curve,
    random_overlap_baseline,
    write_bounds_csv,
    write_entropy_csv,
    write_heatmap_csv,
    write_overlap_csv,
)
from gradscore.errors import DomainError, StageError
from gradscore.importance import ScoreTable, batch_bound_pairs, score_dataset
from gradscore.nn import Architecture, Model, init_model, save_model
from gradscore.sampling import SelectionPolicy, Subsample, discard_count, select
from gradscore.training import TrainLog, evaluate, train

log = logging.getLogger(__name__)


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass
class RunResult:
    policy: str
    fraction: float
    seed: int
    k: int
    test_acc: float
    subsample_path: str = ""
    seconds: float = 0.0


@dataclass
class ExperimentReport:
    full_test_acc: float
    runs: list[RunResult] = field(default_factory=list)
    paths: dict[str, str] = field(default_factory=dict)

    def accuracy(self, policy: str, fraction: float, seed: int) -> float:
        for r in self.runs:
            if r.policy == policy and r.fraction == fraction and r.seed == seed:
                return r.test_acc
        raise KeyError((policy, fraction, seed))


# ---------------------------------------------------------------------------
# data and models


def load_splits(cfg: ExperimentConfig) -> Splits:
    """Load the configured data and split off validation (and test if needed)."""
    d = cfg.data
    if d.kind == "synth":
        full, test = dio.synth_with_test(d.synth, d.synth_n_test)
    elif d.kind == "mnist":
        full = dio.load_mnist("train", d.root)
        test = dio.load_mnist("test", d.root)
    elif d.kind == "idx":
        if not (d.train_images and d.train_labels):
            raise DomainError("idx data needs data.train_images and data.train_labels")
        full = dio.load_idx(d.train_images, d.train_labels)
        test = dio.load_idx(d.test_images, d.test_labels, full.class_count) if d.test_images else None
    elif d.kind == "csv":
        if not d.train_csv:
            raise DomainError("csv data needs data.train_csv")
        full = dio.load_csv(d.train_csv)
        test = dio.load_csv(d.test_csv, full.class_count) if d.test_csv else None
    else:
        raise DomainError(f"unknown data.kind {d.kind!r}")
    if d.limit_train is not None:
        full = full.subset(np.arange(min(d.limit_train, len(full))))
    if test is None:
        full, test = dio.split(full, SplitSpec(d.test_fraction, d.split_seed + 1))
        full = Dataset(full.examples, full.labels, full.class_count, full.source_id)
    train_set, val_set = dio.split(full, SplitSpec(d.val_fraction, d.split_seed))
    return Splits(train_set, val_set, test)


def architecture_for(cfg: ExperimentConfig, dataset: Dataset) -> Architecture:
    m = cfg.model
    shape = dataset.example_shape
    if m.arch == "cnn":
        if len(shape) == 2:
            shape = shape + (1,)
        return Architecture("cnn", shape, dataset.class_count, channels=tuple(m.channels),
                            kernel=m.kernel, fc_hidden=m.fc_hidden)
    dim = (int(np.prod(shape)),)
    hidden = tuple(m.hidden) if m.arch == "mlp" else ()
    return Architecture(m.arch, dim, dataset.class_count, hidden=hidden)


def subsample_size(fraction: float, n: int) -> int:
    if not 0 < fraction <= 1:
        raise DomainError("fraction must lie in (0, 1]")
    if fraction * n < 1:
        raise DomainError(f"fraction {fraction} of {n} examples selects fewer than one")
    return max(1, int(round(fraction * n)))


def effective_policy(policy: SelectionPolicy, k: int, n: int, seed: int) -> SelectionPolicy:
    """Seeded copy of ``policy``; non-extreme discards at most ``n - k`` items.

    Without the cap a non-extreme selection near k = n would be impossible.
    """
    policy = replace(policy, seed=seed)
    if policy.kind == "nonextreme" and discard_count(n, policy.discard_fraction) > n - k:
        policy = replace(policy, discard_fraction=(n - k) / n)
    return policy


def run_tag(policy: str, fraction: float, seed: int) -> str:
    return f"{policy}_f{fraction!r}_s{seed}"


# ---------------------------------------------------------------------------
# stages


class _Manifest:
    """Tracks stage timings; rewritten after every stage."""

    def __init__(self, out: Path):
        self.path = out / "manifest.json"
        self.stages: dict[str, dict] = {}
        self.complete = False
        self.info: dict = {}
        self.write()

    def write(self) -> None:
        body = {"complete": self.complete, "stages": self.stages, **self.info}
        self.path.write_text(json.dumps(body, indent=2) + "\n")

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        self.stages[name] = {"status": "running"}
        self.write()
        try:
            yield
        except StageError:
            self.stages[name] = {"status": "failed", "seconds": time.perf_counter() - t0}
            self.write()
            raise
        except Exception as exc:
            self.stages[name] = {"status": "failed", "seconds": time.perf_counter() - t0, "error": str(exc)}
            self.write()
            raise StageError(name, str(exc)) from exc
        self.stages[name] = {"status": "done", "seconds": time.perf_counter() - t0}
        self.write()


def train_full(cfg: ExperimentConfig, splits: Splits) -> tuple[Model, TrainLog, float]:
    """Train from a seeded init on the whole training split; return test accuracy too."""
    arch = architecture_for(cfg, splits.train)
    model = init_model(arch, cfg.train.seed)
    model, tlog = train(model, splits.train, splits.val, cfg.train, probe_norm=cfg.norm)
    return model, tlog, evaluate(model, splits.test)


def run_subsample_analysis(
    scores: ScoreTable,
    policy: SelectionPolicy,
    fraction: float,
    seed: int,
    config: ExperimentConfig,
    splits: Splits | None = None,
) -> tuple[Subsample, float]:
    """Select a subsample, retrain from a fresh init on it, return test accuracy.

    The retrain uses ``config.train`` with the seed replaced by ``seed`` for
    both initialisation and shuffling; the probe set is not tracked.
    """
    splits = splits or load_splits(config)
    if len(scores) != len(splits.train):
        raise DomainError(f"score table has {len(scores)} rows, training split has {len(splits.train)}")
    k = subsample_size(fraction, len(scores))
    sub = select(effective_policy(policy, k, len(scores), seed), scores, k)
    model, acc = retrain(sub, config, splits, seed)
    return sub, acc


def retrain(sub: Subsample, config: ExperimentConfig, splits: Splits, seed: int) -> tuple[Model, float]:
    arch = architecture_for(config, splits.train)
    tcfg = replace(config.train, seed=seed, probe_set_size=0)
    model, _ = train(init_model(arch, seed), splits.train.subset(sub.indices), splits.val, tcfg)
    return model, evaluate(model, splits.test)


def write_report(report: ExperimentReport, out: Path) -> None:
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "fraction", "seed", "test_acc"])
        for r in report.runs:
            w.writerow([r.policy, repr(r.fraction), r.seed, repr(r.test_acc)])
    (out / "summary.txt").write_text(summarize(report))


def summarize(report: ExperimentReport) -> str:
    lines = [f"full-data test accuracy: {100 * report.full_test_acc:.2f}%", ""]
    fractions = sorted({r.fraction for r in report.runs})
    policies = list(dict.fromkeys(r.policy for r in report.runs))
    if fractions:
        lines.append("fraction   " + "".join(f"{p:>16}" for p in policies))
        for f in fractions:
            cells = []
            for p in policies:
                accs = [r.test_acc for r in report.runs if r.policy == p and r.fraction == f]
                cells.append(f"{100 * np.mean(accs):15.2f}%" if accs else f"{'-':>16}")
            k = next(r.k for r in report.runs if r.fraction == f)
            lines.append(f"{f:<8g} " + "".join(cells) + f"   (k={k})")
        lines.append("")
        lines.append("mean top-1 test accuracy over repeat seeds")
    return "\n".join(lines) + "\n"


def emit_diagnostics(
    cfg: ExperimentConfig, model: Model, tlog: TrainLog, scores: ScoreTable, splits: Splits, out: Path
) -> dict[str, str]:
    n = len(scores)
    ks = list(cfg.diag.ks) or default_ks(n)
    paths = {}
    write_entropy_csv(label_entropy_topk(scores, ks), out / "entropy.csv")
    paths["entropy"] = str(out / "entropy.csv")

    curves = [random_overlap_baseline(n, ks, seed=cfg.train.seed, trials=cfg.diag.overlap_trials)]
    if cfg.diag.overlap_with:
        other = ScoreTable.load(cfg.diag.overlap_with)
        curves.insert(0, overlap_curve(scores, other, ks, pair=(scores.model_id, other.model_id or "other")))
    write_overlap_csv(curves, out / "overlap.csv")
    paths["overlap"] = str(out / "overlap.csv")

    if tlog.probe_gradients.size:
        write_heatmap_csv(heatmap_matrix(tlog), out / "heatmap.csv")
        paths["heatmap"] = str(out / "heatmap.csv")

    if cfg.diag.bound_batches > 0:
        bs = min(cfg.diag.bound_batch_size or cfg.train.batch_size, n)
        pairs = batch_bound_pairs(model, splits.train, bs, cfg.diag.bound_batches, seed=cfg.train.seed)
        write_bounds_csv(pairs, out / "bounds.csv")
        paths["bounds"] = str(out / "bounds.csv")

    groups = export_topk_examples(scores, cfg.diag.percentiles, min(cfg.diag.export_count, n))
    with open(out / "percentiles.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["percentile", "index", "label", "score"])
        for p, idx in groups.items():
            for i in idx:
                w.writerow([repr(float(p)), int(i), int(scores.labels[i]), repr(float(scores.scores[i]))])
    paths["percentiles"] = str(out / "percentiles.csv")
    return paths


def run_analysis(cfg: ExperimentConfig) -> ExperimentReport:
    """Run the whole pipeline and write every artifact under ``cfg.output_dir``.

    Layout::

        config.txt  manifest.json  model.npz  train_log.csv  probe.csv
        scores.csv  scores.csv.meta.json  subsamples/*.idx
        report.csv  summary.txt  entropy.csv  overlap.csv  heatmap.csv
        bounds.csv  percentiles.csv
    """
    out = Path(cfg.output_dir)
    (out / "subsamples").mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    manifest = _Manifest(out)

    with manifest.stage("load"):
        splits = load_splits(cfg)
        log.info("train %d / val %d / test %d", len(splits.train), len(splits.val), len(splits.test))

    with manifest.stage("train"):
        model, tlog, full_acc = train_full(cfg, splits)
        save_model(model, out / "model.npz")
        tlog.save(out / "train_log.csv", out / "probe.csv")
        manifest.info["full_test_acc"] = full_acc
        log.info("full-data test accuracy %.4f (best epoch %d)", full_acc, tlog.best_epoch)

    with manifest.stage("score"):
        model_id = f"{cfg.model.arch}-seed{cfg.train.seed}"
        scores = score_dataset(model, splits.train, cfg.norm, model_id=model_id)
        scores.seed = cfg.train.seed
        scores.save(out / "scores.csv")

    report = ExperimentReport(full_acc, paths={"scores": str(out / "scores.csv"), "model": str(out / "model.npz")})
    for policy in cfg.policies:
        for fraction in cfg.fractions:
            for seed in cfg.seeds:
                tag = run_tag(policy.kind, fraction, seed)
                with manifest.stage(f"retrain:{tag}"):
                    t0 = time.perf_counter()
                    k = subsample_size(fraction, len(splits.train))
                    sub = select(effective_policy(policy, k, len(scores), seed), scores, k)
                    sub_path = out / "subsamples" / f"{tag}.idx"
                    sub.save(sub_path)
                    _, acc = retrain(sub, cfg, splits, seed)
                    report.runs.append(
                        RunResult(policy.kind, fraction, seed, k, acc, str(sub_path), time.perf_counter() - t0)
                    )
                    log.info("%s k=%d test accuracy %.4f", tag, k, acc)
                write_report(report, out)

    with manifest.stage("diagnose"):
        report.paths.update(emit_diagnostics(cfg, model, tlog, scores, splits, out))

    write_report(report, out)
    manifest.complete = True
    manifest.write()
    return report
