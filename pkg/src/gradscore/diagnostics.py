"""Analysis artifacts computed from score tables and training logs.

Everything here is a pure function of its inputs, so the CSVs can be
regenerated from persisted score tables and logs at any time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gradscore.errors import DomainError
from gradscore.importance import BoundPair, ScoreTable
from gradscore.sampling import descending_order
from gradscore.training import TrainLog

LOG_FLOOR = 1e-12


@dataclass
class EntropyCurve:
    ks: list[int]
    entropy_bits: list[float]
    baseline_bits: float


@dataclass
class OverlapCurve:
    ks: list[int]
    overlap: list[float]
    pair: tuple[str, str]


@dataclass
class HeatmapMatrix:
    probe_indices: np.ndarray
    values: np.ndarray  # rows: probe examples, cols: epochs


def _check_ks(ks: Sequence[int], n: int) -> list[int]:
    ks = [int(k) for k in ks]
    bad = [k for k in ks if not 0 < k <= n]
    if bad:
        raise DomainError(f"k values {bad} outside (0, {n}]")
    return ks


def entropy_bits(labels, class_count: int) -> float:
    """Shannon entropy (bits) of the empirical label distribution."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=class_count)
    p = counts[counts > 0] / counts.sum()
    return float(max(0.0, -(p * np.log2(p)).sum()))


def label_entropy_topk(scores: ScoreTable, ks: Sequence[int]) -> EntropyCurve:
    ks = _check_ks(ks, len(scores))
    order = descending_order(scores.scores)
    c = scores.class_count
    values = [entropy_bits(scores.labels[order[:k]], c) for k in ks]
    return EntropyCurve(ks, values, math.log2(c))


def _topk_sets(scores: ScoreTable, ks: list[int]) -> list[np.ndarray]:
    order = descending_order(scores.scores)
    return [order[:k] for k in ks]


def overlap_curve(a: ScoreTable, b: ScoreTable, ks: Sequence[int], pair=("a", "b")) -> OverlapCurve:
    """|top-k(a) & top-k(b)| / k for each k."""
    if len(a) != len(b):
        raise DomainError(f"score tables differ in length ({len(a)} vs {len(b)})")
    ks = _check_ks(ks, len(a))
    sa, sb = _topk_sets(a, ks), _topk_sets(b, ks)
    values = [len(np.intersect1d(x, y, assume_unique=True)) / k for x, y, k in zip(sa, sb, ks)]
    return OverlapCurve(ks, values, tuple(pair))


def random_overlap_baseline(n: int, ks: Sequence[int], seed: int, trials: int = 100) -> OverlapCurve:
    """Mean overlap of two independent uniform size-k subsets of range(n)."""
    ks = _check_ks(ks, n)
    if trials < 1:
        raise DomainError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    sums = np.zeros(len(ks))
    for _ in range(trials):
        for j, k in enumerate(ks):
            x = rng.choice(n, size=k, replace=False)
            y = rng.choice(n, size=k, replace=False)
            sums[j] += len(np.intersect1d(x, y, assume_unique=True)) / k
    return OverlapCurve(ks, (sums / trials).tolist(), ("rand1", "rand2"))


def heatmap_matrix(log: TrainLog) -> HeatmapMatrix:
    """Negative natural log of probe gradient norms, floored at 1e-12."""
    g = np.asarray(log.probe_gradients, dtype=np.float64)
    if g.size == 0:
        raise DomainError("training log has no probe gradients")
    return HeatmapMatrix(np.asarray(log.probe_indices), 0.0 - np.log(np.maximum(g, LOG_FLOOR)))


def export_topk_examples(scores: ScoreTable, percentiles: Sequence[float], count: int) -> dict[float, np.ndarray]:
    """Example indices around each score percentile.

    For percentile p the block of ``count`` descending-rank positions is
    centred on rank ``round((1 - p/100) * N)`` (0-based, clamped so the block
    fits), i.e. p=100 is the top and p=0 the bottom of the ranking.
    """
    n = len(scores)
    if not 1 <= count <= n:
        raise DomainError(f"count must lie in [1, {n}]")
    order = descending_order(scores.scores)
    out = {}
    for p in percentiles:
        if not 0.0 <= p <= 100.0:
            raise DomainError(f"percentile {p} outside [0, 100]")
        centre = int(round((1.0 - p / 100.0) * n))
        start = min(max(centre - count // 2, 0), n - count)
        out[p] = order[start:start + count]
    return out


# ---------------------------------------------------------------------------
# CSV emitters


def _writer(path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def write_entropy_csv(curve: EntropyCurve, path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["k", "entropy_bits", "baseline_bits"])
        for k, e in zip(curve.ks, curve.entropy_bits):
            w.writerow([k, repr(float(e)), repr(float(curve.baseline_bits))])


def write_overlap_csv(curves: Sequence[OverlapCurve], path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["k", "overlap", "pair"])
        for curve in curves:
            label = "&".join(curve.pair)
            for k, v in zip(curve.ks, curve.overlap):
                w.writerow([k, repr(float(v)), label])


def write_heatmap_csv(hm: HeatmapMatrix, path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["probe_index", "epoch", "neg_log_mag"])
        for idx, row in zip(hm.probe_indices, hm.values):
            for e, v in enumerate(row):
                w.writerow([int(idx), e, repr(float(v))])


def write_bounds_csv(pairs: Sequence[BoundPair], path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["batch_id", "lhs", "rhs"])
        for i, p in enumerate(pairs):
            w.writerow([i, repr(float(p.lhs)), repr(float(p.rhs))])


def default_ks(n: int, points: int = 20) -> list[int]:
    """Log-spaced k values from 1 to n inclusive."""
    ks = np.unique(np.round(np.logspace(0, np.log10(n), points)).astype(int))
    return [int(k) for k in ks if 0 < k <= n]
