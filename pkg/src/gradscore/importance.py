"""Per-example importance scores: norms of single-example loss gradients."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gradscore.data import Dataset
from gradscore.errors import DomainError
from gradscore.nn import GradientVector, Model, per_example_gradients

NORMS = ("l1", "l2", "linf")
SUBSETS = ("all", "biases", "weights", "last")


@dataclass(frozen=True)
class NormConfig:
    """Which norm to take, over which parameters.

    Subsets: ``all``; ``biases`` (A); ``weights`` (B); ``last`` (C), the
    weight segment of the highest layer only, biases excluded.
    """

    norm: str = "l2"
    subset: str = "last"

    def __post_init__(self):
        if self.norm not in NORMS:
            raise DomainError(f"norm must be one of {NORMS}")
        if self.subset not in SUBSETS:
            raise DomainError(f"subset must be one of {SUBSETS}")


def selected_segments(tags: dict[str, tuple[int, str]], subset: str) -> list[str]:
    if subset == "all":
        names = list(tags)
    elif subset == "biases":
        names = [n for n, (_, role) in tags.items() if role == "bias"]
    elif subset == "weights":
        names = [n for n, (_, role) in tags.items() if role == "weight"]
    else:
        weights = {n: li for n, (li, role) in tags.items() if role == "weight"}
        top = max(weights.values(), default=None)
        names = [n for n, li in weights.items() if li == top]
    if not names:
        raise DomainError(f"parameter subset {subset!r} selects no coordinates")
    return names


def _norm_rows(blocks: list[np.ndarray], norm: str) -> np.ndarray:
    """Norm across all non-leading axes of several (B, ...) blocks."""
    flat = [b.reshape(b.shape[0], -1) for b in blocks]
    if norm == "l1":
        return sum(np.abs(f).sum(axis=1) for f in flat)
    if norm == "linf":
        return np.max([np.abs(f).max(axis=1) for f in flat], axis=0)
    # scale rows by their largest entry so tiny gradients do not underflow
    scale = np.max([np.abs(f).max(axis=1) for f in flat], axis=0)
    safe = np.where(scale > 0, scale, 1.0)[:, None]
    return scale * np.sqrt(sum(np.einsum("ij,ij->i", f / safe, f / safe) for f in flat))


def gradient_norm(grad: GradientVector, cfg: NormConfig = NormConfig()) -> float:
    names = selected_segments(grad.tags, cfg.subset)
    blocks = [np.asarray(grad.values[n])[None] for n in names]
    if sum(b.size for b in blocks) == 0:
        raise DomainError(f"parameter subset {cfg.subset!r} selects no coordinates")
    return float(_norm_rows(blocks, cfg.norm)[0])


def batch_scores(model: Model, x: np.ndarray, y, cfg: NormConfig) -> np.ndarray:
    """Importance score of every row of ``x``."""
    tags = {s.name: (s.layer_index, s.role) for s in model.segments}
    names = selected_segments(tags, cfg.subset)
    grads = per_example_gradients(model, x, y, only=names)
    return _norm_rows([grads[n] for n in names], cfg.norm)


@dataclass
class ScoreTable:
    scores: np.ndarray
    labels: np.ndarray
    norm_config: NormConfig
    model_id: str = ""
    class_count: int | None = None
    seed: int | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape:
            raise DomainError("scores and labels must have equal length")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise DomainError("scores must be finite and non-negative")
        if self.class_count is None:
            self.class_count = int(self.labels.max()) + 1 if self.labels.size else 0

    def __len__(self) -> int:
        return len(self.scores)

    def save(self, path) -> None:
        """CSV (index, label, score) plus a ``.meta.json`` sidecar."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "label", "score"])
            for i, (y, s) in enumerate(zip(self.labels, self.scores)):
                w.writerow([i, int(y), repr(float(s))])
        meta = {
            "norm": self.norm_config.norm,
            "subset": self.norm_config.subset,
            "model_id": self.model_id,
            "seed": self.seed,
            "class_count": self.class_count,
        }
        meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ScoreTable":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["index", "label", "score"]:
                raise DomainError(f"{path}: unexpected header {header}")
            rows = [r for r in reader if r]
        idx = [int(r[0]) for r in rows]
        if idx != list(range(len(rows))):
            raise DomainError(f"{path}: rows must be indexed 0..N-1 in order")
        meta = {}
        if meta_path(path).exists():
            meta = json.loads(meta_path(path).read_text())
        return cls(
            scores=np.array([float(r[2]) for r in rows]),
            labels=np.array([int(r[1]) for r in rows], dtype=np.int64),
            norm_config=NormConfig(meta.get("norm", "l2"), meta.get("subset", "last")),
            model_id=meta.get("model_id", ""),
            class_count=meta.get("class_count"),
            seed=meta.get("seed"),
        )


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def score_dataset(
    model: Model,
    train_set: Dataset,
    cfg: NormConfig = NormConfig(),
    model_id: str = "",
    chunk: int = 256,
) -> ScoreTable:
    """Score every example at the given (trained) parameters, in index order."""
    out = np.empty(len(train_set))
    for start in range(0, len(train_set), chunk):
        stop = min(start + chunk, len(train_set))
        out[start:stop] = batch_scores(model, train_set.examples[start:stop], train_set.labels[start:stop], cfg)
    return ScoreTable(out, train_set.labels.copy(), cfg, model_id, class_count=train_set.class_count)


@dataclass(frozen=True)
class BoundPair:
    lhs: float
    rhs: float
    batch_size: int


def batch_bound_pairs(
    model: Model,
    train_set: Dataset,
    batch_size: int,
    n_batches: int,
    seed: int,
    cfg: NormConfig = NormConfig(subset="all"),
) -> list[BoundPair]:
    """For random batches: norm of the summed gradient vs. sum of the norms.

    Batches are drawn without replacement within a batch, independently
    across batches, from ``default_rng(seed)``.
    """
    if n_batches <= 0:
        raise DomainError("n_batches must be positive")
    if not 1 <= batch_size <= len(train_set):
        raise DomainError("batch_size must lie in [1, N]")
    rng = np.random.default_rng(seed)
    tags = {s.name: (s.layer_index, s.role) for s in model.segments}
    names = selected_segments(tags, cfg.subset)
    pairs = []
    for _ in range(n_batches):
        pos = rng.choice(len(train_set), size=batch_size, replace=False)
        pairs.append(_bound_pair(model, train_set.examples[pos], train_set.labels[pos], names, cfg.norm))
    return pairs


def _bound_pair(model, x, y, names, norm) -> BoundPair:
    grads = per_example_gradients(model, x, y, only=names)
    blocks = [grads[n] for n in names]
    rhs = float(_norm_rows(blocks, norm).sum())
    lhs = float(_norm_rows([b.sum(axis=0)[None] for b in blocks], norm)[0])
    return BoundPair(lhs, rhs, len(y))


def bound_pair_for_batch(model: Model, x, y, cfg: NormConfig = NormConfig(subset="all")) -> BoundPair:
    tags = {s.name: (s.layer_index, s.role) for s in model.segments}
    return _bound_pair(model, np.asarray(x), y, selected_segments(tags, cfg.subset), cfg.norm)
