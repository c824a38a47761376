"""Subsample selection policies over a score table."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gradscore.errors import DomainError
from gradscore.importance import ScoreTable

POLICY_KINDS = ("random", "max_gradient", "nonextreme", "gradient_cdf")


@dataclass(frozen=True)
class SelectionPolicy:
    kind: str
    discard_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise DomainError(f"policy must be one of {POLICY_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.discard_fraction < 1.0:
            raise DomainError("discard_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class Subsample:
    indices: np.ndarray
    k: int
    policy: SelectionPolicy

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if len(idx) != self.k or np.any(np.diff(idx) <= 0):
            raise DomainError("indices must be k strictly increasing values")
        object.__setattr__(self, "indices", idx)

    def save(self, path) -> None:
        p = self.policy
        header = f"# policy={p.kind} k={self.k} seed={p.seed} discard_fraction={p.discard_fraction!r}\n"
        Path(path).write_text(header + "".join(f"{i}\n" for i in self.indices))

    @classmethod
    def load(cls, path) -> "Subsample":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("#"):
            raise DomainError(f"{path}: missing metadata header")
        meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        policy = SelectionPolicy(meta["policy"], float(meta["discard_fraction"]), int(meta["seed"]))
        idx = np.array([int(s) for s in lines[1:] if s.strip()], dtype=np.int64)
        return cls(idx, int(meta["k"]), policy)


def _check_k(k: int, n: int) -> None:
    if not 0 <= k <= n:
        raise DomainError(f"k={k} outside [0, {n}]")


def descending_order(scores) -> np.ndarray:
    """Indices by score, largest first; equal scores keep index order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def select_random(n: int, k: int, seed: int) -> Subsample:
    _check_k(k, n)
    idx = np.random.default_rng(seed).choice(n, size=k, replace=False)
    return Subsample(np.sort(idx), k, SelectionPolicy("random", seed=seed))


def select_max_gradient(scores: ScoreTable, k: int) -> Subsample:
    _check_k(k, len(scores))
    return Subsample(np.sort(descending_order(scores.scores)[:k]), k, SelectionPolicy("max_gradient"))


def discard_count(n: int, discard_fraction: float) -> int:
    # the epsilon keeps e.g. 0.05 * 20 from rounding up to 2
    return math.ceil(discard_fraction * n - 1e-9)


def select_nonextreme(scores: ScoreTable, k: int, discard_fraction: float = 0.05) -> Subsample:
    n = len(scores)
    drop = discard_count(n, discard_fraction)
    if not 0 <= k <= n - drop:
        raise DomainError(f"k={k} exceeds the {n - drop} examples left after discarding {drop}")
    order = descending_order(scores.scores)
    policy = SelectionPolicy("nonextreme", discard_fraction=discard_fraction)
    return Subsample(np.sort(order[drop:drop + k]), k, policy)


class _FenwickTree:
    """Prefix sums over non-negative weights with point updates."""

    def __init__(self, weights: np.ndarray):
        n = len(weights)
        tree = np.zeros(n + 1)
        tree[1:] = weights
        for i in range(1, n + 1):
            j = i + (i & -i)
            if j <= n:
                tree[j] += tree[i]
        self.tree = tree.tolist()
        self.n = n
        self.top = 1 << (n.bit_length() - 1) if n else 0

    def add(self, i: int, delta: float) -> None:
        i += 1
        tree, n = self.tree, self.n
        while i <= n:
            tree[i] += delta
            i += i & -i

    def find(self, target: float) -> int:
        """Smallest i with prefix_sum(0..i) > target."""
        pos, step, tree = 0, self.top, self.tree
        while step:
            nxt = pos + step
            if nxt <= self.n and tree[nxt] <= target:
                pos = nxt
                target -= tree[nxt]
            step >>= 1
        return min(pos, self.n - 1)


def _nearest_positive(weights: list[float], i: int) -> int:
    for j in range(i, -1, -1):
        if weights[j] > 0:
            return j
    return next(j for j in range(i, len(weights)) if weights[j] > 0)


def select_gradient_cdf(scores: ScoreTable, k: int, seed: int) -> Subsample:
    """Weighted sampling without replacement, one draw at a time.

    Each draw picks item i with probability g_i / (sum of remaining g). Once
    the remaining mass is zero the rest are drawn uniformly from what is left.
    """
    g = np.asarray(scores.scores, dtype=np.float64)
    n = len(g)
    _check_k(k, n)
    rng = np.random.default_rng(seed)
    weights = g.tolist()
    positive = int(np.count_nonzero(g > 0))
    tree = _FenwickTree(g)
    chosen = []
    remaining = float(g.sum())
    while len(chosen) < k and positive > 0:
        i = tree.find(rng.random() * remaining)
        if weights[i] <= 0:
            # rounding pushed the target onto a spent item; take the nearest live one
            i = _nearest_positive(weights, i)
        chosen.append(i)
        tree.add(i, -weights[i])
        remaining -= weights[i]
        weights[i] = 0.0
        positive -= 1
        if positive and remaining <= 0:
            remaining = math.fsum(weights)
    if len(chosen) < k:
        taken = set(chosen)
        rest = np.array([j for j in range(n) if j not in taken], dtype=np.int64)
        chosen.extend(rng.choice(rest, size=k - len(chosen), replace=False).tolist())
    return Subsample(np.sort(np.array(chosen, dtype=np.int64)), k, SelectionPolicy("gradient_cdf", seed=seed))


def select(policy: SelectionPolicy, scores: ScoreTable, k: int) -> Subsample:
    """Dispatch on ``policy.kind``."""
    if policy.kind == "random":
        return select_random(len(scores), k, policy.seed)
    if policy.kind == "max_gradient":
        return select_max_gradient(scores, k)
    if policy.kind == "nonextreme":
        return select_nonextreme(scores, k, policy.discard_fraction)
    return select_gradient_cdf(scores, k, policy.seed)
