"""Datasets: IDX and CSV ingestion, seeded splits, synthetic generators."""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from gradscore.errors import DomainError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    """Base class for malformed IDX input."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled examples. ``indices`` are positions in the parent dataset."""

    examples: np.ndarray
    labels: np.ndarray
    class_count: int
    source_id: str = ""
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if len(self.examples) != len(labels):
            raise DomainError(f"{len(self.examples)} examples but {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DomainError(f"labels must lie in [0, {self.class_count})")
        if self.indices is None:
            object.__setattr__(self, "indices", np.arange(len(labels)))
        self.examples.flags.writeable = False
        labels.flags.writeable = False

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def example_shape(self) -> tuple[int, ...]:
        return tuple(self.examples.shape[1:])

    def subset(self, positions, source_id: str | None = None) -> "Dataset":
        """Rows at ``positions`` (local positions, not parent indices)."""
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(
            self.examples[positions],
            self.labels[positions],
            self.class_count,
            source_id if source_id is not None else self.source_id,
            self.indices[positions],
        )


# ---------------------------------------------------------------------------
# IDX


def _read_header(buf: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    need = 4 * (1 + ndim)
    if len(buf) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(buf) < need:
        raise IdxTruncatedError(f"{path}: truncated header")
    return struct.unpack(f">{ndim}I", buf[4:need])


def load_idx(images_path, labels_path, class_count: int | None = None, source_id: str | None = None) -> Dataset:
    """Read an IDX image/label pair. Pixels are scaled to [0, 1] as float64.

    Examples come back as (N, rows, cols, 1).
    """
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    n, rows, cols = _read_header(img, IMAGES_MAGIC, 3, images_path)
    (n_labels,) = _read_header(lab, LABELS_MAGIC, 1, labels_path)
    if len(img) - 16 < n * rows * cols:
        raise IdxTruncatedError(f"{images_path}: expected {n * rows * cols} pixel bytes, found {len(img) - 16}")
    if len(lab) - 8 < n_labels:
        raise IdxTruncatedError(f"{labels_path}: expected {n_labels} label bytes, found {len(lab) - 8}")
    if n != n_labels:
        raise IdxCountMismatchError(f"{n} images but {n_labels} labels")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    examples = (pixels.astype(np.float64) / 255.0).reshape(n, rows, cols, 1)
    if class_count is None:
        class_count = max(int(labels.max()) + 1 if n else 0, 2)
    return Dataset(examples, labels, class_count, source_id or str(images_path))


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Inverse of ``load_idx`` for single-channel image datasets."""
    x = dataset.examples
    if x.ndim == 4 and x.shape[3] == 1:
        x = x[..., 0]
    if x.ndim != 3:
        raise DomainError("IDX export needs (N, rows, cols) or (N, rows, cols, 1) examples")
    pixels = np.rint(x * 255.0)
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
        raise DomainError("pixel values outside [0, 1]")
    n, rows, cols = x.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def data_dir() -> Path:
    return Path(os.environ.get("DATA_DIR", "data"))


def find_mnist(root=None) -> Path | None:
    """Directory holding the four uncompressed MNIST IDX files, if any."""
    root = Path(root) if root is not None else data_dir()
    for cand in (root, root / "mnist", root / "MNIST"):
        if all((cand / f).is_file() for pair in MNIST_FILES.values() for f in pair):
            return cand
    return None


def load_mnist(split: str = "train", root=None) -> Dataset:
    where = find_mnist(root)
    if where is None:
        raise FileNotFoundError(f"MNIST IDX files not found under {root or data_dir()}")
    images, labels = MNIST_FILES[split]
    return load_idx(where / images, where / labels, class_count=10, source_id=f"mnist-{split}")


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, class_count: int | None = None) -> Dataset:
    """CSV with header ``label,f0,f1,...``; one example per row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "label":
            raise DomainError(f"{path}: first column must be 'label'")
        rows = [r for r in reader if r]
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    feats = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64).reshape(len(rows), len(header) - 1)
    if class_count is None:
        class_count = max(int(labels.max()) + 1 if len(labels) else 0, 2)
    return Dataset(feats, labels, class_count, str(path))


def write_csv(dataset: Dataset, path) -> None:
    x = dataset.examples.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{j}" for j in range(x.shape[1])])
        for y, row in zip(dataset.labels, x):
            w.writerow([int(y)] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise DomainError("val_fraction must lie in [0, 1)")


def split(dataset: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    """Seeded uniform split into (train, val); both keep parent indices."""
    n = len(dataset)
    n_val = int(round(spec.val_fraction * n))
    perm = np.random.default_rng(spec.seed).permutation(n)
    val_pos = np.sort(perm[:n_val])
    train_pos = np.sort(perm[n_val:])
    return dataset.subset(train_pos), dataset.subset(val_pos)


# ---------------------------------------------------------------------------
# synthetic data

SYNTH_KINDS = ("redundant", "diverse")
_SYNTH_DEFAULTS = {"redundant": (2, 0.05), "diverse": (16, 0.5)}


@dataclass(frozen=True)
class SynthSpec:
    """Gaussian-mixture classification data.

    ``redundant``: few tight modes per class, so a handful of points per mode
    already pins down the decision boundary. ``diverse``: many broad modes per
    class scattered among other classes' modes, so small subsamples leave
    modes unseen. ``within_class_spread`` and ``modes_per_class`` default per
    kind when left as ``None``.
    """

    kind: str = "redundant"
    class_count: int = 10
    dim: int = 32
    n: int = 2000
    seed: int = 0
    within_class_spread: float | None = None
    modes_per_class: int | None = None

    def __post_init__(self):
        if self.kind not in SYNTH_KINDS:
            raise DomainError(f"synth kind must be one of {SYNTH_KINDS}")
        if self.class_count < 2 or self.dim < 1:
            raise DomainError("need class_count >= 2 and dim >= 1")
        if self.n < self.class_count:
            raise DomainError("n must be >= class_count")
        modes, spread = _SYNTH_DEFAULTS[self.kind]
        if self.modes_per_class is None:
            object.__setattr__(self, "modes_per_class", modes)
        if self.within_class_spread is None:
            object.__setattr__(self, "within_class_spread", spread)
        if self.within_class_spread <= 0 or self.modes_per_class < 1:
            raise DomainError("spread must be > 0 and modes_per_class >= 1")


def _mode_centres(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """(class_count * modes, dim) centres on a sphere, pairwise >= 10x spread apart.

    When there are no more modes than dimensions the centres are a seeded
    random orthonormal frame (scaled), so every pair of modes is equally far
    apart; otherwise they are random points on the sphere.
    """
    count = spec.class_count * spec.modes_per_class
    if count <= spec.dim:
        radius = max(1.0, 10.0 * spec.within_class_spread / np.sqrt(2.0))
        q, _ = np.linalg.qr(rng.normal(size=(spec.dim, count)))
        return radius * q.T
    radius = 10.0 * spec.within_class_spread * max(1.0, np.sqrt(count / spec.dim))
    if spec.kind == "diverse":
        radius = max(radius, 2.0)
    min_gap = 10.0 * spec.within_class_spread
    for _ in range(1000):
        c = rng.normal(size=(count, spec.dim))
        c *= radius / np.linalg.norm(c, axis=1, keepdims=True)
        d = np.linalg.norm(c[:, None] - c[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() >= min_gap:
            return c
        radius *= 1.1
    raise DomainError("could not place well-separated mode centres")


def synth(spec: SynthSpec) -> Dataset:
    """Balanced synthetic dataset, identical for equal specs.

    Class ``c`` gets examples ``c, c + C, c + 2C, ...`` in the output order;
    with ``n`` not divisible by C the first classes get one extra example.
    """
    rng = np.random.default_rng(spec.seed)
    centres = _mode_centres(spec, rng).reshape(spec.class_count, spec.modes_per_class, spec.dim)
    labels = np.arange(spec.n) % spec.class_count
    # rank of each example within its class picks the mode round-robin
    rank = np.arange(spec.n) // spec.class_count
    modes = rank % spec.modes_per_class
    x = centres[labels, modes] + spec.within_class_spread * rng.normal(size=(spec.n, spec.dim))
    return Dataset(x, labels, spec.class_count, f"synth-{spec.kind}-{spec.seed}")


def synth_with_test(spec: SynthSpec, n_test: int) -> tuple[Dataset, Dataset]:
    """A training set per ``spec`` plus a test set drawn from the same modes."""
    full = synth(replace(spec, n=spec.n + n_test))
    # interleaved labels: taking a prefix keeps both parts balanced
    train = full.subset(np.arange(spec.n))
    test = full.subset(np.arange(spec.n, spec.n + n_test), source_id=full.source_id + "-test")
    test = Dataset(test.examples, test.labels, test.class_count, test.source_id)
    return train, test
