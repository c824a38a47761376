"""Experiment configuration and its flat ``section.key=value`` text format.

Example::

    # MNIST subsample sweep
    data.kind=mnist
    model.arch=cnn
    train.lr=0.05
    select.policies=random,max_gradient,nonextreme
    select.fractions=0.002,0.006,0.03
    select.seeds=0,1,2
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from gradscore.data import SynthSpec
from gradscore.errors import DomainError
from gradscore.importance import NormConfig
from gradscore.sampling import SelectionPolicy
from gradscore.training import TrainConfig


@dataclass(frozen=True)
class DataSpec:
    """Where the data comes from: ``mnist``, ``idx``, ``csv`` or ``synth``."""

    kind: str = "synth"
    root: str | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_csv: str | None = None
    test_csv: str | None = None
    limit_train: int | None = None
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    split_seed: int = 0
    synth: SynthSpec = field(default_factory=SynthSpec)
    synth_n_test: int = 1000


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "cnn"
    hidden: tuple[int, ...] = (64,)
    channels: tuple[int, int] = (8, 16)
    kernel: int = 5
    fc_hidden: int = 128


@dataclass(frozen=True)
class DiagSpec:
    bound_batches: int = 100
    bound_batch_size: int | None = None  # defaults to the training batch size
    ks: tuple[int, ...] = ()  # empty: log-spaced
    percentiles: tuple[float, ...] = (99.0, 95.0, 50.0, 5.0)
    export_count: int = 16
    overlap_trials: int = 100
    overlap_with: str | None = None  # another score table CSV


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    norm: NormConfig = field(default_factory=NormConfig)
    policies: tuple[SelectionPolicy, ...] = (SelectionPolicy("random"), SelectionPolicy("max_gradient"))
    fractions: tuple[float, ...] = (0.05,)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "out"
    diag: DiagSpec = field(default_factory=DiagSpec)

    def __post_init__(self):
        if not self.policies:
            raise DomainError("at least one policy is required")
        if not self.seeds:
            raise DomainError("at least one repeat seed is required")
        if list(self.fractions) != sorted(self.fractions):
            raise DomainError("fractions must be sorted ascending")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise DomainError("fractions must lie in (0, 1]")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _opt(conv):
    return lambda v: None if v.strip().lower() in ("", "none") else conv(v)


# key -> (section object, field name, parser)
_KEYS = {
    "data.kind": ("data", "kind", str),
    "data.root": ("data", "root", _opt(str)),
    "data.train_images": ("data", "train_images", _opt(str)),
    "data.train_labels": ("data", "train_labels", _opt(str)),
    "data.test_images": ("data", "test_images", _opt(str)),
    "data.test_labels": ("data", "test_labels", _opt(str)),
    "data.train_csv": ("data", "train_csv", _opt(str)),
    "data.test_csv": ("data", "test_csv", _opt(str)),
    "data.limit_train": ("data", "limit_train", _opt(int)),
    "data.test_fraction": ("data", "test_fraction", float),
    "data.val_fraction": ("data", "val_fraction", float),
    "data.split_seed": ("data", "split_seed", int),
    "synth.kind": ("synth", "kind", str),
    "synth.class_count": ("synth", "class_count", int),
    "synth.dim": ("synth", "dim", int),
    "synth.n": ("synth", "n", int),
    "synth.seed": ("synth", "seed", int),
    "synth.spread": ("synth", "within_class_spread", _opt(float)),
    "synth.modes": ("synth", "modes_per_class", _opt(int)),
    "synth.n_test": ("data", "synth_n_test", int),
    "model.arch": ("model", "arch", str),
    "model.hidden": ("model", "hidden", _ints),
    "model.channels": ("model", "channels", _ints),
    "model.kernel": ("model", "kernel", int),
    "model.fc_hidden": ("model", "fc_hidden", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.epochs": ("train", "epochs", int),
    "train.lr": ("train", "base_lr", float),
    "train.lr_decay_factor": ("train", "lr_decay_factor", float),
    "train.lr_decay_epochs": ("train", "lr_decay_epochs", _ints),
    "train.weight_decay": ("train", "weight_decay", float),
    "train.patience": ("train", "early_stop_patience", int),
    "train.seed": ("train", "seed", int),
    "train.probe_set_size": ("train", "probe_set_size", int),
    "norm.norm": ("norm", "norm", str),
    "norm.subset": ("norm", "subset", str),
    "select.policies": ("top", "policies", None),
    "select.discard_fraction": ("top", "discard_fraction", float),
    "select.fractions": ("top", "fractions", _floats),
    "select.seeds": ("top", "seeds", _ints),
    "out": ("top", "output_dir", str),
    "diag.bound_batches": ("diag", "bound_batches", int),
    "diag.bound_batch_size": ("diag", "bound_batch_size", _opt(int)),
    "diag.ks": ("diag", "ks", _ints),
    "diag.percentiles": ("diag", "percentiles", _floats),
    "diag.export_count": ("diag", "export_count", int),
    "diag.overlap_trials": ("diag", "overlap_trials", int),
    "diag.overlap_with": ("diag", "overlap_with", _opt(str)),
}


def parse_pairs(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment line."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DomainError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def build_config(pairs: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    sections = {
        "data": {},
        "synth": {},
        "model": {},
        "train": {},
        "norm": {},
        "diag": {},
        "top": {},
    }
    for key, value in pairs.items():
        if key not in _KEYS:
            raise DomainError(f"unknown config key {key!r}")
        section, name, conv = _KEYS[key]
        sections[section][name] = value if conv is None else conv(value)

    top = sections["top"]
    discard = top.pop("discard_fraction", None)
    policies = base.policies
    if "policies" in top:
        policies = tuple(SelectionPolicy(p.strip()) for p in top.pop("policies").split(",") if p.strip())
    if discard is not None:
        policies = tuple(replace(p, discard_fraction=discard) for p in policies)

    data = base.data
    if sections["synth"]:
        synth_args = {f.name: getattr(data.synth, f.name) for f in fields(SynthSpec)}
        if "kind" in sections["synth"]:
            # per-kind defaults resolve again unless given explicitly
            synth_args["within_class_spread"] = synth_args["modes_per_class"] = None
        synth_args.update(sections["synth"])
        data = replace(data, synth=SynthSpec(**synth_args))
    data = replace(data, **sections["data"])
    return replace(
        base,
        data=data,
        model=replace(base.model, **sections["model"]),
        train=replace(base.train, **sections["train"]),
        norm=replace(base.norm, **sections["norm"]),
        diag=replace(base.diag, **sections["diag"]),
        policies=policies,
        **top,
    )


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    pairs = parse_pairs(Path(path).read_text()) if path else {}
    pairs.update(overrides or {})
    return build_config(pairs)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Inverse of ``build_config``: every key, one per line, sorted."""
    objs = {
        "data": cfg.data,
        "synth": cfg.data.synth,
        "model": cfg.model,
        "train": cfg.train,
        "norm": cfg.norm,
        "diag": cfg.diag,
        "top": cfg,
    }
    lines = []
    for key, (section, name, _) in sorted(_KEYS.items()):
        if key == "select.policies":
            value = ",".join(p.kind for p in cfg.policies)
        elif key == "select.discard_fraction":
            value = repr(cfg.policies[0].discard_fraction)
        else:
            value = _fmt(getattr(objs[section], name))
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
