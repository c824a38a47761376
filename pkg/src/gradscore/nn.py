"""Small numpy classifiers with hand-written backprop.

Three architectures are supported: a linear softmax classifier, a ReLU MLP,
and a CNN with two conv/ReLU/max-pool stages followed by two dense layers.
Gradients come in two flavours: the batch mean used by the optimizer and
per-example gradients used for importance scoring. Both share the same
backward pass over activations; they differ only in whether the parameter
gradient is contracted over the batch axis.

Images are laid out NHWC. Convolutions are valid-padding cross-correlations
with stride 1, pooling is 2x2 with stride 2 (trailing odd rows/cols dropped),
and pooling ties go to the first element in row-major window order.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from gradscore.errors import DimensionError, DomainError, NumericError

ARCH_KINDS = ("linear", "mlp", "cnn")
ROLES = ("weight", "bias")


@dataclass(frozen=True)
class Architecture:
    """Shape description of one of the three supported networks.

    ``input_shape`` is ``(d,)`` for dense inputs or ``(H, W, C)`` for images.
    Dense architectures flatten image inputs. ``hidden`` is used by ``mlp``;
    ``channels``, ``kernel`` and ``fc_hidden`` by ``cnn``.
    """

    kind: str
    input_shape: tuple[int, ...]
    class_count: int
    hidden: tuple[int, ...] = ()
    channels: tuple[int, int] = (8, 16)
    kernel: int = 5
    fc_hidden: int = 128

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise DomainError(f"unknown architecture {self.kind!r}")
        if self.class_count < 2:
            raise DomainError("class_count must be >= 2")
        if self.kind == "cnn":
            if len(self.input_shape) != 3:
                raise DomainError("cnn needs an (H, W, C) input shape")
            if len(self.channels) != 2:
                raise DomainError("cnn has exactly two conv layers")
            h, w = self.input_shape[:2]
            for _ in range(2):
                h, w = (h - self.kernel + 1) // 2, (w - self.kernel + 1) // 2
            if h < 1 or w < 1:
                raise DomainError(f"input {self.input_shape} too small for kernel {self.kernel}")

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def cnn_flat_dim(self) -> int:
        h, w, _ = self.input_shape
        for _ in range(2):
            h, w = (h - self.kernel + 1) // 2, (w - self.kernel + 1) // 2
        return h * w * self.channels[1]

    def layer_shapes(self) -> list[tuple[str, str, tuple[int, ...]]]:
        """(layer name, layer type, weight shape) for each parametrised layer."""
        c = self.class_count
        if self.kind == "linear":
            return [("fc1", "dense", (self.input_dim, c))]
        if self.kind == "mlp":
            dims = [self.input_dim, *self.hidden, c]
            return [(f"fc{i + 1}", "dense", (dims[i], dims[i + 1])) for i in range(len(dims) - 1)]
        k = self.kernel
        c_in = self.input_shape[2]
        c1, c2 = self.channels
        return [
            ("conv1", "conv", (k, k, c_in, c1)),
            ("conv2", "conv", (k, k, c1, c2)),
            ("fc1", "dense", (self.cnn_flat_dim(), self.fc_hidden)),
            ("fc2", "dense", (self.fc_hidden, c)),
        ]

    def parameter_count(self) -> int:
        return sum(int(np.prod(s)) + s[-1] for _, _, s in self.layer_shapes())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "hidden": list(self.hidden),
            "channels": list(self.channels),
            "kernel": self.kernel,
            "fc_hidden": self.fc_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(
            kind=d["kind"],
            input_shape=tuple(d["input_shape"]),
            class_count=int(d["class_count"]),
            hidden=tuple(d.get("hidden", ())),
            channels=tuple(d.get("channels", (8, 16))),
            kernel=int(d.get("kernel", 5)),
            fc_hidden=int(d.get("fc_hidden", 128)),
        )


@dataclass
class ParameterSegment:
    name: str
    layer_index: int
    role: str
    values: np.ndarray

    def __post_init__(self):
        if self.role not in ROLES:
            raise DomainError(f"segment role must be one of {ROLES}, got {self.role!r}")


@dataclass
class Model:
    arch: Architecture
    segments: list[ParameterSegment]

    def __post_init__(self):
        names = [s.name for s in self.segments]
        if len(set(names)) != len(names):
            raise DomainError("segment names must be unique")
        self._index = {s.name: s for s in self.segments}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._index[name].values

    @property
    def class_count(self) -> int:
        return self.arch.class_count

    def parameter_count(self) -> int:
        return sum(s.values.size for s in self.segments)

    def copy(self) -> "Model":
        return Model(self.arch, [copy.deepcopy(s) for s in self.segments])

    def flat(self) -> np.ndarray:
        return np.concatenate([s.values.ravel() for s in self.segments])

    def set_flat(self, theta: np.ndarray) -> None:
        pos = 0
        for s in self.segments:
            n = s.values.size
            s.values[...] = np.reshape(theta[pos:pos + n], s.values.shape)
            pos += n


@dataclass
class GradientVector:
    """Gradient values keyed by the segment names of the source model.

    ``tags`` maps each segment name to ``(layer_index, role)`` so a gradient
    can be restricted to parameter subsets without the model at hand.
    """

    values: dict[str, np.ndarray]
    tags: dict[str, tuple[int, str]] = field(default_factory=dict)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values.values()])

    def scaled(self, c: float) -> "GradientVector":
        return GradientVector({k: c * v for k, v in self.values.items()}, dict(self.tags))


def segment_tags(model: Model) -> dict[str, tuple[int, str]]:
    return {s.name: (s.layer_index, s.role) for s in model.segments}


def init_model(arch: Architecture, seed: int, dtype=np.float64) -> Model:
    """Glorot-uniform weights, zero biases, drawn from ``default_rng(seed)``."""
    rng = np.random.default_rng(seed)
    segments = []
    for idx, (name, kind, shape) in enumerate(arch.layer_shapes()):
        if kind == "conv":
            k, _, c_in, c_out = shape
            fan_in, fan_out = k * k * c_in, k * k * c_out
        else:
            fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=shape).astype(dtype)
        segments.append(ParameterSegment(f"{name}.weight", idx, "weight", w))
        segments.append(ParameterSegment(f"{name}.bias", idx, "bias", np.zeros(shape[-1], dtype=dtype)))
    return Model(arch, segments)


# ---------------------------------------------------------------------------
# layer primitives


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """(B, H, W, C) -> (B, H-k+1, W-k+1, k*k*C), ordered (kh, kw, c)."""
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # B, H', W', C, kh, kw
    b, h, w, c = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, h, w, k * k * c)


def _patches_transpose(dp: np.ndarray, k: int, c: int, in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of ``_patches``: scatter-add patch gradients back onto the input."""
    b, ho, wo, _ = dp.shape
    dp = dp.reshape(b, ho, wo, k, k, c)
    dx = np.zeros((b, in_hw[0], in_hw[1], c), dtype=dp.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + ho, j:j + wo, :] += dp[:, :, :, i, j, :]
    return dx


def _pool_forward(x: np.ndarray):
    """2x2 max-pool. Returns pooled values and a window-position code 0..3.

    Positions are (0,0), (0,1), (1,0), (1,1); the first maximal one wins.
    """
    ho, wo = x.shape[1] // 2, x.shape[2] // 2
    views = [x[:, i:2 * ho:2, j:2 * wo:2, :] for i in (0, 1) for j in (0, 1)]
    out = views[0].copy()
    arg = np.zeros(out.shape, dtype=np.int8)
    for code in (1, 2, 3):
        greater = views[code] > out
        out = np.where(greater, views[code], out)
        arg[greater] = code
    return out, arg


def _pool_backward(dout: np.ndarray, arg: np.ndarray, in_shape) -> np.ndarray:
    ho, wo = arg.shape[1], arg.shape[2]
    dx = np.zeros(in_shape, dtype=dout.dtype)
    for code, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, i:2 * ho:2, j:2 * wo:2, :] = np.where(arg == code, dout, 0.0)
    return dx


# ---------------------------------------------------------------------------
# forward / backward


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    arch = model.arch
    x = np.asarray(x)
    if arch.kind == "cnn":
        if x.ndim == 3 and arch.input_shape[2] == 1 and x.shape[1:] == arch.input_shape[:2]:
            x = x[..., None]
        if x.shape[1:] != arch.input_shape:
            raise DimensionError(f"expected batch of {arch.input_shape}, got {x.shape[1:]}")
        return x
    if x.ndim < 2 or int(np.prod(x.shape[1:])) != arch.input_dim:
        raise DimensionError(f"expected batch of {arch.input_dim} features, got shape {x.shape}")
    return x.reshape(x.shape[0], -1)


def _run(model: Model, x: np.ndarray, keep: bool):
    """Forward pass. With ``keep`` also returns the tape needed by backward."""
    x = _check_input(model, x)
    tape = []
    h = x
    layers = model.arch.layer_shapes()
    last = len(layers) - 1
    for idx, (name, kind, shape) in enumerate(layers):
        w, b = model[f"{name}.weight"], model[f"{name}.bias"]
        if kind == "conv":
            k = shape[0]
            p = _patches(h, k)
            z = p @ w.reshape(-1, shape[3]) + b
            a = np.maximum(z, 0.0)
            pooled, arg = _pool_forward(a)
            if keep:
                tape.append((name, kind, h.shape, p, z, a.shape, arg))
            h = pooled
            if idx == 1:
                h = h.reshape(h.shape[0], -1)
        else:
            z = h @ w + b
            if keep:
                tape.append((name, kind, h, z))
            h = z if idx == last else np.maximum(z, 0.0)
    return h, tape


def forward(model: Model, inputs: np.ndarray) -> np.ndarray:
    """Logits of shape (batch, class_count)."""
    logits, _ = _run(model, inputs, keep=False)
    return logits


def _check_labels(labels, n: int, c: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise DimensionError(f"{n} logits rows but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise DomainError(f"labels must lie in [0, {c})")
    return y


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def per_example_losses(logits: np.ndarray, labels) -> np.ndarray:
    logits = np.asarray(logits)
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    return -log_softmax(logits)[np.arange(len(y)), y]


def loss(logits: np.ndarray, labels) -> float:
    """Mean cross-entropy over the batch."""
    losses = per_example_losses(logits, labels)
    if losses.size == 0:
        raise DomainError("empty batch")
    return float(losses.mean())


def _backward(model: Model, tape, dlogits: np.ndarray, per_example: bool, only=None) -> dict:
    """Backprop ``dlogits`` through the tape.

    ``dlogits`` holds d(loss_b)/d(logits_b) per row. Parameter gradients are
    summed over the batch unless ``per_example`` is set, in which case a
    leading batch axis is kept. ``only`` restricts which segment names are
    produced; the pass stops once nothing below is needed.
    """
    grads = {}
    wanted = None if only is None else set(only)
    lowest = 0
    if wanted is not None:
        lowest = min((s.layer_index for s in model.segments if s.name in wanted), default=len(tape))
    d = dlogits
    for idx in range(len(tape) - 1, lowest - 1, -1):
        entry = tape[idx]
        name, kind = entry[0], entry[1]
        w = model[f"{name}.weight"]
        want_w = wanted is None or f"{name}.weight" in wanted
        want_b = wanted is None or f"{name}.bias" in wanted
        if kind == "dense":
            _, _, a_in, z = entry
            if idx != len(tape) - 1:
                d = d * (z > 0)
            if want_w:
                grads[f"{name}.weight"] = (
                    np.einsum("bi,bj->bij", a_in, d) if per_example else a_in.T @ d
                )
            if want_b:
                grads[f"{name}.bias"] = d.copy() if per_example else d.sum(axis=0)
            if idx > lowest:
                d = d @ w.T
        else:
            _, _, in_shape, p, z, a_shape, arg = entry
            d = _pool_backward(d.reshape(arg.shape), arg, a_shape) * (z > 0)
            c_out = w.shape[3]
            if want_w:
                if per_example:
                    gw = np.einsum("bhwk,bhwc->bkc", p, d)
                    grads[f"{name}.weight"] = gw.reshape((d.shape[0],) + w.shape)
                else:
                    gw = p.reshape(-1, p.shape[-1]).T @ d.reshape(-1, c_out)
                    grads[f"{name}.weight"] = gw.reshape(w.shape)
            if want_b:
                grads[f"{name}.bias"] = d.sum(axis=(1, 2)) if per_example else d.sum(axis=(0, 1, 2))
            if idx > lowest:
                dp = d @ w.reshape(-1, c_out).T
                d = _patches_transpose(dp, w.shape[0], w.shape[2], in_shape[1:3])
    return grads


def _ordered(model: Model, grads: dict) -> GradientVector:
    tags = segment_tags(model)
    return GradientVector({n: grads[n] for n in tags if n in grads}, {n: tags[n] for n in tags if n in grads})


def batch_gradient(model: Model, batch: np.ndarray, labels) -> GradientVector:
    """Mean data-term gradient over the batch (no regularisation)."""
    batch = np.asarray(batch)
    if batch.shape[0] == 0:
        raise DomainError("empty batch")
    logits, tape = _run(model, batch, keep=True)
    y = _check_labels(labels, logits.shape[0], model.class_count)
    d = softmax(logits)
    d[np.arange(len(y)), y] -= 1.0
    d /= len(y)
    return _ordered(model, _backward(model, tape, d, per_example=False))


def batch_loss_and_gradient(model: Model, batch: np.ndarray, labels) -> tuple[float, GradientVector]:
    logits, tape = _run(model, batch, keep=True)
    y = _check_labels(labels, logits.shape[0], model.class_count)
    if len(y) == 0:
        raise DomainError("empty batch")
    value = float(-log_softmax(logits)[np.arange(len(y)), y].mean())
    d = softmax(logits)
    d[np.arange(len(y)), y] -= 1.0
    d /= len(y)
    return value, _ordered(model, _backward(model, tape, d, per_example=False))


def per_example_gradients(model: Model, batch: np.ndarray, labels, only=None) -> dict[str, np.ndarray]:
    """Per-example gradients, each with a leading batch axis.

    ``only`` optionally names the segments to compute; skipping early layers
    avoids most of the backward pass when scoring the last layer.
    """
    logits, tape = _run(model, batch, keep=True)
    y = _check_labels(labels, logits.shape[0], model.class_count)
    d = softmax(logits)
    d[np.arange(len(y)), y] -= 1.0
    grads = _backward(model, tape, d, per_example=True, only=only)
    return {n: grads[n] for n in segment_tags(model) if n in grads}


def per_example_gradient(model: Model, example: np.ndarray, label: int) -> GradientVector:
    """Gradient of a single example's cross-entropy loss."""
    example = np.asarray(example)
    grads = per_example_gradients(model, example[None], [label])
    return _ordered(model, {k: v[0] for k, v in grads.items()})


def check_finite(grad: GradientVector) -> None:
    for name, v in grad.values.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite gradient in {name}")


def predict(model: Model, inputs: np.ndarray, chunk: int = 1000) -> np.ndarray:
    """Argmax class per example; ties resolve to the lowest class index."""
    inputs = np.asarray(inputs)
    out = [forward(model, inputs[i:i + chunk]).argmax(axis=1) for i in range(0, len(inputs), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def save_model(model: Model, path) -> None:
    import json

    arrays = {f"seg:{s.name}": s.values for s in model.segments}
    meta = {
        "arch": model.arch.to_dict(),
        "segments": [[s.name, s.layer_index, s.role] for s in model.segments],
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_model(path) -> Model:
    import json

    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        segments = [
            ParameterSegment(name, int(li), role, np.array(z[f"seg:{name}"]))
            for name, li, role in meta["segments"]
        ]
    return Model(Architecture.from_dict(meta["arch"]), segments)
