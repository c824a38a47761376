import struct
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradscore.data import (
    Dataset,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    SplitSpec,
    SynthSpec,
    find_mnist,
    load_csv,
    load_idx,
    load_mnist,
    split,
    synth,
    synth_with_test,
    write_csv,
    write_idx,
)
from gradscore.errors import DomainError
from gradscore.nn import Architecture, init_model
from gradscore.sampling import select_random
from gradscore.training import TrainConfig, evaluate, train


def write_raw(tmp_path, images: bytes, labels: bytes):
    (tmp_path / "img").write_bytes(images)
    (tmp_path / "lab").write_bytes(labels)
    return tmp_path / "img", tmp_path / "lab"


def idx_images(n, rows, cols, pixels, magic=0x803):
    return struct.pack(">IIII", magic, n, rows, cols) + bytes(pixels)


def idx_labels(n, labels, magic=0x801):
    return struct.pack(">II", magic, n) + bytes(labels)


class TestIdx:
    def test_handcrafted_file(self, tmp_path):
        paths = write_raw(tmp_path, idx_images(1, 2, 2, [0, 128, 255, 0]), idx_labels(1, [7]))
        ds = load_idx(*paths)
        assert len(ds) == 1 and ds.example_shape == (2, 2, 1)
        np.testing.assert_array_equal(ds.examples[0, :, :, 0], [[0.0, 128 / 255], [1.0, 0.0]])
        assert ds.examples.dtype == np.float64
        assert ds.labels.tolist() == [7]

    def test_truncated_images(self, tmp_path):
        paths = write_raw(tmp_path, idx_images(2, 2, 2, [1, 2, 3, 4]), idx_labels(2, [0, 1]))
        with pytest.raises(IdxTruncatedError):
            load_idx(*paths)

    def test_truncated_header(self, tmp_path):
        paths = write_raw(tmp_path, struct.pack(">II", 0x803, 1), idx_labels(1, [0]))
        with pytest.raises(IdxTruncatedError):
            load_idx(*paths)

    def test_bad_magic(self, tmp_path):
        paths = write_raw(tmp_path, idx_images(1, 1, 1, [0], magic=0x801), idx_labels(1, [0]))
        with pytest.raises(IdxMagicError):
            load_idx(*paths)
        paths = write_raw(tmp_path, idx_images(1, 1, 1, [0]), idx_labels(1, [0], magic=0x803))
        with pytest.raises(IdxMagicError):
            load_idx(*paths)

    def test_count_mismatch(self, tmp_path):
        paths = write_raw(tmp_path, idx_images(2, 1, 1, [0, 1]), idx_labels(1, [0]))
        with pytest.raises(IdxCountMismatchError):
            load_idx(*paths)

    def test_errors_are_distinct(self):
        kinds = {IdxMagicError, IdxTruncatedError, IdxCountMismatchError}
        assert all(not issubclass(a, b) for a in kinds for b in kinds if a is not b)

    @settings(max_examples=30)
    @given(st.integers(0, 6), st.integers(1, 5), st.integers(1, 5), st.data())
    def test_bit_faithful_roundtrip(self, n, rows, cols, data):
        pixels = data.draw(st.lists(st.integers(0, 255), min_size=n * rows * cols, max_size=n * rows * cols))
        labels = data.draw(st.lists(st.integers(0, 9), min_size=n, max_size=n))
        with tempfile.TemporaryDirectory() as d:
            d = Path(d)
            img, lab = idx_images(n, rows, cols, pixels), idx_labels(n, labels)
            paths = write_raw(d, img, lab)
            ds = load_idx(*paths, class_count=10)
            write_idx(ds, d / "img2", d / "lab2")
            assert (d / "img2").read_bytes() == img
            assert (d / "lab2").read_bytes() == lab


@pytest.mark.skipif(find_mnist() is None, reason="MNIST not found under DATA_DIR")
class TestMnist:
    def test_train_file(self):
        ds = load_mnist("train")
        assert len(ds) == 60000 and ds.example_shape == (28, 28, 1)
        assert ds.labels.min() >= 0 and ds.labels.max() < 10
        # independent reader: skip the 16-byte header and sum raw bytes
        raw = (find_mnist() / "train-images-idx3-ubyte").read_bytes()
        expected = sum(memoryview(raw)[16:].cast("B"))
        assert int(np.rint(ds.examples * 255).astype(np.int64).sum()) == expected

    def test_test_file(self):
        ds = load_mnist("test")
        assert len(ds) == 10000 and ds.class_count == 10


class TestCsv:
    def test_roundtrip(self, tmp_path, rng):
        ds = Dataset(rng.normal(size=(6, 3)), [0, 1, 2, 0, 1, 2], 3)
        write_csv(ds, tmp_path / "d.csv")
        back = load_csv(tmp_path / "d.csv", class_count=3)
        assert back.examples.tobytes() == ds.examples.tobytes()
        assert back.labels.tolist() == ds.labels.tolist()
        assert (tmp_path / "d.csv").read_text().startswith("label,f0,f1,f2\n")

    def test_missing_label_column(self, tmp_path):
        (tmp_path / "d.csv").write_text("f0,label\n1.0,0\n")
        with pytest.raises(DomainError):
            load_csv(tmp_path / "d.csv")


class TestDataset:
    def test_labels_out_of_range(self):
        with pytest.raises(DomainError):
            Dataset(np.zeros((2, 1)), [0, 3], 3)

    def test_read_only(self):
        ds = Dataset(np.zeros((2, 1)), [0, 1], 2)
        with pytest.raises(ValueError):
            ds.examples[0, 0] = 1.0

    def test_subset_keeps_parent_indices(self):
        ds = Dataset(np.arange(10.0)[:, None], np.arange(10) % 2, 2)
        sub = ds.subset([7, 2, 5]).subset([0, 2])
        assert sub.indices.tolist() == [7, 5]
        assert sub.examples[:, 0].tolist() == [7.0, 5.0]


class TestSplit:
    def test_ninety_ten(self):
        ds = Dataset(np.zeros((100, 1)), np.zeros(100), 2)
        tr, va = split(ds, SplitSpec(0.1, seed=0))
        assert (len(tr), len(va)) == (90, 10)
        assert sorted(tr.indices.tolist() + va.indices.tolist()) == list(range(100))

    def test_zero_fraction(self):
        ds = Dataset(np.zeros((7, 1)), np.zeros(7), 2)
        tr, va = split(ds, SplitSpec(0.0))
        assert len(va) == 0 and tr.indices.tolist() == list(range(7))

    def test_seeded(self):
        ds = Dataset(np.zeros((1000, 1)), np.zeros(1000), 2)
        first = split(ds, SplitSpec(0.1, 0))[1].indices
        assert split(ds, SplitSpec(0.1, 0))[1].indices.tolist() == first.tolist()
        vals = {tuple(split(ds, SplitSpec(0.1, s))[1].indices.tolist()) for s in range(100)}
        assert len(vals) == 100

    @settings(max_examples=40)
    @given(st.integers(1, 300), st.floats(0.0, 0.95), st.integers(0, 2**31))
    def test_partition(self, n, frac, seed):
        ds = Dataset(np.zeros((n, 1)), np.zeros(n), 2)
        tr, va = split(ds, SplitSpec(frac, seed))
        assert len(va) == round(frac * n)
        assert sorted(np.concatenate([tr.indices, va.indices]).tolist()) == list(range(n))

    def test_bad_fraction(self):
        with pytest.raises(DomainError):
            SplitSpec(1.0)


class TestSynth:
    def test_balanced(self):
        for kind in ("redundant", "diverse"):
            ds = synth(SynthSpec(kind, class_count=10, n=100))
            assert np.bincount(ds.labels).tolist() == [10] * 10

    def test_deterministic(self):
        a, b = synth(SynthSpec("diverse", seed=5)), synth(SynthSpec("diverse", seed=5))
        assert a.examples.tobytes() == b.examples.tobytes()
        assert a.examples.tobytes() != synth(SynthSpec("diverse", seed=6)).examples.tobytes()

    def test_defaults_per_kind(self):
        r, d = SynthSpec("redundant"), SynthSpec("diverse")
        assert (r.modes_per_class, r.within_class_spread) == (2, 0.05)
        assert (d.modes_per_class, d.within_class_spread) == (16, 0.5)

    def test_invalid(self):
        with pytest.raises(DomainError):
            SynthSpec("clustered")
        with pytest.raises(DomainError):
            SynthSpec(n=5, class_count=10)
        with pytest.raises(DomainError):
            SynthSpec(within_class_spread=0.0)

    def test_test_split_matches_train_distribution(self):
        spec = SynthSpec(n=200)
        tr, te = synth_with_test(spec, 50)
        assert tr.examples.tobytes() == synth(replace(spec, n=250)).examples[:200].tobytes()
        assert len(te) == 50 and np.bincount(te.labels).tolist() == [5] * 10


def _one_percent_gap(kind: str, seed: int = 0) -> tuple[float, float]:
    """(full-data, 1%-subsample) test accuracy of a linear classifier.

    dim=192 exceeds the diverse kind's 160 modes, so mode centres are
    orthogonal for both kinds and the comparison isolates data redundancy.
    """
    train_set, test_set = synth_with_test(SynthSpec(kind, dim=192, n=20000, seed=seed), 2000)
    arch = Architecture("linear", train_set.example_shape, 10)
    cfg = TrainConfig(batch_size=16, epochs=20, base_lr=0.1, lr_decay_epochs=(15,), probe_set_size=0)
    full, _ = train(init_model(arch, 0), train_set, None, cfg)
    sub = train_set.subset(select_random(len(train_set), 200, seed).indices)
    # same number of optimiser steps as a handful of full-data epochs
    small, _ = train(init_model(arch, 0), sub, None, replace(cfg, epochs=500, lr_decay_epochs=(375,)))
    return evaluate(full, test_set), evaluate(small, test_set)


@pytest.mark.slow
class TestSynthRedundancy:
    def test_redundant_one_percent_is_enough(self):
        full, small = _one_percent_gap("redundant")
        assert small >= 0.95 * full

    def test_diverse_one_percent_falls_short(self):
        full, small = _one_percent_gap("diverse")
        assert full - small >= 0.05
