import numpy as np
import pytest

from gradscore.data import Dataset
from gradscore.errors import DomainError, NumericError
from gradscore.nn import Architecture, GradientVector, forward, init_model, loss
from gradscore.training import TrainConfig, TrainLog, evaluate, lr_at, sgd_step, train


def xor_data():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    return Dataset(x, [0, 1, 1, 0], 2)


def blobs(n=300, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 3
    x = rng.normal(scale=0.3, size=(n, 4)) + np.eye(3, 4)[y] * 2
    return Dataset(x, y, 3)


def one_param_model(value):
    model = init_model(Architecture("linear", (1,), 2), 0)
    model["fc1.weight"][...] = value
    model["fc1.bias"][...] = 0.0
    return model


class TestSchedule:
    def test_before_and_after_decay(self):
        cfg = TrainConfig(base_lr=0.1, lr_decay_factor=0.1, lr_decay_epochs=(30,))
        assert lr_at(cfg, 29) == 0.1
        assert lr_at(cfg, 30) == pytest.approx(0.01)

    def test_constant_schedule(self):
        cfg = TrainConfig(base_lr=0.3, lr_decay_epochs=())
        assert all(lr_at(cfg, e) == 0.3 for e in (0, 10, 1000))

    def test_multiple_decays(self):
        cfg = TrainConfig(base_lr=1.0, lr_decay_factor=0.5, lr_decay_epochs=(5, 2))
        assert [lr_at(cfg, e) for e in (0, 2, 4, 5)] == [1.0, 0.5, 0.5, 0.25]

    @pytest.mark.parametrize(
        "kwargs",
        [{"batch_size": 0}, {"base_lr": 0.0}, {"lr_decay_factor": 0.0}, {"weight_decay": -1.0}, {"epochs": 0}],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(DomainError):
            TrainConfig(**kwargs)


class TestSgdStep:
    def test_zero_gradient_fixed_point(self):
        model = init_model(Architecture("mlp", (3,), 2, hidden=(4,)), 1)
        before = model.flat().copy()
        zero = GradientVector({s.name: np.zeros_like(s.values) for s in model.segments})
        sgd_step(model, zero, 0.1, 0.0)
        np.testing.assert_array_equal(model.flat(), before)

    def test_plain_step(self):
        model = one_param_model(1.0)
        g = GradientVector({"fc1.weight": np.full((1, 2), 2.0), "fc1.bias": np.zeros(2)})
        sgd_step(model, g, 0.1, 0.0)
        np.testing.assert_allclose(model["fc1.weight"], 0.8)

    def test_pure_weight_decay(self):
        model = one_param_model(1.0)
        g = GradientVector({"fc1.weight": np.zeros((1, 2)), "fc1.bias": np.zeros(2)})
        sgd_step(model, g, 0.1, 0.1)
        np.testing.assert_allclose(model["fc1.weight"], 0.99)

    def test_non_finite_aborts_step(self):
        model = one_param_model(1.0)
        g = GradientVector({"fc1.weight": np.array([[np.inf, 0.0]]), "fc1.bias": np.zeros(2)})
        with pytest.raises(NumericError):
            sgd_step(model, g, 0.1, 0.0)
        np.testing.assert_array_equal(model["fc1.weight"], 1.0)

    def test_shape_mismatch(self):
        model = one_param_model(1.0)
        g = GradientVector({"fc1.weight": np.zeros(2), "fc1.bias": np.zeros(2)})
        with pytest.raises(DomainError):
            sgd_step(model, g, 0.1, 0.0)


class TestEvaluate:
    def test_constant_predictor(self):
        model = init_model(Architecture("linear", (2,), 10), 0)
        model["fc1.weight"][...] = 0.0
        model["fc1.bias"][0] = 1.0
        data = Dataset(np.zeros((100, 2)), np.arange(100) % 10, 10)
        assert evaluate(model, data) == 0.1

    def test_argmax_tie_goes_to_lowest_class(self):
        model = init_model(Architecture("linear", (2,), 3), 0)
        for seg in model.segments:
            seg.values[...] = 0.0
        assert evaluate(model, Dataset(np.zeros((5, 2)), [0] * 5, 3)) == 1.0

    def test_random_model_random_labels_near_chance(self):
        rng = np.random.default_rng(0)
        data = Dataset(rng.normal(size=(1000, 20)), rng.integers(0, 10, 1000), 10)
        acc = evaluate(init_model(Architecture("linear", (20,), 10), 3), data)
        # binomial(1000, 0.1): sd ~0.0095, so [0.05, 0.15] is > 5 sd wide
        assert 0.05 <= acc <= 0.15

    def test_empty(self):
        model = init_model(Architecture("linear", (2,), 2), 0)
        with pytest.raises(DomainError):
            evaluate(model, Dataset(np.zeros((0, 2)), [], 2))


class TestTrain:
    def test_memorizes_single_example(self):
        data = Dataset(np.array([[0.5, -1.0, 2.0]]), [2], 3)
        model = init_model(Architecture("mlp", (3,), 3, hidden=(8,)), 0)
        cfg = TrainConfig(batch_size=1, epochs=500, base_lr=0.1, lr_decay_epochs=(), weight_decay=0.0,
                          probe_set_size=0)
        trained, tlog = train(model, data, None, cfg)
        assert tlog.train_loss[-1] <= 1e-3
        assert loss(forward(trained, data.examples), data.labels) <= 1e-3
        assert evaluate(trained, data) == 1.0

    def test_xor(self):
        data = xor_data()
        model = init_model(Architecture("mlp", (2,), 2, hidden=(8,)), 0)
        cfg = TrainConfig(batch_size=4, epochs=2000, base_lr=0.5, lr_decay_epochs=(), weight_decay=0.0,
                          probe_set_size=0)
        trained, _ = train(model, data, None, cfg)
        assert evaluate(trained, data) == 1.0

    def test_monotone_loss_small_lr(self):
        data = Dataset(np.array([[1.0, -2.0, 0.5, 0.0]]), [1], 2)
        model = init_model(Architecture("mlp", (4,), 2, hidden=(6,)), 4)
        cfg = TrainConfig(batch_size=1, epochs=100, base_lr=0.01, weight_decay=0.0, probe_set_size=0)
        _, tlog = train(model, data, None, cfg)
        assert np.all(np.diff(tlog.train_loss) <= 1e-15)

    def test_does_not_touch_input_model(self):
        model = init_model(Architecture("linear", (4,), 3), 0)
        before = model.flat().copy()
        train(model, blobs(60), None, TrainConfig(epochs=2, probe_set_size=0))
        np.testing.assert_array_equal(model.flat(), before)

    def test_reproducible(self):
        data = blobs()
        cfg = TrainConfig(batch_size=16, epochs=5, base_lr=0.1, probe_set_size=20, seed=3)
        model = init_model(Architecture("mlp", (4,), 3, hidden=(10,)), 2)
        a, la = train(model, data.subset(np.arange(240)), data.subset(np.arange(240, 300)), cfg)
        b, lb = train(model, data.subset(np.arange(240)), data.subset(np.arange(240, 300)), cfg)
        assert a.flat().tobytes() == b.flat().tobytes()
        assert la.train_loss == lb.train_loss and la.val_acc == lb.val_acc
        np.testing.assert_array_equal(la.probe_gradients, lb.probe_gradients)

    def test_early_stopping_returns_best_snapshot(self):
        data = blobs(seed=1)
        train_set, val_set = data.subset(np.arange(200)), data.subset(np.arange(200, 300))
        model = init_model(Architecture("mlp", (4,), 3, hidden=(10,)), 0)
        cfg = TrainConfig(batch_size=8, epochs=40, base_lr=0.05, early_stop_patience=3, probe_set_size=0)
        best, tlog = train(model, train_set, val_set, cfg)
        assert tlog.val_acc[tlog.best_epoch] == max(tlog.val_acc)
        # ties go to the earlier epoch
        assert tlog.best_epoch == tlog.val_acc.index(max(tlog.val_acc))
        assert evaluate(best, val_set) == max(tlog.val_acc)
        if tlog.epochs_run < cfg.epochs:
            assert tlog.epochs_run - 1 - tlog.best_epoch == cfg.early_stop_patience

    def test_probe_matrix_and_decreasing_magnitudes(self):
        data = blobs(400, seed=2)
        model = init_model(Architecture("mlp", (4,), 3, hidden=(16,)), 1)
        cfg = TrainConfig(batch_size=16, epochs=15, base_lr=0.1, probe_set_size=50, seed=5)
        _, tlog = train(model, data, None, cfg)
        assert tlog.probe_gradients.shape == (50, 15)
        assert len(np.unique(tlog.probe_indices)) == 50
        assert tlog.probe_gradients[:, -1].mean() <= tlog.probe_gradients[:, 0].mean()

    def test_empty_train_set(self):
        model = init_model(Architecture("linear", (2,), 2), 0)
        with pytest.raises(DomainError):
            train(model, Dataset(np.zeros((0, 2)), [], 2), None, TrainConfig())

    def test_short_last_batch_is_used(self):
        # 5 examples, batch 2: the lone last example must still move the weights
        data = Dataset(np.eye(5), [0, 1, 0, 1, 1], 2)
        model = init_model(Architecture("linear", (5,), 2), 0)
        trained, _ = train(model, data, None, TrainConfig(batch_size=2, epochs=1, probe_set_size=0))
        assert np.all(trained["fc1.weight"] != model["fc1.weight"])


class TestTrainLogIO:
    def test_roundtrip(self, tmp_path):
        data = blobs(120)
        model = init_model(Architecture("linear", (4,), 3), 0)
        cfg = TrainConfig(batch_size=16, epochs=4, probe_set_size=10)
        _, tlog = train(model, data.subset(np.arange(100)), data.subset(np.arange(100, 120)), cfg)
        tlog.save(tmp_path / "log.csv", tmp_path / "probe.csv")
        back = TrainLog.load(tmp_path / "log.csv", tmp_path / "probe.csv")
        assert back.train_loss == tlog.train_loss
        assert back.val_acc == tlog.val_acc
        assert back.lr == tlog.lr
        np.testing.assert_array_equal(back.probe_indices, tlog.probe_indices)
        np.testing.assert_array_equal(back.probe_gradients, tlog.probe_gradients)
        assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,train_loss,val_acc,lr"
        assert (tmp_path / "probe.csv").read_text().splitlines()[0] == "example_index,epoch,grad_norm"
