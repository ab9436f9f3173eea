import io
import math

import numpy as np
import pytest

from attnfer.attention import AttentionConfig
from attnfer.data import DatasetBatch, synthetic_dataset
from attnfer.errors import ConfigError, EmptyDataset, NonFinite
from attnfer.layers import Param
from attnfer.models import ModelSpec, build_model, init_params
from attnfer.train import LOG_HEADER, SGD, TrainConfig, evaluate, fit, sgd_step, train_epoch


def param(value, grad):
    p = Param("w", np.array(value, dtype=float))
    p.grad[...] = grad
    return p


class TestSGD:
    def test_plain_step(self):
        p = param([1.0], [0.5])
        sgd_step([p], TrainConfig(lr=0.1, momentum=0.0))
        assert p.value[0] == pytest.approx(0.95, abs=1e-15)
        assert not p.grad.any()

    def test_momentum_recurrence(self):
        g = np.array([0.3, -2.0])
        p = param([0.0, 0.0], g)
        opt = SGD([p], lr=1.0, momentum=0.9)
        opt.step()
        p.grad[...] = g
        opt.step()
        np.testing.assert_allclose(opt.velocity[0], 1.9 * g, rtol=1e-15)

    def test_weight_decay(self):
        p = param([1.0], [0.0])
        SGD([p], lr=0.1, weight_decay=0.1).step()
        assert p.value[0] == pytest.approx(0.99, abs=1e-15)

    def test_non_finite(self):
        p = param([1.0], [np.inf])
        with pytest.raises(NonFinite):
            SGD([p], lr=0.1).step()

    @pytest.mark.parametrize("kw", [dict(lr=-1.0), dict(momentum=1.0), dict(momentum=-0.1), dict(batch_size=0)])
    def test_config_invariants(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


def linear_spec(classes=2, features=2):
    return ModelSpec(family="vgg", depth=None, vgg_config=(), fc_widths=(), input_shape=(1, 1, features), classes=classes)


def toy_spec(kind="none"):
    return ModelSpec(
        family="vgg",
        depth=None,
        vgg_config=(4, "M", 8, "M"),
        fc_widths=(8,),
        input_shape=(1, 16, 16),
        attention=AttentionConfig(kind, r=2, spatial_kernel=3),
    )


def snapshot(model):
    return [p.value.copy() for p in model.parameters()]


@pytest.fixture(scope="module")
def toy_data():
    return synthetic_dataset(classes=7, per_class=4, hw=(16, 16), seed=3)


def test_linear_separable_two_points():
    model = build_model(linear_spec())
    init_params(model, 0)
    data = DatasetBatch(np.array([[1.0, -0.5], [-1.0, 0.5]]).reshape(2, 1, 1, 2), [1, 0], ("a", "b"))
    cfg = TrainConfig(lr=0.5, momentum=0.0, batch_size=2, epochs=50)
    history, _ = fit(model, data, cfg)
    assert any(tm.accuracy == 1.0 for tm, _ in history)
    assert evaluate(model, data).accuracy == 1.0


def test_zero_lr_keeps_parameters(toy_data):
    model = build_model(toy_spec("se"))
    init_params(model, 1)
    before = snapshot(model)
    history, _ = fit(model, toy_data, TrainConfig(lr=0.0, momentum=0.0, epochs=3, shuffle=False))
    for a, p in zip(before, model.parameters()):
        assert np.array_equal(a, p.value)
    losses = [tm.loss for tm, _ in history]
    assert losses[0] == losses[1] == losses[2]


def test_tiny_lr_limit(toy_data):
    model = build_model(toy_spec("eca"))
    init_params(model, 2)
    before = snapshot(model)
    fit(model, toy_data, TrainConfig(lr=1e-12, epochs=1))
    w = np.concatenate([a.ravel() for a in before])
    dw = np.concatenate([p.value.ravel() for p in model.parameters()]) - w
    assert 0 < np.linalg.norm(dw) <= 1e-10 * np.linalg.norm(w)


@pytest.mark.parametrize("kind", ["none", "cbam"])
def test_same_seed_bitwise_identical(toy_data, kind):
    finals = []
    for _ in range(2):
        model = build_model(toy_spec(kind))
        init_params(model, 4)
        fit(model, toy_data, TrainConfig(lr=0.02, epochs=2, batch_size=5, seed=9))
        finals.append(b"".join(p.value.tobytes() for p in model.parameters()))
    assert finals[0] == finals[1]


def test_shuffle_seed_matters(toy_data):
    finals = []
    for seed in (0, 1):
        model = build_model(toy_spec())
        init_params(model, 4)
        fit(model, toy_data, TrainConfig(lr=0.02, epochs=1, batch_size=5, seed=seed))
        finals.append(b"".join(p.value.tobytes() for p in model.parameters()))
    assert finals[0] != finals[1]


def test_full_batch_descent(toy_data):
    decreasing = 0
    for seed in range(5):
        model = build_model(toy_spec("se"))
        init_params(model, seed)
        cfg = TrainConfig(lr=0.01, momentum=0.0, batch_size=len(toy_data), epochs=10, shuffle=False)
        losses = [tm.loss for tm, _ in fit(model, toy_data, cfg)[0]]
        decreasing += all(b < a for a, b in zip(losses, losses[1:]))
    assert decreasing >= 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_reports_batch(toy_data):
    model = build_model(toy_spec())
    init_params(model, 0)
    cfg = TrainConfig(lr=1e300, momentum=0.0, batch_size=7, epochs=3)
    with pytest.raises(NonFinite, match=r"epoch 1, batch \d+"):
        fit(model, toy_data, cfg)


def test_empty_dataset():
    model = build_model(linear_spec())
    empty = DatasetBatch(np.zeros((0, 1, 1, 2)), [], ("a", "b"))
    with pytest.raises(EmptyDataset):
        train_epoch(model, empty, TrainConfig(), SGD(model.parameters(), 0.1))
    with pytest.raises(EmptyDataset):
        evaluate(model, empty)


def test_fit_log_format(toy_data):
    model = build_model(toy_spec())
    init_params(model, 0)
    buf = io.StringIO()
    fit(model, toy_data, TrainConfig(epochs=2), val_data=toy_data, log=buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == LOG_HEADER
    assert [len(line.split("\t")) for line in lines] == [5, 5, 5]
    assert [line.split("\t")[0] for line in lines[1:]] == ["1", "2"]


class TestEvaluate:
    def test_always_class_zero(self):
        model = build_model(linear_spec(classes=3))
        model.parameters()[-1].value[...] = [5.0, 0.0, 0.0]
        data = DatasetBatch(np.ones((4, 1, 1, 2)), [0, 0, 0, 0], ("a", "b", "c"))
        m = evaluate(model, data)
        assert m.accuracy == 1.0 and m.per_class_accuracy[0] == 1.0
        assert all(math.isnan(v) for v in m.per_class_accuracy[1:])

    def test_uniform_logits_tie_break(self):
        model = build_model(linear_spec(classes=7))
        labels = np.repeat(np.arange(7), 3)
        data = DatasetBatch(np.ones((21, 1, 1, 2)), labels, tuple("abcdefg"))
        m = evaluate(model, data)
        assert m.accuracy == pytest.approx(3 / 21)
        assert m.per_class_accuracy == [1.0] + [0.0] * 6
        assert m.loss == pytest.approx(math.log(7))

    def test_pure(self, toy_data):
        model = build_model(toy_spec("cbam"))
        init_params(model, 5)
        assert evaluate(model, toy_data) == evaluate(model, toy_data)

    def test_accuracy_consistent_with_counts(self, toy_data):
        model = build_model(toy_spec())
        init_params(model, 6)
        m = evaluate(model, toy_data)
        hits = sum(a * c for a, c in zip(m.per_class_accuracy, m.counts))
        assert m.accuracy == pytest.approx(hits / len(toy_data))

    def test_random_model_near_chance(self):
        data = synthetic_dataset(classes=7, per_class=100, hw=(16, 16), seed=11)
        hits = 0.0
        for seed in range(5):
            model = build_model(toy_spec())
            init_params(model, seed)
            hits += evaluate(model, data).accuracy
        assert abs(hits / 5 - 1 / 7) <= 0.05
