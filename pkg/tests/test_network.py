from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hjm_energy.network import (
    AdamState,
    Network,
    SerializationError,
    ShapeError,
    TrainingConfig,
    adam_step,
    count_params,
    deserialize,
    forward,
    grad,
    init_network,
    input_gradient,
    linear_embed,
    loss_bidask,
    loss_mse,
    serialize,
    train,
)
from hjm_energy.verification import gradient_check


def hand_net() -> Network:
    w1 = np.array([[1.0, -1.0], [0.5, 2.0]])
    b1 = np.array([0.0, -1.0])
    w2 = np.array([[2.0, 1.0]])
    b2 = np.array([0.5])
    return Network((2, 2, 1), (w1, w2), (b1, b2), "relu")


class TestForward:
    def test_identity_layer(self):
        net = Network((3, 3), (np.eye(3),), (np.zeros(3),))
        x = np.array([0.3, -2.0, 5.0])
        np.testing.assert_array_equal(forward(net, x), x)

    def test_hand_computed(self):
        # hidden: relu([3 - 1, 1.5 + 2 - 1]) = [2, 2.5]; out = 4 + 2.5 + 0.5
        assert forward(hand_net(), np.array([3.0, 1.0]))[0] == pytest.approx(7.0)
        # hidden: relu([-2 + 1, -1 - 2 - 1]) = [0, 0]
        assert forward(hand_net(), np.array([-2.0, -1.0]))[0] == pytest.approx(0.5)

    def test_input_normalization(self):
        net = Network((1, 1), (np.eye(1),), (np.zeros(1),), input_lo=np.array([2.0]), input_hi=np.array([6.0]))
        assert forward(net, np.array([5.0]))[0] == pytest.approx(0.75)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            forward(hand_net(), np.ones(3))

    def test_batch_matches_rows(self):
        net = init_network((4, 6, 3), "elu", seed=2)
        x = np.random.default_rng(0).normal(size=(5, 4))
        np.testing.assert_allclose(forward(net, x), np.stack([forward(net, r) for r in x]), rtol=1e-15)


class TestLosses:
    def test_mse(self):
        assert loss_mse([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert loss_mse([1.0, 1.0], [0.0, 0.0]) == 1.0
        rng = np.random.default_rng(3)
        p, t = rng.normal(size=(2, 40))
        assert loss_mse(p, t) == pytest.approx(sum((a - b) ** 2 for a, b in zip(p, t)) / 40)
        with pytest.raises(ShapeError):
            loss_mse([1.0], [1.0, 2.0])

    def test_bidask(self):
        bid, ask = np.array([1.0, 2.0, 3.0]), np.array([1.5, 2.5, 3.5])
        assert loss_bidask([1.2, 2.5, 3.0], bid, ask) == 0.0
        assert loss_bidask([0.8, 2.2, 3.2], bid, ask) == pytest.approx(0.04 / 3)
        assert loss_bidask([0.8, 2.9, 3.2], bid, ask) == pytest.approx((0.04 + 0.16) / 3)
        with pytest.raises(ValueError):
            loss_bidask([1.0], [2.0], [1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=10))
    def test_bidask_reduces_to_mse(self, values):
        p = np.array(values)
        t = p[::-1].copy()
        assert loss_bidask(p, t, t) == pytest.approx(loss_mse(p, t))


class TestGradients:
    def test_zero_residual(self):
        net = init_network((3, 5, 2), "elu", seed=1)
        x = np.random.default_rng(0).normal(size=(4, 3))
        _, grads = grad(net, x, forward(net, x))
        assert all(np.all(g == 0) for g in grads)

    def test_inside_bands_flat(self):
        net = init_network((3, 5, 2), "relu", seed=1)
        x = np.random.default_rng(0).normal(size=(4, 3))
        pred = forward(net, x)
        value, grads = grad(net, x, (pred - 0.1, pred + 0.1), loss="bidask")
        assert value == 0.0
        assert all(np.all(g == 0) for g in grads)

    def test_finite_differences_elu(self):
        check = gradient_check((3, 6, 6, 2), "elu", n_points=5, seed=7)
        assert check.passed, check

    def test_finite_differences_bidask(self):
        rng = np.random.default_rng(4)
        net = init_network((2, 5, 3), "elu", seed=4)
        x = rng.normal(size=(6, 2))
        pred = forward(net, x)
        bid, ask = pred + rng.uniform(-0.3, 0.1, pred.shape), pred + 0.2
        _, grads = grad(net, x, (bid, ask), loss="bidask")
        h = 1e-6
        w = net.weights[0]
        for idx in [(0, 0), (3, 1), (4, 0)]:
            vals = []
            for sign in (1, -1):
                w2 = w.copy()
                w2[idx] += sign * h
                shifted = Network(net.dims, (w2, net.weights[1]), net.biases, "elu")
                vals.append(loss_bidask(forward(shifted, x), bid, ask))
            assert grads[0][idx] == pytest.approx((vals[0] - vals[1]) / (2 * h), rel=1e-5, abs=1e-10)

    def test_input_gradient(self):
        net = init_network((4, 8, 3), "elu", seed=5, input_lo=np.zeros(4), input_hi=np.full(4, 2.0))
        x = np.array([0.3, 1.2, 0.7, 1.9])
        v = np.array([1.0, -2.0, 0.5])
        h = 1e-6
        fd = [(v @ forward(net, x + h * e) - v @ forward(net, x - h * e)) / (2 * h) for e in np.eye(4)]
        np.testing.assert_allclose(input_gradient(net, x[None], v[None])[0], fd, rtol=1e-6)


class TestAdam:
    def test_zero_gradient(self):
        p = [np.array([1.0, -2.0])]
        state = AdamState.zeros_like(p)
        new, state = adam_step(p, [np.zeros(2)], state)
        np.testing.assert_array_equal(new[0], p[0])
        assert state.step_count == 1

    def test_first_step(self):
        p = [np.array([0.5])]
        new, _ = adam_step(p, [np.array([1.0])], AdamState.zeros_like(p, lr=1e-3))
        assert new[0][0] - 0.5 == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)

    def test_invalid_state(self):
        with pytest.raises(ValueError):
            AdamState([], [], lr=0.0)
        with pytest.raises(ValueError):
            AdamState([], [], beta1=1.0)


class TestTraining:
    def test_zero_learning_rate(self):
        net = init_network((1, 4, 1), "elu", seed=0)
        x = np.linspace(0, 1, 10)[:, None]
        out, _ = train(net, x, 2 * x, TrainingConfig(epochs=1, lr=0.0))
        for a, b in zip(out.params(), net.params()):
            np.testing.assert_array_equal(a, b)

    def test_fits_linear_target(self):
        x = np.linspace(-1, 1, 100)[:, None]
        net = init_network((1, 8, 1), "elu", seed=0)
        out, trace = train(net, x, 2 * x, TrainingConfig(epochs=200, batch_size=10, lr=1e-2, seed=1))
        assert loss_mse(forward(out, x), 2 * x) <= 1e-3
        assert trace[-1] < trace[0]

    def test_deterministic(self):
        x = np.random.default_rng(0).normal(size=(50, 3))
        y = np.sin(x).sum(axis=1, keepdims=True)
        cfg = TrainingConfig(epochs=5, batch_size=7, seed=3)
        a, ta = train(init_network((3, 5, 1), "relu", 9), x, y, cfg)
        b, tb = train(init_network((3, 5, 1), "relu", 9), x, y, cfg)
        np.testing.assert_array_equal(ta, tb)
        for p, q in zip(a.params(), b.params()):
            np.testing.assert_array_equal(p, q)

    def test_bidask_training(self):
        x = np.linspace(-1, 1, 40)[:, None]
        net = init_network((1, 6, 1), "elu", seed=0)
        out, trace = train(net, x, (x - 0.05, x + 0.05), TrainingConfig(epochs=100, batch_size=8, lr=1e-2), "bidask")
        assert trace[-1] < trace[0]

    def test_rejects_bad_inputs(self):
        net = init_network((2, 3, 1))
        with pytest.raises(ValueError):
            train(net, np.empty((0, 2)), np.empty((0, 1)))
        with pytest.raises(ShapeError):
            train(net, np.ones((4, 3)), np.ones((4, 1)))
        with pytest.raises(ValueError):
            TrainingConfig(epochs=0)


class TestParameterCount:
    def test_architectures(self):
        assert count_params((7, 30, 30, 30, 63)) == 4053
        assert count_params((9, 30, 30, 30, 1)) == 2191
        assert init_network((7, 30, 30, 30, 63)).n_params == sum(p.size for p in init_network((7, 30, 30, 30, 63)).params())


class TestLinearEmbedding:
    def test_zero_matrix(self):
        net = linear_embed(np.zeros((2, 3)), 3)
        assert np.all(forward(net, np.random.default_rng(0).normal(size=(10, 3))) == 0)

    def test_identity(self):
        net = linear_embed(np.eye(2), 3, (2, 4, 4, 2))
        x = np.random.default_rng(1).normal(size=(1000, 2))
        assert np.max(np.abs(forward(net, x) - x)) <= 1e-12
        assert all(np.all(b == 0) for b in net.biases)

    def test_random_matrix_depth_two(self):
        rng = np.random.default_rng(2)
        A = rng.normal(size=(3, 2))
        x = rng.normal(size=(500, 2)) * 5
        exact = x @ A.T
        assert np.max(np.abs(forward(linear_embed(A, 2), x) - exact) / (1 + np.abs(exact))) <= 1e-12

    def test_rejects_narrow_layers(self):
        with pytest.raises(ShapeError):
            linear_embed(np.eye(3), 3, (3, 5, 6, 3))
        with pytest.raises(ValueError):
            linear_embed(np.eye(2), 1)


class TestSerialization:
    def net(self) -> Network:
        net = init_network((7, 5, 4), "elu", seed=3, input_lo=np.zeros(7), input_hi=np.arange(1.0, 8.0))
        return net.with_meta(epochs=2, batch_size=30, lr=1e-3, created_at="2024-01-01T00:00:00+00:00")

    def test_round_trip(self):
        net = self.net()
        back = deserialize(serialize(net))
        assert back.dims == net.dims and back.activation == net.activation
        for a, b in zip(back.params(), net.params()):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(back.input_hi, net.input_hi)
        x = np.random.default_rng(0).uniform(0, 5, size=(20, 7))
        np.testing.assert_array_equal(forward(back, x), forward(net, x))
        assert serialize(back) == serialize(net)

    def test_document_fields(self):
        doc = json.loads(serialize(self.net()))
        assert {"format_version", "dims", "activation", "weights", "biases", "input_norm", "seed",
                "epochs", "batch_size", "lr", "created_at"} <= set(doc)

    def test_truncated(self):
        text = serialize(self.net())
        with pytest.raises(SerializationError):
            deserialize(text[: len(text) // 2])

    def test_version_and_shape_errors(self):
        doc = json.loads(serialize(self.net()))
        doc["format_version"] = 99
        with pytest.raises(SerializationError):
            deserialize(json.dumps(doc))
        doc["format_version"] = 1
        doc["weights"][0] = doc["weights"][0][:-1]
        with pytest.raises(SerializationError):
            deserialize(json.dumps(doc))
