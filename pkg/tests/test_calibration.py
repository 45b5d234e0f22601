from __future__ import annotations

import numpy as np
import pytest

from hjm_energy.calibration import (
    CALIBRATION_CONFIG,
    ContractGrid,
    ThetaBox,
    band_distance,
    calibrate_bidask,
    calibrate_grid,
    calibrate_pointwise,
    cluster_assign,
    gen_grid_dataset,
    gen_pointwise_dataset,
    make_bidask,
    metrics,
    mismatch,
    param_metrics,
    param_summary,
    reshape_for_pointwise,
    sample_theta,
)
from hjm_energy.network import TrainingConfig, forward, init_network
from hjm_energy.pricing import ContractSpec, ModelParams, ParameterError, call_price

BOX = ThetaBox()
GRID = ContractGrid()


class TestBox:
    def test_latent_round_trip(self):
        theta = BOX.lo + 0.3 * (BOX.hi - BOX.lo)
        np.testing.assert_allclose(BOX.from_latent(BOX.to_latent(theta)), theta, rtol=1e-14)
        np.testing.assert_allclose(BOX.from_latent(np.zeros(7)), BOX.midpoint)

    def test_latent_stays_inside(self):
        u = np.random.default_rng(0).normal(scale=30, size=(100, 7))
        assert np.all(BOX.contains(BOX.from_latent(u)))

    def test_invalid(self):
        with pytest.raises(ParameterError):
            ThetaBox(lower=(1,) * 7, upper=(0,) * 7)
        with pytest.raises(ParameterError):
            BOX.to_latent(BOX.lo)


class TestSampling:
    def test_inside_and_deterministic(self):
        a = sample_theta(BOX, 500, seed=3)
        assert np.all(BOX.contains(a))
        np.testing.assert_array_equal(a, sample_theta(BOX, 500, seed=3))
        assert not np.array_equal(a, sample_theta(BOX, 500, seed=4))

    def test_permutation_pairing(self):
        a = sample_theta(BOX, 50, seed=1)
        expected = np.sort(BOX.lo[0] + (BOX.hi[0] - BOX.lo[0]) * np.linspace(0, 1, 50))
        np.testing.assert_allclose(np.sort(a[:, 0]), expected)

    def test_marginal_means(self):
        a = sample_theta(BOX, 40000, grid_points_per_dim=200, seed=5)
        assert np.all(np.abs(a.mean(axis=0) - BOX.midpoint) <= 0.02 * np.abs(BOX.midpoint))

    def test_invalid(self):
        with pytest.raises(ValueError):
            sample_theta(BOX, 0)
        with pytest.raises(ValueError):
            sample_theta(BOX, 10, grid_points_per_dim=1)


class TestDatasets:
    def test_grid_dataset(self):
        train, test = gen_grid_dataset(BOX, GRID, 40, 7, seed=2)
        assert train.prices.shape == (40, 7, 9) and test.prices.shape == (7, 7, 9)
        assert np.all(train.prices > 0)
        assert np.all(np.diff(train.prices, axis=2) < 0)
        p = ModelParams.from_array(train.thetas[0])
        assert train.prices[0, 0, 0] == pytest.approx(call_price(p, ContractSpec(31.6, 1 / 12, 1 / 12, 1 / 12)), rel=1e-13)
        again, _ = gen_grid_dataset(BOX, GRID, 40, 7, seed=2)
        np.testing.assert_array_equal(train.prices, again.prices)
        assert not np.array_equal(train.thetas[:7], test.thetas)

    def test_price_floor_regenerates(self):
        # deep out of the money strikes push some prices under the floor
        grid = ContractGrid(taus=(1 / 12,), strikes=(34.0,))
        train, _ = gen_grid_dataset(BOX, grid, 50, 1, seed=0, floor=1e-3)
        assert np.all(train.prices >= 1e-3)

    def test_pointwise_dataset(self):
        train, test = gen_pointwise_dataset(BOX, n_train=60000, n_test=10, seed=1)
        assert np.all((train.taus >= 1 / 12) & (train.taus <= 1.0))
        assert np.all((train.strikes >= 31.6) & (train.strikes <= 33.2))
        rows, cols = cluster_assign(train.taus, train.strikes)
        counts = np.zeros((7, 9), int)
        np.add.at(counts, (rows, cols), 1)
        assert counts.min() >= 1
        again, _ = gen_pointwise_dataset(BOX, n_train=60000, n_test=10, seed=1)
        np.testing.assert_array_equal(train.prices, again.prices)
        assert train.inputs().shape == (60000, 9)


class TestClusters:
    def test_labels(self):
        assert cluster_assign(0.5, 31.65)[1] == 0
        assert cluster_assign(0.5, 31.7)[1] == 1
        assert cluster_assign(1.0, 33.2) == (6, 8)
        assert cluster_assign(1 / 12, 31.6) == (0, 0)
        assert cluster_assign(2 / 12, 32.0)[0] == 1

    def test_surjective(self):
        tt, kk = np.meshgrid(np.linspace(1 / 12, 1, 400), np.linspace(31.6, 33.2, 400))
        rows, cols = cluster_assign(tt.ravel(), kk.ravel())
        assert len(set(zip(rows.tolist(), cols.tolist()))) == 63

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cluster_assign(0.05, 32.0)
        with pytest.raises(ValueError):
            cluster_assign(0.5, 33.3)


def positive(net):
    """The same network with outputs lifted by 10 so that prices are positive."""
    return type(net)(net.dims, net.weights, (net.biases[0], net.biases[1] + 10.0), net.activation,
                     net.input_lo, net.input_hi)


@pytest.fixture(scope="module")
def grid_net():
    return init_network((7, 12, 63), "elu", seed=0, input_lo=BOX.lo, input_hi=BOX.hi)


class TestCalibration:
    def test_fixed_point(self, grid_net):
        # a point reachable exactly from the latent, so the residual is exactly zero
        theta = BOX.from_latent(BOX.to_latent(BOX.lo + 0.4 * (BOX.hi - BOX.lo)))
        net = positive(grid_net)
        res = calibrate_grid(net, forward(net, theta)[None], BOX, TrainingConfig(epochs=3, lr=5e-3), theta)
        assert res.loss_trace[0, 0] == 0.0
        np.testing.assert_array_equal(res.theta_hat[0], theta)

    def test_recovers_network_parameters(self, grid_net):
        rng = np.random.default_rng(0)
        truth = BOX.lo + (BOX.hi - BOX.lo) * rng.uniform(0.3, 0.7, (4, 7))
        shifted = positive(grid_net)
        obs = forward(shifted, truth)
        res = calibrate_grid(shifted, obs, BOX, TrainingConfig(epochs=400, lr=5e-3))
        assert np.all(res.loss_trace[:, -1] < res.loss_trace[:, 0])
        assert np.all(np.isfinite(res.loss_trace))
        assert np.all(BOX.contains(res.theta_hat))

    def test_runs_are_independent(self, grid_net):
        rng = np.random.default_rng(1)
        obs = np.abs(forward(grid_net, BOX.lo + (BOX.hi - BOX.lo) * rng.random((3, 7)))) + 1.0
        cfg = TrainingConfig(epochs=20, lr=5e-3, seed=4)
        together = calibrate_grid(grid_net, obs, BOX, cfg)
        alone = calibrate_grid(grid_net, obs[1:2], BOX, cfg)
        np.testing.assert_allclose(together.theta_hat[1], alone.theta_hat[0], rtol=1e-12)

    def test_bidask_already_inside(self, grid_net):
        pred = forward(grid_net, BOX.midpoint)[None]
        bid, ask = pred - 1.0, pred + 1.0
        res = calibrate_bidask(grid_net, bid, ask, BOX, TrainingConfig(epochs=5, lr=5e-3))
        assert res.loss_trace[0, 0] == 0.0
        np.testing.assert_allclose(res.theta_hat[0], BOX.midpoint, rtol=1e-14)
        assert res.mismatch_before.sum() == 0 and res.mismatch_after.sum() == 0

    def test_bidask_rejects_crossed_bands(self, grid_net):
        with pytest.raises(ValueError):
            calibrate_bidask(grid_net, np.ones((1, 63)), np.zeros((1, 63)), BOX)

    def test_pointwise_fixed_point(self):
        net = init_network((9, 8, 1), "elu", seed=1,
                           input_lo=np.r_[BOX.lo, 1 / 12, 31.6], input_hi=np.r_[BOX.hi, 1.0, 33.2])
        tt, kk = GRID.flat_points()
        theta = BOX.from_latent(BOX.to_latent(BOX.midpoint))
        prices = forward(net, np.column_stack([np.tile(theta, (63, 1)), tt, kk]))[:, 0]
        # one full batch keeps the forward pass bitwise identical to the one that made the prices
        cfg = TrainingConfig(epochs=2, batch_size=63, lr=5e-3, shuffle=False)
        res = calibrate_pointwise(net, tt[None], kk[None], prices[None], BOX, cfg, theta)
        assert res.loss_trace[0, 0] == 0.0
        np.testing.assert_array_equal(res.theta_hat[0], theta)

    def test_pointwise_near_fixed_point(self):
        # mini-batches see rounding-level residuals that Adam rescales, so only closeness holds
        net = init_network((9, 8, 1), "elu", seed=1,
                           input_lo=np.r_[BOX.lo, 1 / 12, 31.6], input_hi=np.r_[BOX.hi, 1.0, 33.2])
        tt, kk = GRID.flat_points()
        theta = BOX.midpoint
        prices = forward(net, np.column_stack([np.tile(theta, (63, 1)), tt, kk]))[:, 0]
        res = calibrate_pointwise(net, tt[None], kk[None], prices[None], BOX, TrainingConfig(epochs=5, lr=5e-3), theta)
        assert res.loss_trace[0, -1] < 1e-4
        np.testing.assert_allclose(res.theta_hat[0], theta, rtol=1e-2)

    def test_wrong_network_shape(self, grid_net):
        with pytest.raises(ValueError):
            calibrate_grid(grid_net, np.ones((1, 10)), BOX)
        with pytest.raises(ValueError):
            calibrate_pointwise(grid_net, np.ones((1, 3)), np.ones((1, 3)), np.ones((1, 3)), BOX)

    def test_default_config(self):
        assert (CALIBRATION_CONFIG.epochs, CALIBRATION_CONFIG.batch_size, CALIBRATION_CONFIG.lr) == (1000, 30, 5e-3)


class TestMetrics:
    def test_make_bidask(self):
        bid, ask = make_bidask(np.array([1.0]), 0.9, 1.1)
        np.testing.assert_allclose([bid[0], ask[0]], [0.9, 1.1])
        bid, ask = make_bidask(np.array([2.0, 3.0]), 1.0, 1.0)
        np.testing.assert_array_equal(bid, ask)
        with pytest.raises(ValueError):
            make_bidask(np.array([1.0]), 1.1, 1.2)

    def test_relative_errors(self):
        truth = np.random.default_rng(0).uniform(0.5, 2.0, (5, 7, 9))
        m = metrics(truth, truth)
        assert np.all(m["mean"] == 0) and np.all(m["max"] == 0)
        m = metrics(1.05 * truth, truth)
        np.testing.assert_allclose(m["mean"], 0.05, rtol=1e-12)
        with pytest.raises(ValueError):
            metrics(truth, np.zeros_like(truth))

    def test_aggregation_toy(self):
        truth = np.ones((3, 2))
        pred = np.array([[1.1, 1.0], [0.8, 1.0], [1.0, 1.3]])
        m = metrics(pred, truth)
        np.testing.assert_allclose(m["mean"], [0.1, 0.1])
        np.testing.assert_allclose(m["max"], [0.2, 0.3])

    def test_param_metrics(self):
        true = np.array([[0.4, 0.6, 8.5, 34.5, -1.2, 0.5, 4.8]])
        rel = param_metrics(true * 1.1, true)
        np.testing.assert_allclose(rel, 0.1)
        summary = param_summary(np.vstack([rel, 3 * rel]))
        assert list(summary) == ["a", "b", "k", "alpha0", "alpha1", "alpha2", "alpha3"]
        assert summary["k"]["mean"] == pytest.approx(0.2) and summary["k"]["median"] == pytest.approx(0.2)

    def test_mismatch_and_distance(self):
        pred = np.array([0.85, 1.0, 1.2])
        bid, ask = np.full(3, 0.9), np.full(3, 1.1)
        np.testing.assert_array_equal(mismatch(pred, bid, ask), [1, 0, 1])
        np.testing.assert_allclose(band_distance(pred, bid, ask), [0.05 / 0.9, 0.0, 0.1 / 1.1])

    def test_reshape_for_pointwise(self):
        _, test = gen_grid_dataset(BOX, GRID, 1, 3, seed=0)
        tt, kk, pp = reshape_for_pointwise(test)
        assert tt.shape == kk.shape == pp.shape == (3, 63)
        assert pp[1, 10] == test.prices[1, 1, 1]
