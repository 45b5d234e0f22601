"""Synthetic datasets, network-based calibration and error metrics.

Calibration inverts a trained pricing network: the seven model parameters
are written as ``theta = lo + (hi - lo) * sigmoid(u)`` and Adam runs on the
unconstrained latent ``u``, so every iterate stays strictly inside the box.
Many independent calibrations are run at once as rows of one array; each
row's trajectory depends only on its own data and the shared seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, logit

from .network import (AdamState, Network, ShapeError, TrainingConfig, adam_step, forward,
                      input_gradient)
from .pricing import PARAM_NAMES, MarketConfig, ParameterError, price_points, price_surface

log = logging.getLogger(__name__)

TAU_EDGES = np.array([1 / 12] + [m / 12 + 1 / 24 for m in range(1, 7)] + [1.0])
STRIKE_EDGES = np.array([31.6, 31.7, 31.9, 32.1, 32.3, 32.5, 32.7, 32.9, 33.1, 33.2])
PRICE_FLOOR = 1e-6
CALIBRATION_CONFIG = TrainingConfig(epochs=1000, batch_size=30, lr=5e-3, seed=0)


@dataclass(frozen=True)
class ThetaBox:
    lower: tuple = (0.2, 0.5, 8.0, 34.2, -1.5, 0.2, 4.5)
    upper: tuple = (0.5, 0.8, 9.0, 34.7, -1.0, 1.2, 5.0)

    def __post_init__(self) -> None:
        lo, hi = self.lo, self.hi
        if lo.shape != (7,) or hi.shape != (7,):
            raise ParameterError("box bounds must be 7-vectors")
        if not np.all(lo < hi):
            raise ParameterError("box needs lower < upper in every component")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float)

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, thetas) -> np.ndarray:
        thetas = np.asarray(thetas, dtype=float)
        return np.all((thetas >= self.lo) & (thetas <= self.hi), axis=-1)

    def from_latent(self, u) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * expit(u)

    def to_latent(self, thetas) -> np.ndarray:
        frac = (np.asarray(thetas, dtype=float) - self.lo) / (self.hi - self.lo)
        if np.any((frac <= 0) | (frac >= 1)):
            raise ParameterError("initial parameters must lie strictly inside the box")
        return logit(frac)


@dataclass(frozen=True)
class ContractGrid:
    taus: tuple = (1 / 12, 2 / 12, 3 / 12, 4 / 12, 5 / 12, 6 / 12, 1.0)
    strikes: tuple = (31.6, 31.8, 32.0, 32.2, 32.4, 32.6, 32.8, 33.0, 33.2)
    delivery_len: float = 1 / 12

    def __post_init__(self) -> None:
        for axis in (self.tau_array, self.strike_array):
            if axis.size < 1 or np.any(np.diff(axis) <= 0):
                raise ParameterError("grid axes must be strictly increasing")
        if self.delivery_len <= 0:
            raise ParameterError("delivery_len must be > 0")

    @property
    def tau_array(self) -> np.ndarray:
        return np.asarray(self.taus, dtype=float)

    @property
    def strike_array(self) -> np.ndarray:
        return np.asarray(self.strikes, dtype=float)

    @property
    def shape(self) -> tuple:
        return (len(self.taus), len(self.strikes))

    @property
    def size(self) -> int:
        return len(self.taus) * len(self.strikes)

    def flat_points(self) -> tuple[np.ndarray, np.ndarray]:
        """(tau, strike) for every cell in tau-major order."""
        tt, kk = np.meshgrid(self.tau_array, self.strike_array, indexing="ij")
        return tt.ravel(), kk.ravel()

    def prices(self, thetas, vol_form: str = "exact") -> np.ndarray:
        return price_surface(np.atleast_2d(thetas), self.tau_array, self.strike_array,
                             self.delivery_len, MarketConfig(), vol_form)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def sample_theta(box: ThetaBox, n: int, grid_points_per_dim: Optional[int] = None,
                 seed=0) -> np.ndarray:
    """Parameter rows (n, 7) taken from a uniform grid in each coordinate.

    With ``grid_points_per_dim`` equal to ``n`` (the default) every coordinate
    is an independent permutation of its grid; otherwise indices are drawn
    independently with replacement.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    g = max(n, 2) if grid_points_per_dim is None else int(grid_points_per_dim)
    if g < 2:
        raise ValueError("grid_points_per_dim must be >= 2")
    rng = np.random.default_rng(seed)
    frac = np.linspace(0.0, 1.0, g)
    cols = [frac[rng.permutation(n) if g == n else rng.integers(0, g, size=n)] for _ in range(7)]
    return box.lo + (box.hi - box.lo) * np.stack(cols, axis=1)


@dataclass(frozen=True, eq=False)
class GridDataset:
    thetas: np.ndarray  # (N, 7)
    prices: np.ndarray  # (N, n_tau, n_strike)
    grid: ContractGrid

    def __len__(self) -> int:
        return self.thetas.shape[0]

    def flat_prices(self) -> np.ndarray:
        return self.prices.reshape(len(self), -1)


@dataclass(frozen=True, eq=False)
class PointwiseDataset:
    thetas: np.ndarray  # (N, 7)
    taus: np.ndarray
    strikes: np.ndarray
    prices: np.ndarray

    def __len__(self) -> int:
        return self.thetas.shape[0]

    def inputs(self) -> np.ndarray:
        return np.column_stack([self.thetas, self.taus, self.strikes])


def _floored(draw, n, floor, rng_seed):
    """Draw n samples, replacing any whose smallest price is below ``floor``."""
    seq = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    thetas, extra, prices = draw(n, seq.spawn(1)[0])
    rounds = 0
    while True:
        bad = np.flatnonzero(prices.reshape(n, -1).min(axis=1) < floor)
        if bad.size == 0:
            return thetas, extra, prices
        rounds += 1
        if rounds > 100:
            raise RuntimeError("could not draw samples above the price floor")
        log.info("regenerating %d samples below the price floor %.1e", bad.size, floor)
        t2, e2, p2 = draw(bad.size, seq.spawn(1)[0])
        thetas[bad] = t2
        prices[bad] = p2
        if extra is not None:
            for arr, new in zip(extra, e2):
                arr[bad] = new


def gen_grid_dataset(box: ThetaBox = ThetaBox(), grid: ContractGrid = ContractGrid(),
                     n_train: int = 40000, n_test: int = 4000, seed: int = 0,
                     vol_form: str = "exact", floor: float = PRICE_FLOOR,
                     grid_points_per_dim: Optional[int] = None):
    """Train and test price grids from independent child seeds of ``seed``."""
    out = []
    for child, n in zip(np.random.SeedSequence(seed).spawn(2), (n_train, n_test)):
        def draw(m, s):
            th = sample_theta(box, m, grid_points_per_dim, s)
            return th, None, grid.prices(th, vol_form)

        thetas, _, prices = _floored(draw, n, floor, child)
        out.append(GridDataset(thetas, prices, grid))
    return out[0], out[1]


def gen_pointwise_dataset(box: ThetaBox = ThetaBox(),
                          lambda_ranges=((1 / 12, 1.0), (31.6, 33.2)),
                          n_train: int = 60000, n_test: int = 6000, seed: int = 0,
                          delivery_len: float = 1 / 12, vol_form: str = "exact",
                          floor: float = PRICE_FLOOR,
                          grid_points_per_dim: Optional[int] = None):
    """Samples pairing independent parameters with uniform (tau, K) in the given ranges."""
    (t_lo, t_hi), (k_lo, k_hi) = lambda_ranges
    if not (0 < t_lo < t_hi and k_lo < k_hi):
        raise ParameterError("invalid contract ranges")
    out = []
    for child, n in zip(np.random.SeedSequence(seed).spawn(2), (n_train, n_test)):
        def draw(m, s):
            s_theta, s_lam = s.spawn(2)
            th = sample_theta(box, m, grid_points_per_dim, s_theta)
            rng = np.random.default_rng(s_lam)
            tau = rng.uniform(t_lo, t_hi, m)
            strike = rng.uniform(k_lo, k_hi, m)
            return th, (tau, strike), price_points(th, tau, strike, delivery_len, vol_form=vol_form)

        thetas, (tau, strike), prices = _floored(draw, n, floor, child)
        out.append(PointwiseDataset(thetas, tau, strike, prices))
    return out[0], out[1]


def cluster_assign(tau, strike) -> tuple[np.ndarray, np.ndarray]:
    """Row and column labels on the contract grid for arbitrary (tau, K) pairs."""
    tau, strike = np.asarray(tau, dtype=float), np.asarray(strike, dtype=float)
    if np.any((tau < TAU_EDGES[0]) | (tau > TAU_EDGES[-1])):
        raise ValueError("maturity outside the labelled range")
    if np.any((strike < STRIKE_EDGES[0]) | (strike > STRIKE_EDGES[-1])):
        raise ValueError("strike outside the labelled range")
    row = np.minimum(np.searchsorted(TAU_EDGES, tau, side="right") - 1, len(TAU_EDGES) - 2)
    col = np.minimum(np.searchsorted(STRIKE_EDGES, strike, side="right") - 1, len(STRIKE_EDGES) - 2)
    return row, col


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    """Outcome of R independent calibrations, one per row."""

    theta_hat: np.ndarray  # (R, 7)
    loss_trace: np.ndarray  # (R, epochs + 1); entry 0 is the loss at the initial point
    net_prices: np.ndarray  # network prices at theta_hat, shaped like the observations
    param_rel_err: Optional[np.ndarray] = None
    price_rel_err: Optional[np.ndarray] = None
    mismatch_before: Optional[np.ndarray] = None
    mismatch_after: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    def with_truth(self, theta_true=None, true_prices=None) -> "CalibrationResult":
        kw = dict(self.__dict__)
        if theta_true is not None:
            kw["param_rel_err"] = param_metrics(self.theta_hat, theta_true)
        if true_prices is not None:
            kw["price_rel_err"] = relative_errors(self.net_prices, true_prices)
        return CalibrationResult(**kw)


def _init_latent(box: ThetaBox, init, n_runs: int) -> np.ndarray:
    theta0 = box.midpoint if init is None else np.asarray(init, dtype=float)
    return np.broadcast_to(box.to_latent(theta0), (n_runs, 7)).copy()


def _run_adam(n_runs, n_cells, batch_loss, box, init, cfg):
    """Shared loop: ``batch_loss(theta, idx)`` returns per-run loss (R,) and dL/dtheta (R, 7)."""
    u = _init_latent(box, init, n_runs)
    state = AdamState.zeros_like([u], lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    all_cells = np.arange(n_cells)
    trace = np.empty((n_runs, cfg.epochs + 1))
    trace[:, 0] = batch_loss(box.from_latent(u), all_cells)[0]
    span = box.hi - box.lo
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_cells) if cfg.shuffle else all_cells
        for start in range(0, n_cells, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            sig = expit(u)
            _, g_theta = batch_loss(box.lo + span * sig, idx)
            g_u = g_theta * span * sig * (1.0 - sig)
            (u,), state = adam_step([u], [g_u], state)
        trace[:, epoch + 1] = batch_loss(box.from_latent(u), all_cells)[0]
        if not np.all(np.isfinite(trace[:, epoch + 1])):
            raise FloatingPointError(f"non-finite calibration loss at epoch {epoch}")
    return box.from_latent(u), trace


def _grid_objective(net: Network, target, kind: str):
    def batch_loss(theta, idx):
        pred = forward(net, theta)[:, idx]
        tgt = target[:, idx] if kind == "mse" else (target[0][:, idx], target[1][:, idx])
        loss, d_cells = _per_run_loss(kind, pred, tgt)
        dpred = np.zeros((theta.shape[0], net.dims[-1]))
        dpred[:, idx] = d_cells
        return loss, input_gradient(net, theta, dpred)

    return batch_loss


def _per_run_loss(kind, pred, tgt):
    """Row-wise mean loss and the derivative of each row's loss with respect to pred."""
    if kind == "mse":
        r = pred - tgt
    else:
        bid, ask = tgt
        r = np.where(pred < bid, pred - bid, 0.0) + np.where(pred > ask, pred - ask, 0.0)
    m = pred.shape[1]
    return np.mean(r * r, axis=1), 2.0 * r / m


def _check_grid_net(net: Network, grid_size: int):
    if net.dims[0] != 7 or net.dims[-1] != grid_size:
        raise ShapeError(f"grid calibration needs a (7, ..., {grid_size}) network, got {net.dims}")


def calibrate_grid(net: Network, observed, box: ThetaBox = ThetaBox(),
                   cfg: TrainingConfig = CALIBRATION_CONFIG, init=None) -> CalibrationResult:
    """Fit parameters so that net(theta) matches each row of ``observed`` (R, 63)."""
    obs = np.atleast_2d(np.asarray(observed, dtype=float))
    obs = obs.reshape(obs.shape[0], -1)
    _check_grid_net(net, obs.shape[1])
    if np.any(obs <= 0):
        raise ValueError("observed prices must be positive")
    theta, trace = _run_adam(obs.shape[0], obs.shape[1], _grid_objective(net, obs, "mse"),
                             box, init, cfg)
    return CalibrationResult(theta, trace, forward(net, theta))


def calibrate_bidask(net: Network, bid, ask, box: ThetaBox = ThetaBox(),
                     cfg: TrainingConfig = CALIBRATION_CONFIG, init=None) -> CalibrationResult:
    """Fit parameters so that net(theta) falls inside each [bid, ask] band."""
    bid = np.atleast_2d(np.asarray(bid, dtype=float))
    ask = np.atleast_2d(np.asarray(ask, dtype=float))
    bid, ask = bid.reshape(bid.shape[0], -1), ask.reshape(ask.shape[0], -1)
    if bid.shape != ask.shape:
        raise ShapeError("bid and ask shapes differ")
    if np.any(bid > ask):
        raise ValueError("bid exceeds ask")
    _check_grid_net(net, bid.shape[1])
    n_runs = bid.shape[0]
    theta0 = np.broadcast_to(box.midpoint if init is None else np.asarray(init, float), (n_runs, 7))
    before = mismatch(forward(net, theta0), bid, ask)
    theta, trace = _run_adam(n_runs, bid.shape[1], _grid_objective(net, (bid, ask), "bidask"),
                             box, init, cfg)
    pred = forward(net, theta)
    return CalibrationResult(theta, trace, pred, mismatch_before=before,
                             mismatch_after=mismatch(pred, bid, ask))


def calibrate_pointwise(net: Network, taus, strikes, prices, box: ThetaBox = ThetaBox(),
                        cfg: TrainingConfig = CALIBRATION_CONFIG, init=None) -> CalibrationResult:
    """Fit parameters so that net(theta, tau_i, K_i) matches prices_i; arrays are (R, N_cal)."""
    taus, strikes, prices = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (taus, strikes, prices))
    if not (taus.shape == strikes.shape == prices.shape):
        raise ShapeError("taus, strikes and prices must have the same shape")
    if net.dims[0] != 9 or net.dims[-1] != 1:
        raise ShapeError(f"pointwise calibration needs a (9, ..., 1) network, got {net.dims}")
    n_runs, n_cal = prices.shape

    def net_prices(theta, idx):
        m = idx.size
        x = np.concatenate([np.repeat(theta[:, None, :], m, axis=1),
                            taus[:, idx, None], strikes[:, idx, None]], axis=2)
        return x.reshape(-1, 9)

    def batch_loss(theta, idx):
        x = net_prices(theta, idx)
        pred = forward(net, x).reshape(n_runs, idx.size)
        loss, dpred = _per_run_loss("mse", pred, prices[:, idx])
        gx = input_gradient(net, x, dpred.reshape(-1, 1)).reshape(n_runs, idx.size, 9)
        return loss, gx[:, :, :7].sum(axis=1)

    theta, trace = _run_adam(n_runs, n_cal, batch_loss, box, init, cfg)
    all_cells = np.arange(n_cal)
    pred = forward(net, net_prices(theta, all_cells)).reshape(n_runs, n_cal)
    return CalibrationResult(theta, trace, pred)


# ---------------------------------------------------------------------------
# bands and metrics
# ---------------------------------------------------------------------------


def make_bidask(prices, spread_lo: float = 0.9, spread_hi: float = 1.1):
    if not (0 < spread_lo <= 1 <= spread_hi):
        raise ValueError("need 0 < spread_lo <= 1 <= spread_hi")
    prices = np.asarray(prices, dtype=float)
    return spread_lo * prices, spread_hi * prices


def mismatch(pred, bid, ask) -> np.ndarray:
    """1.0 where a prediction lies outside its band, else 0.0."""
    pred = np.asarray(pred, dtype=float)
    return ((pred < bid) | (pred > ask)).astype(float)


def band_distance(pred, bid, ask) -> np.ndarray:
    """Relative distance of each prediction outside its band to the nearest edge (0 inside)."""
    pred, bid, ask = (np.asarray(v, dtype=float) for v in (pred, bid, ask))
    below = np.where(pred < bid, (bid - pred) / bid, 0.0)
    above = np.where(pred > ask, (pred - ask) / ask, 0.0)
    return below + above


def relative_errors(predicted, truth) -> np.ndarray:
    predicted, truth = np.asarray(predicted, dtype=float), np.asarray(truth, dtype=float)
    if np.any(truth == 0):
        raise ValueError("relative error undefined for zero truth values")
    return np.abs(predicted - truth) / np.abs(truth)


def metrics(predicted, truth) -> dict:
    """Per-cell mean and max relative error over the leading (sample) axis."""
    rel = relative_errors(predicted, truth)
    return {"mean": rel.mean(axis=0), "max": rel.max(axis=0)}


def param_metrics(theta_hat, theta_true) -> np.ndarray:
    """|theta_hat - theta| / |theta| per parameter, row by row."""
    return relative_errors(theta_hat, theta_true)


def param_summary(rel_err) -> dict:
    rel_err = np.atleast_2d(rel_err)
    mean, median = rel_err.mean(axis=0), np.median(rel_err, axis=0)
    return {name: {"mean": float(mean[i]), "median": float(median[i])}
            for i, name in enumerate(PARAM_NAMES)}


def reshape_for_pointwise(dataset: GridDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grid samples as (R, 63) arrays of tau, strike and price for pointwise calibration."""
    tt, kk = dataset.grid.flat_points()
    n = len(dataset)
    return np.tile(tt, (n, 1)), np.tile(kk, (n, 1)), dataset.flat_prices()
