"""Closed-form quantities of the parametrized HJM forward-curve model.

The model has a deterministic volatility kernel a*exp(-b x)*omega(x - y)
with a triangular weight omega, an exponential covariance kernel
exp(-k |x - y|) and a Nelson-Siegel initial curve.  Options on
forward-style swaps with delivery length ``ell`` are then priced with a
Bachelier-type formula driven by the drift ``mu`` (average of the
initial curve over the delivery window) and the integrated variance
``xi**2``.

All time quantities are in years (one month is 1/12).
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erfc

PARAM_NAMES = ("a", "b", "k", "alpha0", "alpha1", "alpha2", "alpha3")

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ParameterError(ValueError):
    """Raised when model parameters or contract features are invalid."""


@dataclass(frozen=True)
class ModelParams:
    a: float
    b: float
    k: float
    alpha0: float
    alpha1: float
    alpha2: float
    alpha3: float

    def validate(self) -> "ModelParams":
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ParameterError(f"non-finite parameter in {self}")
        if self.a < 0:
            raise ParameterError(f"a must be >= 0, got {self.a}")
        if self.b <= 0:
            raise ParameterError(f"b must be > 0, got {self.b}")
        if self.k <= 0:
            raise ParameterError(f"k must be > 0, got {self.k}")
        if self.alpha3 <= 0:
            raise ParameterError(f"alpha3 must be > 0, got {self.alpha3}")
        return self

    def check_space(self, space: "SpaceConfig") -> None:
        """Integrability conditions tying the curve-space weight to b and alpha3."""
        self.validate()
        if not space.alpha_exp < 2.0 * self.b:
            raise ParameterError(
                f"weight exponent {space.alpha_exp} must be < 2b = {2 * self.b}"
            )
        if not space.alpha_exp < 2.0 * self.alpha3:
            raise ParameterError(
                f"weight exponent {space.alpha_exp} must be < 2*alpha3 = {2 * self.alpha3}"
            )

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.a, self.b, self.k, self.alpha0, self.alpha1, self.alpha2, self.alpha3],
            dtype=float,
        )

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "ModelParams":
        values = [float(v) for v in values]
        if len(values) != 7:
            raise ParameterError(f"expected 7 parameters, got {len(values)}")
        return cls(*values)


@dataclass(frozen=True)
class ContractSpec:
    strike: float
    maturity: float
    delivery_start: float
    delivery_len: float

    def validate(self) -> "ContractSpec":
        if not self.strike > 0:
            raise ParameterError(f"strike must be > 0, got {self.strike}")
        if not self.delivery_len > 0:
            raise ParameterError(f"delivery_len must be > 0, got {self.delivery_len}")
        if self.maturity < 0:
            raise ParameterError(f"maturity must be >= 0, got {self.maturity}")
        if self.delivery_start < self.maturity:
            raise ParameterError("delivery_start must be >= maturity")
        return self


@dataclass(frozen=True)
class MarketConfig:
    eval_time: float = 0.0
    rate: float = 0.0


@dataclass(frozen=True)
class SeasonalCoefficients:
    base: float
    harmonics: tuple[tuple[float, float], ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class SpaceConfig:
    alpha_exp: float = 0.5
    gamma: float = 5.0
    tail_cutoff: float = 50.0

    def __post_init__(self) -> None:
        if not (self.alpha_exp > 0 and self.gamma > 0 and self.tail_cutoff > 0):
            raise ParameterError(f"invalid space configuration {self}")


# ---------------------------------------------------------------------------
# elementary pieces
# ---------------------------------------------------------------------------


def seasonal_a(coeffs: SeasonalCoefficients, t: float) -> float:
    """Seasonal volatility level a + sum_j (s_j sin(2 pi j t) + c_j cos(2 pi j t))."""
    value = coeffs.base
    for j, (s_j, c_j) in enumerate(coeffs.harmonics, start=1):
        value += s_j * math.sin(2.0 * math.pi * j * t) + c_j * math.cos(2.0 * math.pi * j * t)
    return value


def omega(x):
    """Triangular weight (1 - |x|) on [-1, 1], zero elsewhere."""
    return np.maximum(1.0 - np.abs(x), 0.0)


def omega_prime(x):
    """Almost-everywhere derivative of :func:`omega` (zero at the kinks 0, +-1)."""
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < 1.0, -np.sign(x), 0.0)


def cov_kernel(k: float, x, y):
    return np.exp(-k * np.abs(np.asarray(x, dtype=float) - y))


def vol_kernel(params: ModelParams, x, y):
    return params.a * np.exp(-params.b * np.asarray(x, dtype=float)) * omega(np.asarray(x) - y)


def ns_eval(params: ModelParams, x):
    """Nelson-Siegel curve alpha0 + (alpha1 + alpha2*alpha3*x) * exp(-alpha3*x)."""
    x = np.asarray(x, dtype=float)
    p = params
    return p.alpha0 + (p.alpha1 + p.alpha2 * p.alpha3 * x) * np.exp(-p.alpha3 * x)


def _ns_average(alpha0, alpha1, alpha2, alpha3, start, ell):
    # closed-form mean of the Nelson-Siegel curve over [start, start + ell]
    end = start + ell
    lead = alpha1 + alpha2
    upper = np.exp(-alpha3 * start) * (lead + alpha2 * alpha3 * start)
    lower = np.exp(-alpha3 * end) * (lead + alpha2 * alpha3 * end)
    return alpha0 + (upper - lower) / (alpha3 * ell)


def mu_drift(params: ModelParams, contract: ContractSpec, t: float = 0.0) -> float:
    """Swap forward price at time ``t``: the curve averaged over the delivery window."""
    contract.validate()
    params.validate()
    if t > contract.delivery_start:
        raise ParameterError("evaluation time after start of delivery")
    p = params
    return float(
        _ns_average(p.alpha0, p.alpha1, p.alpha2, p.alpha3, contract.delivery_start - t,
                    contract.delivery_len)
    )


# ---------------------------------------------------------------------------
# exact variance bracket
# ---------------------------------------------------------------------------
#
# With Qw(c) = (2/k) w(c) + k^-2 (e^{-k|c+1|} - 2 e^{-k|c|} + e^{-k|c-1|}) the
# noise overlap A(d) = int int w(s) w(t) exp(-k|t - s - d|) ds dt is
#   (2/k) W(d) + (2/k^3) (w(d+1) - 2 w(d) + w(d-1)) + k^-4 sum_j c_j e^{-k|d-j|}
# with W the autocorrelation of w and c = (1, -4, 6, -4, 1) at j = -2..2.
# The variance bracket is J = (1/b) int_0^ell A(d) (e^{-bd} - e^{-2b ell} e^{bd}) dd,
# integrated piece by piece in closed form.

_EXP_COEFFS = ((-2, 1.0), (-1, -4.0), (0, 6.0), (1, -4.0), (2, 1.0))

# W and the omega second-difference as cubic polynomials in d on [0,1] and [1,2]
_W_PIECES = (
    np.polynomial.Polynomial([2.0 / 3.0, 0.0, -1.0, 0.5]),
    np.polynomial.Polynomial([8.0, -12.0, 6.0, -1.0]) / 6.0,
)
_V_PIECES = (
    np.polynomial.Polynomial([-2.0, 3.0]),
    np.polynomial.Polynomial([2.0, -1.0]),
)


@lru_cache(maxsize=64)
def _shifted_pieces(m: int, start: float):
    """Cubic pieces of W and of the omega second difference re-centred at ``start``."""
    shift = np.polynomial.Polynomial([start, 1.0])
    w_loc = _W_PIECES[m](shift).coef
    v_loc = _V_PIECES[m](shift).coef
    return tuple(np.pad(w_loc, (0, 4 - len(w_loc)))), tuple(np.pad(v_loc, (0, 4 - len(v_loc))))


def _exp_moment(n: int, z):
    """int_0^1 t^n exp(z t) dt, vectorized in z."""
    z = np.asarray(z, dtype=float)
    if n == 0:
        safe = np.where(z == 0.0, 1.0, z)
        return np.where(z == 0.0, 1.0, np.expm1(safe) / safe)
    out = np.empty_like(z)
    small = np.abs(z) <= 1.0
    if np.any(small):
        zs = z[small]
        zmax = float(np.max(np.abs(zs)))
        n_terms, bound = 1, 1.0
        while bound > 1e-18 and n_terms < 40:
            bound *= zmax / n_terms
            n_terms += 1
        term = np.ones_like(zs)
        acc = term / (n + 1)
        for m in range(1, n_terms):
            term = term * zs / m
            acc = acc + term / (n + m + 1)
        out[small] = acc
    big = ~small
    if np.any(big):
        zb = z[big]
        ez = np.exp(zb)
        moment = np.expm1(zb) / zb
        for j in range(1, n + 1):
            moment = (ez - j * moment) / zb
        out[big] = moment
    return out


def _poly_exp_integral(coeffs, rate, length):
    """int_0^length (sum_n coeffs[n] t^n) exp(rate t) dt."""
    total = 0.0
    for n, c in enumerate(coeffs):
        if np.all(np.asarray(c) == 0):
            continue
        total = total + c * length ** (n + 1) * _exp_moment(n, rate * length)
    return total


def overlap_kernel(k, d):
    """Exact noise overlap int int w(v-z) e^{-k|z-y|} w(u-y) dy dz as a function of d = u - v."""
    k = np.asarray(k, dtype=float)
    d = np.abs(np.asarray(d, dtype=float))
    poly = np.zeros(np.broadcast(k, d).shape)
    w_part = np.where(d <= 1.0, _W_PIECES[0](d), np.where(d <= 2.0, _W_PIECES[1](d), 0.0))
    v_part = omega(d + 1.0) - 2.0 * omega(d) + omega(d - 1.0)
    poly = 2.0 / k * w_part + 2.0 / k**3 * v_part
    expo = sum(c * np.exp(-k * np.abs(d - j)) for j, c in _EXP_COEFFS)
    return poly + expo / k**4


def variance_bracket(b, k, ell: float):
    """J(b, k, ell) = int_[0,ell]^2 e^{-b(p+q)} A(p - q) dp dq, vectorized in (b, k).

    Sigma^2_s equals (a^2/ell^2) exp(-2b(T1 - s)) J.
    """
    b, k = np.broadcast_arrays(np.asarray(b, dtype=float), np.asarray(k, dtype=float))
    ell = float(ell)
    edges = [float(m) for m in range(int(math.ceil(ell)))] + [ell]
    total = np.zeros(b.shape)
    for start, stop in zip(edges[:-1], edges[1:]):
        length = stop - start
        if length <= 0:
            continue
        m = int(math.floor(start))
        # weight e^{-bd} - e^{-2b ell} e^{bd} with d = start + t
        weights = ((np.exp(-b * start), -b), (-np.exp(b * (start - 2.0 * ell)), b))
        if m < 2:
            w_loc, v_loc = _shifted_pieces(m, start)
            coeffs = [2.0 / k * wc + 2.0 / k**3 * vc for wc, vc in zip(w_loc, v_loc)]
            for scale, rate in weights:
                total = total + scale * _poly_exp_integral(coeffs, rate, length)
        for j, c in _EXP_COEFFS:
            if j <= m:
                e_scale, e_rate = np.exp(-k * (start - j)), -k
            else:
                e_scale, e_rate = np.exp(-k * (j - start)), k
            for scale, rate in weights:
                total = total + (c / k**4) * scale * e_scale * _poly_exp_integral(
                    [np.ones_like(b)], e_rate + rate, length
                )
    return total / b


def ibp_bracket(b, ell: float):
    """Integration-by-parts bracket that treats omega'' as zero.

    (2/3)(b^2+3)(1+e^{-2b ell}) - 2 e^{-b ell} ((b^2/6)(3(ell-2)ell^2 + 4) - 3 ell + 2).
    Ignoring the point masses of omega'' at 0 and +-1 makes this form overstate
    the variance by orders of magnitude; it is kept to reproduce price sets
    built on it (``vol_form="ibp"``).
    """
    b = np.asarray(b, dtype=float)
    return (2.0 / 3.0) * (b**2 + 3.0) * (1.0 + np.exp(-2.0 * b * ell)) - 2.0 * np.exp(
        -b * ell
    ) * ((b**2 / 6.0) * (3.0 * (ell - 2.0) * ell**2 + 4.0) - 3.0 * ell + 2.0)


def _check_vol_inputs(params: ModelParams, contract: ContractSpec) -> None:
    params.validate()
    contract.validate()


def _variance_level(a, b, k, ell, vol_form: str):
    """Factor c with Sigma^2_s = c * exp(-2b(T1 - s))."""
    if vol_form == "exact":
        return a**2 / ell**2 * variance_bracket(b, k, ell)
    if vol_form == "ibp":
        return 2.0 * a**2 / (k * b**4 * ell**2) * ibp_bracket(b, ell)
    raise ParameterError(f"unknown vol_form {vol_form!r}")


def sigma_sq(params: ModelParams, s: float, contract: ContractSpec, vol_form: str = "exact") -> float:
    """Instantaneous variance Sigma^2_s of the swap price at time ``s <= T1``."""
    _check_vol_inputs(params, contract)
    if s > contract.delivery_start:
        raise ParameterError("s must not exceed the start of delivery")
    level = _variance_level(params.a, params.b, params.k, contract.delivery_len, vol_form)
    return float(level * math.exp(-2.0 * params.b * (contract.delivery_start - s)))


def sigma_sq_ibp(params: ModelParams, s: float, contract: ContractSpec) -> float:
    return sigma_sq(params, s, contract, vol_form="ibp")


def _xi_sq_array(a, b, k, t, tau, T1, ell, vol_form="exact"):
    level = _variance_level(a, b, k, ell, vol_form)
    return level * (np.exp(-2.0 * b * (T1 - tau)) - np.exp(-2.0 * b * (T1 - t))) / (2.0 * b)


def xi_sq(params: ModelParams, t: float, tau: float, contract: ContractSpec,
          vol_form: str = "exact") -> float:
    """Integrated variance int_t^tau Sigma^2_s ds."""
    _check_vol_inputs(params, contract)
    if not t <= tau <= contract.delivery_start:
        raise ParameterError(f"need t <= tau <= T1, got t={t}, tau={tau}")
    p = params
    return float(max(_xi_sq_array(p.a, p.b, p.k, t, tau, contract.delivery_start,
                                  contract.delivery_len, vol_form), 0.0))


def xi_sq_ibp(params: ModelParams, t: float, tau: float, contract: ContractSpec) -> float:
    return xi_sq(params, t, tau, contract, vol_form="ibp")


# ---------------------------------------------------------------------------
# option price
# ---------------------------------------------------------------------------


def norm_cdf(x):
    return 0.5 * erfc(-np.asarray(x, dtype=float) / _SQRT2)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gaussian_call(mu, xi, strike, discount=1.0):
    """discount * E[max(mu + xi X - K, 0)], X standard normal; intrinsic value at xi = 0."""
    mu, xi, strike = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu, xi, strike)))
    moneyness = mu - strike
    positive = xi > 0
    safe_xi = np.where(positive, xi, 1.0)
    d = moneyness / safe_xi
    value = np.where(
        positive,
        safe_xi * norm_pdf(d) + moneyness * norm_cdf(d),
        np.maximum(moneyness, 0.0),
    )
    return discount * value


def call_price(params: ModelParams, contract: ContractSpec, market: MarketConfig = MarketConfig(),
               vol_form: str = "exact") -> float:
    params.validate()
    contract.validate()
    t, tau = market.eval_time, contract.maturity
    if tau < t:
        raise ParameterError(f"maturity {tau} before evaluation time {t}")
    mu = mu_drift(params, contract, t)
    xi = math.sqrt(xi_sq(params, t, tau, contract, vol_form))
    discount = math.exp(-market.rate * (tau - t))
    return float(gaussian_call(mu, xi, contract.strike, discount))


def _theta_columns(thetas):
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[-1] != 7:
        raise ParameterError(f"theta arrays need 7 columns, got shape {thetas.shape}")
    cols = [thetas[:, i] for i in range(7)]
    a, b, k, _, _, _, alpha3 = cols
    if np.any(a < 0) or np.any(b <= 0) or np.any(k <= 0) or np.any(alpha3 <= 0):
        raise ParameterError("theta rows violate a >= 0, b > 0, k > 0, alpha3 > 0")
    return cols


def price_surface(thetas, taus, strikes, ell: float = 1.0 / 12.0, market=MarketConfig(),
                  vol_form: str = "exact") -> np.ndarray:
    """Call prices on a (tau, K) grid with T1 = tau; shape (N, len(taus), len(strikes))."""
    a, b, k, a0, a1, a2, a3 = (c[:, None] for c in _theta_columns(thetas))
    taus = np.asarray(taus, dtype=float)[None, :]
    strikes = np.asarray(strikes, dtype=float)
    t, r = market.eval_time, market.rate
    if np.any(taus < t):
        raise ParameterError("maturity before evaluation time")
    mu = _ns_average(a0, a1, a2, a3, taus - t, ell)
    xi = np.sqrt(np.maximum(_xi_sq_array(a, b, k, t, taus, taus, ell, vol_form), 0.0))
    discount = np.exp(-r * (taus - t))
    return gaussian_call(mu[..., None], xi[..., None], strikes[None, None, :], discount[..., None])


def price_points(thetas, taus, strikes, ell: float = 1.0 / 12.0, market=MarketConfig(),
                 vol_form: str = "exact") -> np.ndarray:
    """Call prices for matched rows (theta_i, tau_i, K_i) with T1 = tau."""
    a, b, k, a0, a1, a2, a3 = _theta_columns(thetas)
    taus = np.asarray(taus, dtype=float)
    t, r = market.eval_time, market.rate
    mu = _ns_average(a0, a1, a2, a3, taus - t, ell)
    xi = np.sqrt(np.maximum(_xi_sq_array(a, b, k, t, taus, taus, ell, vol_form), 0.0))
    return gaussian_call(mu, xi, strikes, np.exp(-r * (taus - t)))
