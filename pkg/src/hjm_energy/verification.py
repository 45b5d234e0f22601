"""Seeded property suites comparing closed forms, quadrature and backpropagation.

Each suite returns a list of :class:`Check` records; ``passed`` is decided
against the tolerance stored on the record, so callers (the command line
and the test-suite) report the same numbers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .calibration import ThetaBox
from .network import Network, _forward_cache, grad, init_network, input_gradient, linear_embed, loss_and_dpred
from .pricing import ContractSpec, ModelParams, SpaceConfig, call_price, mu_drift, sigma_sq, xi_sq
from .quadrature import (
    QuadratureConfig,
    a_kernel,
    delivery_apply_direct,
    delivery_apply_parts,
    expected_call_quad,
    inner_alpha,
    l2_inner,
    ns_curve,
    sigma_sq_quad,
    sigma_sq_reduced,
    vol_op_adjoint,
    vol_op_curve,
)

GRID_DIMS = (7, 30, 30, 30, 63)
POINTWISE_DIMS = (9, 30, 30, 30, 1)
SUITES = ("oracle", "adjoint", "gradcheck", "linear-embed")


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tol: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tol)

    def as_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def _thetas(n: int, seed: int, box: ThetaBox = ThetaBox()) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return box.lo + (box.hi - box.lo) * rng.random((n, 7))


# ---------------------------------------------------------------------------
# pricing against quadrature
# ---------------------------------------------------------------------------


def sigma_agreement(n_theta: int = 100, seed: int = 0, s_values=(0.0, 3 / 12),
                    maturity: float = 6 / 12, ell: float = 1 / 12) -> list:
    """Worst relative gaps closed form vs four-fold quadrature vs reduced quadrature."""
    space = SpaceConfig(gamma=maturity + ell + 2.0)
    cfg = QuadratureConfig()
    closed_gap = reduced_gap = 0.0
    for row in _thetas(n_theta, seed):
        p = ModelParams.from_array(row)
        contract = ContractSpec(32.0, maturity, maturity, ell)
        for s in s_values:
            quad = sigma_sq_quad(p, s, contract, space, cfg)
            closed_gap = max(closed_gap, abs(sigma_sq(p, s, contract) - quad) / quad)
            reduced_gap = max(reduced_gap, abs(sigma_sq_reduced(p, s, contract, cfg) - quad) / quad)
    n = n_theta * len(s_values)
    return [
        Check("sigma_sq closed form vs quadrature", closed_gap, 1e-4, f"{n} cases"),
        Check("sigma_sq quadrature vs reduced", reduced_gap, 1e-6, f"{n} cases"),
    ]


def price_agreement(n_cases: int = 1000, seed: int = 1) -> list:
    rng = np.random.default_rng(seed)
    thetas = _thetas(n_cases, seed)
    taus = rng.uniform(1 / 12, 1.0, n_cases)
    strikes = rng.uniform(31.6, 33.2, n_cases)
    worst = 0.0
    for row, tau, strike in zip(thetas, taus, strikes):
        p = ModelParams.from_array(row)
        contract = ContractSpec(strike, tau, tau, 1 / 12)
        mu = mu_drift(p, contract)
        xi = math.sqrt(xi_sq(p, 0.0, tau, contract))
        ref = expected_call_quad(mu, xi, strike)
        worst = max(worst, abs(call_price(p, contract) - ref) / ref)
    return [Check("call_price vs expectation by quadrature", worst, 1e-8, f"{n_cases} cases")]


def structural_identities(n_cases: int = 20, seed: int = 2) -> list:
    rng = np.random.default_rng(seed)
    thetas = _thetas(n_cases, seed)
    additivity = delivery = kernel = 0.0
    for row in thetas:
        p = ModelParams.from_array(row)
        t1 = rng.uniform(1 / 12, 1.0)
        contract = ContractSpec(32.0, t1, t1, 1 / 12)
        t, u = sorted(rng.uniform(0.0, t1, 2))
        whole = xi_sq(p, t, t1, contract)
        parts = xi_sq(p, t, u, contract) + xi_sq(p, u, t1, contract)
        additivity = max(additivity, abs(whole - parts) / whole)
        x = rng.uniform(0.0, 2.0)
        curve = ns_curve(p)
        direct = delivery_apply_direct(curve, x, 1 / 12)
        delivery = max(delivery, abs(direct - delivery_apply_parts(curve, x, 1 / 12)) / abs(direct))
        k, v = p.k, rng.uniform(-3, 3)
        kernel = max(kernel, abs(a_kernel(k, v, v) - 4.0 / (3.0 * k)) / (4.0 / (3.0 * k)))
    return [
        Check("xi^2 interval additivity", additivity, 1e-12, f"{n_cases} cases"),
        Check("delivery averaging direct vs by parts", delivery, 1e-8, f"{n_cases} cases"),
        Check("a_kernel(u, u) = 4/(3k)", kernel, 1e-10, f"{n_cases} cases"),
    ]


def adjoint_residual(n_cases: int = 4, seed: int = 3) -> list:
    """|<sigma h, f>_alpha - <h, sigma* f>_L2| / |<sigma h, f>_alpha| for smooth test functions."""
    rng = np.random.default_rng(seed)
    space = SpaceConfig(alpha_exp=0.5, gamma=5.0, tail_cutoff=50.0)
    worst = 0.0
    for row in _thetas(n_cases, seed):
        p = ModelParams.from_array(row)
        c1, c2, w1, w2 = rng.uniform(-1, 1, 2).tolist() + rng.uniform(0.2, 2.0, 2).tolist()

        def h(y, c1=c1, c2=c2, w1=w1, w2=w2):
            return c1 * np.sin(w1 * y) + c2 * np.cos(w2 * y)

        f = ns_curve(p)
        lhs = inner_alpha(vol_op_curve(p, h, space), f, space)
        rhs = l2_inner(h, lambda y: vol_op_adjoint(p, f, y, space), space.gamma, breaks=(-1.0, 0.0, 1.0, 2.0))
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    return [Check("adjoint identity residual", worst, 1e-6, f"{n_cases} cases")]


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


def _kink_margin(net: Network, x: np.ndarray) -> float:
    _, zs = _forward_cache(net, x)
    return min(float(np.min(np.abs(z))) for z in zs[:-1])


def gradient_check(dims, activation: str, n_points: int = 100, seed: int = 4,
                   h: float = 1e-5, n_coords: int = 40, margin: float = 1e-3) -> Check:
    """Backprop vs central differences on random (network, input, coordinate) draws.

    Each draw compares ``n_coords`` random parameter coordinates plus the full
    input gradient; the error is the norm-wise relative gap.  Inputs whose
    pre-activations come within ``margin`` of a kink are redrawn.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for point in range(n_points):
        net = init_network(dims, activation, seed=int(rng.integers(2**31)))
        net = net.with_params([p + 0.05 * rng.standard_normal(p.shape) for p in net.params()])
        while True:
            x = rng.uniform(-1.0, 1.0, (3, dims[0]))
            if _kink_margin(net, x) > margin:
                break
        y = rng.standard_normal((3, dims[-1]))
        _, grads = grad(net, x, y)
        params = net.params()
        sizes = [p.size for p in params]
        flat_idx = rng.choice(sum(sizes), size=min(n_coords, sum(sizes)), replace=False)
        offsets = np.cumsum([0] + sizes)
        bp, fd = [], []
        for idx in flat_idx:
            layer = int(np.searchsorted(offsets, idx, side="right") - 1)
            local = idx - offsets[layer]
            bp.append(grads[layer].ravel()[local])
            vals = []
            for sign in (1.0, -1.0):
                shifted = [p.copy() for p in params]
                shifted[layer].ravel()[local] += sign * h
                vals.append(loss_and_dpred("mse", net.with_params(shifted)(x), y)[0])
            fd.append((vals[0] - vals[1]) / (2 * h))
        bp, fd = np.array(bp), np.array(fd)
        worst = max(worst, np.linalg.norm(bp - fd) / max(np.linalg.norm(bp), np.linalg.norm(fd), 1e-300))
        # input gradient of a random linear functional of the output
        w = rng.standard_normal((1, dims[-1]))
        gx = input_gradient(net, x[:1], w)[0]
        fdx = np.array([
            (w[0] @ net(x[0] + h * e) - w[0] @ net(x[0] - h * e)) / (2 * h)
            for e in np.eye(dims[0])
        ])
        worst = max(worst, np.linalg.norm(gx - fdx) / max(np.linalg.norm(gx), np.linalg.norm(fdx), 1e-300))
    return Check(f"gradient check {dims} {activation}", float(worst), 1e-5, f"{n_points} draws")


def gradient_checks(n_points: int = 100, seed: int = 4) -> list:
    return [
        gradient_check(GRID_DIMS, "relu", n_points, seed),
        gradient_check(POINTWISE_DIMS, "elu", n_points, seed + 1),
    ]


def embedding_check(n_matrices: int = 20, depths=(2, 3, 4), n_x: int = 1000, seed: int = 5) -> list:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_matrices):
        p, d = rng.integers(1, 6, size=2)
        A = rng.standard_normal((p, d))
        x = rng.standard_normal((n_x, d)) * 10.0
        exact = x @ A.T
        for L in depths:
            extra = rng.integers(0, 3, size=L - 1)
            dims = (d,) + tuple(int(2 * d + e) for e in extra) + (p,)
            out = linear_embed(A, L, dims)(x)
            worst = max(worst, float(np.max(np.abs(out - exact) / (1.0 + np.abs(exact))) / 1e-12))
    return [Check("linear embedding max |N(x) - Ax| / (1e-12 (1 + |Ax|))", worst, 1.0,
                  f"{n_matrices} matrices, depths {tuple(depths)}")]


def parameter_counts() -> list:
    from .network import count_params

    return [
        Check("parameter count grid architecture", abs(count_params(GRID_DIMS) - 4053), 0.0, str(GRID_DIMS)),
        Check("parameter count pointwise architecture", abs(count_params(POINTWISE_DIMS) - 2191), 0.0,
              str(POINTWISE_DIMS)),
    ]


def run_suite(name: str, seed: int = 0, quick: bool = True) -> list:
    """Run one named suite; ``quick`` uses smaller samples than the acceptance runs."""
    if name == "oracle":
        return (sigma_agreement(10 if quick else 100, seed) +
                price_agreement(200 if quick else 1000, seed + 1))
    if name == "adjoint":
        return structural_identities(20, seed + 2) + adjoint_residual(2 if quick else 4, seed + 3)
    if name == "gradcheck":
        return gradient_checks(10 if quick else 100, seed + 4) + parameter_counts()
    if name == "linear-embed":
        return embedding_check(20, (2, 3, 4), 200 if quick else 1000, seed + 5)
    if name == "all":
        return [c for suite in SUITES for c in run_suite(suite, seed, quick)]
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")
