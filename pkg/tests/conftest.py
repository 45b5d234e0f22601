from __future__ import annotations

import numpy as np
import pytest

from hjm_energy.pricing import ContractSpec, ModelParams

BOX_LO = np.array([0.2, 0.5, 8.0, 34.2, -1.5, 0.2, 4.5])
BOX_HI = np.array([0.5, 0.8, 9.0, 34.7, -1.0, 1.2, 5.0])


@pytest.fixture
def mid_params() -> ModelParams:
    return ModelParams.from_array(0.5 * (BOX_LO + BOX_HI))


@pytest.fixture
def ref_params() -> ModelParams:
    return ModelParams(0.35, 0.65, 8.5, 34.45, -1.25, 0.7, 4.75)


@pytest.fixture
def six_month() -> ContractSpec:
    return ContractSpec(strike=32.0, maturity=0.5, delivery_start=0.5, delivery_len=1 / 12)


def random_thetas(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return BOX_LO + (BOX_HI - BOX_LO) * rng.random((n, 7))
