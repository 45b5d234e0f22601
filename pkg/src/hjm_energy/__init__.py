"""Option pricing under a parametrized HJM forward-curve model and neural-network calibration."""

from .pricing import ContractSpec, MarketConfig, ModelParams, call_price, mu_drift, sigma_sq, xi_sq

__all__ = ["ContractSpec", "MarketConfig", "ModelParams", "call_price", "mu_drift", "sigma_sq", "xi_sq"]
