"""Implied volatility surface forecasting with convolutional, recurrent and physics-informed models."""
from .black_scholes import MarketPoint, bs_greeks, bs_price, implied_vol, pde_residual
from .estimators import (
    ConvLSTMForecaster,
    ConvTFForecaster,
    PersistenceForecaster,
    PINNVolatilityRegressor,
    PIConvTFForecaster,
    SAConvLSTMForecaster,
)
from .surface_data import SyntheticConfig, VolSurfaceGrid, load_series, save_series, synthetic_series

__version__ = "0.1.0"

__all__ = [
    "MarketPoint", "bs_price", "bs_greeks", "implied_vol", "pde_residual",
    "ConvLSTMForecaster", "SAConvLSTMForecaster", "ConvTFForecaster", "PIConvTFForecaster",
    "PersistenceForecaster", "PINNVolatilityRegressor",
    "SyntheticConfig", "VolSurfaceGrid", "synthetic_series", "load_series", "save_series",
]
