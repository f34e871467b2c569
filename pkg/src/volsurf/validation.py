"""Array validation for the estimator API, built on sklearn's check_array."""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from sklearn.utils import check_array

from .exceptions import ShapeError


def check_windows(X) -> np.ndarray:
    """Return float64 windows shaped (N, n, C, H, W); (N, n, H, W) gains C=1."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if X.ndim == 4:
        X = X[:, :, None]
    if X.ndim != 5:
        raise ShapeError(f"windows must be (N, n, H, W) or (N, n, C, H, W), got shape {X.shape}")
    return X


def check_surface_targets(y, n_samples: int, grid_shape: Tuple[int, int]) -> np.ndarray:
    y = check_array(y, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    if y.shape != (n_samples, *grid_shape):
        raise ShapeError(f"targets must have shape {(n_samples, *grid_shape)}, got {y.shape}")
    return y


def check_market(market, n_samples: int, grid_shape: Tuple[int, int]) -> np.ndarray:
    market = check_array(market, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if market.shape != (n_samples, 4, *grid_shape):
        raise ShapeError(f"market must have shape {(n_samples, 4, *grid_shape)}, got {market.shape}")
    if (market[:, 0] <= 0).any() or (market[:, 1] <= 0).any() or (market[:, 3] <= 0).any():
        raise ShapeError("market tau, spot and strike must be positive")
    return market


def check_points(X, y: Optional[np.ndarray] = None):
    """PINN rows of (S, tau, m, r), with optional vol targets of matching length."""
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != 4:
        raise ShapeError(f"PINN inputs need 4 columns (S, tau, m, r), got {X.shape[1]}")
    if y is None:
        return X
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise ShapeError(f"{X.shape[0]} rows but {y.shape[0]} targets")
    return X, y
