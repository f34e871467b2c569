"""Physics-informed loss for ConvTF: Black-Scholes evaluation of predicted vol grids."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .autodiff import as_tensor
from .black_scholes import bs_operator, call_greeks, call_price
from .exceptions import ConfigError, ShapeError

SIGMA_FLOOR = 1e-4
DERIVATIVE_MODES = ("pointwise_analytic", "grid_homogeneity")


@dataclass
class MarketMatrices:
    """Target-day [tau; spot; rate; strike] matrices, each ``(..., M, T)``."""

    tau: torch.Tensor
    spot: torch.Tensor
    rate: torch.Tensor
    strike: torch.Tensor

    @classmethod
    def from_array(cls, arr) -> "MarketMatrices":
        """Split a ``(4, M, T)`` or ``(B, 4, M, T)`` stack in [tau; S; r; K] order."""
        t = as_tensor(arr)
        if t.dim() not in (3, 4) or t.shape[-3] != 4:
            raise ShapeError(f"market stack must be (4, M, T) or (B, 4, M, T), got {tuple(t.shape)}")
        tau, spot, rate, strike = t.unbind(-3)
        return cls(tau, spot, rate, strike)

    def validate(self, moneyness=None, atol: float = 1e-9) -> None:
        # rates may legitimately be zero or negative; only tau, S, K must be positive
        if not all(bool((x > 0).all()) for x in (self.tau, self.spot, self.strike)):
            raise ShapeError("market matrices must have positive tau, spot and strike")
        if bool((self.tau > 1.0 + 1e-12).any()):
            raise ShapeError("tau entries must lie in (0, 1]")
        if moneyness is not None:
            m = as_tensor(moneyness).reshape(-1, 1)
            if not torch.allclose(self.strike / self.spot, m.expand_as(self.spot), rtol=0, atol=atol):
                raise ShapeError("strike/spot disagrees with the moneyness axis")


@dataclass(frozen=True)
class PhysicsLossConfig:
    lam: float = 0.1
    derivative_mode: str = "pointwise_analytic"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.derivative_mode not in DERIVATIVE_MODES:
            raise ConfigError(f"derivative_mode must be one of {DERIVATIVE_MODES}")


def _as_market(market) -> MarketMatrices:
    return market if isinstance(market, MarketMatrices) else MarketMatrices.from_array(market)


def _squeeze_sigma(sigma: torch.Tensor, market: MarketMatrices) -> torch.Tensor:
    # accept (..., 1, M, T) predictions against (..., M, T) markets
    if sigma.dim() == market.tau.dim() + 1 and sigma.shape[-3] == 1:
        sigma = sigma.squeeze(-3)
    if sigma.shape != market.tau.shape:
        raise ShapeError(f"sigma shape {tuple(sigma.shape)} != market shape {tuple(market.tau.shape)}")
    return sigma


def clamp_sigma(sigma: torch.Tensor, stats: Optional[dict] = None) -> torch.Tensor:
    if stats is not None:
        stats["clamped"] = stats.get("clamped", 0) + int((sigma < SIGMA_FLOOR).sum())
    return torch.clamp(sigma, min=SIGMA_FLOOR)


def eval_call_grid(sigma_pred, market, stats: Optional[dict] = None) -> torch.Tensor:
    """Closed-form call price per cell from that cell's (S, K, r, tau, sigma).

    Vols below 1e-4 are floored; ``stats['clamped']`` counts how many.
    """
    market = _as_market(market)
    sigma = clamp_sigma(_squeeze_sigma(as_tensor(sigma_pred) if not torch.is_tensor(sigma_pred) else sigma_pred, market), stats)
    return call_price(market.spot, market.strike, market.rate, market.tau, sigma)


def _diff1(f: torch.Tensor, x: torch.Tensor, dim: int) -> torch.Tensor:
    """First derivative along ``dim`` on a (possibly nonuniform) coordinate grid."""
    n = f.shape[dim]
    fs = lambda a, b: f.narrow(dim, a, b - a)  # noqa: E731
    xs = lambda a, b: x.narrow(dim, a, b - a)  # noqa: E731
    interior = (fs(2, n) - fs(0, n - 2)) / (xs(2, n) - xs(0, n - 2))
    first = (fs(1, 2) - fs(0, 1)) / (xs(1, 2) - xs(0, 1))
    last = (fs(n - 1, n) - fs(n - 2, n - 1)) / (xs(n - 1, n) - xs(n - 2, n - 1))
    return torch.cat([first, interior, last], dim=dim)


def _diff2(f: torch.Tensor, x: torch.Tensor, dim: int) -> torch.Tensor:
    """Second derivative; boundary cells reuse the adjacent three-point stencil."""
    n = f.shape[dim]
    fs = lambda a, b: f.narrow(dim, a, b - a)  # noqa: E731
    xs = lambda a, b: x.narrow(dim, a, b - a)  # noqa: E731
    right = (fs(2, n) - fs(1, n - 1)) / (xs(2, n) - xs(1, n - 1))
    left = (fs(1, n - 1) - fs(0, n - 2)) / (xs(1, n - 1) - xs(0, n - 2))
    interior = 2.0 * (right - left) / (xs(2, n) - xs(0, n - 2))
    return torch.cat([interior.narrow(dim, 0, 1), interior, interior.narrow(dim, n - 3, 1)], dim=dim)


def residual_grid(sigma_pred, market, derivative_mode: str = "pointwise_analytic",
                  stats: Optional[dict] = None) -> torch.Tensor:
    """Black-Scholes residual per cell of the evaluated call grid.

    ``pointwise_analytic`` uses each cell's own closed-form Greeks, so the residual
    is zero up to rounding for any positive vol grid. ``grid_homogeneity`` takes
    strike and maturity differences across the grid (rows = strike, columns =
    maturity) and maps strike derivatives to spot derivatives through degree-one
    homogeneity, so a non-flat smile leaves a nonzero residual.
    """
    market = _as_market(market)
    sigma = clamp_sigma(_squeeze_sigma(sigma_pred, market), stats)
    S, K, r, tau = market.spot, market.strike, market.rate, market.tau
    if derivative_mode == "pointwise_analytic":
        C, delta, gamma, theta = call_greeks(S, K, r, tau, sigma)
    elif derivative_mode == "grid_homogeneity":
        C = call_price(S, K, r, tau, sigma)
        c_k = _diff1(C, K, dim=-2)
        c_kk = _diff2(C, K, dim=-2)
        theta = _diff1(C, tau, dim=-1)
        delta = (C - K * c_k) / S
        gamma = K * K * c_kk / (S * S)
    else:
        raise ConfigError(f"unknown derivative_mode {derivative_mode!r}")
    return bs_operator(C, theta, delta, gamma, S, r, sigma)


def physics_loss(sigma_pred, market, config: PhysicsLossConfig = PhysicsLossConfig(),
                 stats: Optional[dict] = None) -> torch.Tensor:
    """Mean absolute PDE residual over all cells (and batch)."""
    return residual_grid(sigma_pred, market, config.derivative_mode, stats).abs().mean()


def piconvtf_loss(sigma_pred, sigma_true, market, config: PhysicsLossConfig = PhysicsLossConfig(),
                  stats: Optional[dict] = None) -> torch.Tensor:
    """Mean absolute vol error plus ``lam`` times the physics loss."""
    market = _as_market(market)
    sigma_pred = _squeeze_sigma(sigma_pred, market)
    sigma_true = _squeeze_sigma(as_tensor(sigma_true), market)
    data = (sigma_pred - sigma_true).abs().mean()
    if config.lam == 0:
        return data
    return data + config.lam * physics_loss(sigma_pred, market, config, stats)


def market_from_grid_axes(spot: float, rate: float, moneyness, maturity) -> np.ndarray:
    """Build a ``(4, M, T)`` market stack for one day from its axes."""
    m, tau = np.meshgrid(np.asarray(moneyness), np.asarray(maturity), indexing="ij")
    return np.stack([tau, np.full_like(m, spot), np.full_like(m, rate), m * spot])
