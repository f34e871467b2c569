"""Closed-form Black-Scholes call pricing, Greeks, implied vol and the PDE residual.

The array functions (``call_price``, ``call_greeks``) accept numpy arrays or
torch tensors so the same formulas serve scalar pricing, whole-grid evaluation
and differentiable loss terms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy import special

from .exceptions import (
    ConvergenceError,
    DegenerateInputError,
    DomainError,
    InversionDomainError,
)

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
IV_LOWER, IV_UPPER = 1e-4, 5.0


@dataclass(frozen=True)
class MarketPoint:
    """One call option observation. ``moneyness`` is K/S and is derived when omitted."""

    spot: float
    strike: float
    rate: float
    tau: float
    vol: float = 0.0
    moneyness: Optional[float] = None

    def __post_init__(self):
        if not (self.spot > 0 and self.strike > 0):
            raise DomainError(f"spot and strike must be positive, got S={self.spot}, K={self.strike}")
        if self.tau < 0:
            raise DomainError(f"time to maturity must be >= 0, got {self.tau}")
        if self.vol < 0:
            raise DomainError(f"volatility must be >= 0, got {self.vol}")
        m = self.strike / self.spot
        if self.moneyness is None:
            object.__setattr__(self, "moneyness", m)
        elif abs(self.moneyness - m) > 1e-12:
            raise DomainError(f"moneyness {self.moneyness} inconsistent with K/S = {m}")

    def with_vol(self, vol: float) -> "MarketPoint":
        return MarketPoint(self.spot, self.strike, self.rate, self.tau, vol)


@dataclass(frozen=True)
class GreeksBundle:
    price: float
    delta: float
    gamma: float
    theta_tau: float


def _is_torch(x) -> bool:
    return torch.is_tensor(x)


def norm_cdf(x):
    """Standard normal CDF through erfc, accurate in the tails."""
    if _is_torch(x):
        return 0.5 * torch.special.erfc(-x / SQRT2)
    return 0.5 * special.erfc(-np.asarray(x, dtype=np.float64) / SQRT2)


def norm_pdf(x):
    if _is_torch(x):
        return INV_SQRT_2PI * torch.exp(-0.5 * x * x)
    return INV_SQRT_2PI * np.exp(-0.5 * np.asarray(x, dtype=np.float64) ** 2)


def _ops(x):
    return (torch.log, torch.sqrt, torch.exp) if _is_torch(x) else (np.log, np.sqrt, np.exp)


def d1_d2(spot, strike, rate, tau, sigma):
    log, sqrt, _ = _ops(sigma)
    vol_sqrt_t = sigma * sqrt(tau)
    d1 = (log(spot / strike) + (rate + 0.5 * sigma * sigma) * tau) / vol_sqrt_t
    return d1, d1 - vol_sqrt_t


def call_price(spot, strike, rate, tau, sigma):
    """Vectorised closed-form call price; requires tau > 0 and sigma > 0 everywhere."""
    _, _, exp = _ops(sigma)
    d1, d2 = d1_d2(spot, strike, rate, tau, sigma)
    return spot * norm_cdf(d1) - strike * exp(-rate * tau) * norm_cdf(d2)


def call_greeks(spot, strike, rate, tau, sigma):
    """Vectorised (price, delta, gamma, theta_tau) with theta_tau = dC/dtau."""
    _, sqrt, exp = _ops(sigma)
    d1, d2 = d1_d2(spot, strike, rate, tau, sigma)
    disc = strike * exp(-rate * tau)
    nd1 = norm_cdf(d1)
    nd2 = norm_cdf(d2)
    pdf1 = norm_pdf(d1)
    sqrt_t = sqrt(tau)
    price = spot * nd1 - disc * nd2
    delta = nd1
    gamma = pdf1 / (spot * sigma * sqrt_t)
    theta_tau = spot * pdf1 * sigma / (2.0 * sqrt_t) + rate * disc * nd2
    return price, delta, gamma, theta_tau


def bs_price(point: MarketPoint) -> float:
    S, K, r, tau, sigma = point.spot, point.strike, point.rate, point.tau, point.vol
    if tau == 0.0 or sigma == 0.0:
        return max(S - K * math.exp(-r * tau), 0.0)
    return float(call_price(S, K, r, tau, sigma))


def bs_greeks(point: MarketPoint) -> GreeksBundle:
    if point.tau == 0.0 or point.vol == 0.0:
        raise DegenerateInputError(
            f"Greeks undefined at tau={point.tau}, sigma={point.vol}; use the intrinsic limits"
        )
    p, d, g, t = call_greeks(point.spot, point.strike, point.rate, point.tau, point.vol)
    return GreeksBundle(float(p), float(d), float(g), float(t))


def vega(point: MarketPoint) -> float:
    d1, _ = d1_d2(point.spot, point.strike, point.rate, point.tau, point.vol)
    return float(point.spot * norm_pdf(d1) * math.sqrt(point.tau))


def implied_vol(price: float, point: MarketPoint, tol: float = 1e-12, max_iter: int = 200) -> float:
    """Invert the call price for sigma on [1e-4, 5].

    Newton steps on vega, falling back to bisection whenever a step leaves the
    current bracket. ``point.vol`` is ignored.
    """
    S, K, r, tau = point.spot, point.strike, point.rate, point.tau
    if tau <= 0:
        raise InversionDomainError("implied vol needs tau > 0")
    lower = max(S - K * math.exp(-r * tau), 0.0)
    if not (lower < price < S):
        raise InversionDomainError(
            f"price {price} outside no-arbitrage bounds ({lower}, {S})"
        )

    def f(sig):
        return float(call_price(S, K, r, tau, sig)) - price

    lo, hi = IV_LOWER, IV_UPPER
    f_lo, f_hi = f(lo), f(hi)
    if f_lo > 0 or f_hi < 0:
        raise InversionDomainError(f"price {price} not attainable for sigma in [{lo}, {hi}]")
    if abs(f_lo) < tol:
        return lo
    if abs(f_hi) < tol:
        return hi

    # Brenner-Subrahmanyam ATM guess, kept inside the bracket
    sig = min(max(math.sqrt(2.0 * math.pi / tau) * price / S, lo), hi)
    for _ in range(max_iter):
        diff = f(sig)
        if abs(diff) < tol:
            return sig
        if diff > 0:
            hi = sig
        else:
            lo = sig
        d1, _ = d1_d2(S, K, r, tau, sig)
        v = S * float(norm_pdf(d1)) * math.sqrt(tau)
        step_ok = v > 1e-300
        if step_ok:
            candidate = sig - diff / v
            step_ok = lo < candidate < hi
        sig_new = candidate if step_ok else 0.5 * (lo + hi)
        if abs(sig_new - sig) < 1e-15 * max(1.0, sig):
            return sig_new
        sig = sig_new
    raise ConvergenceError(f"implied vol did not converge in {max_iter} iterations (price={price})")


def bs_operator(C, theta_tau, delta, gamma, spot, rate, sigma):
    """Black-Scholes operator in time-to-maturity form.

    ``-dC/dtau - rC + rS dC/dS + 0.5 sigma^2 S^2 d2C/dS2``; zero on any exact
    solution. Works elementwise on floats, arrays or tensors.
    """
    return -theta_tau - rate * C + rate * spot * delta + 0.5 * sigma * sigma * spot * spot * gamma


def pde_residual(C: float, theta_tau: float, delta: float, gamma: float, point: MarketPoint) -> float:
    return bs_operator(C, theta_tau, delta, gamma, point.spot, point.rate, point.vol)
