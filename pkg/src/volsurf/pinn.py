"""Vanilla PINN: price and volatility networks over (S, tau, m, r) with a PDE-residual loss."""
from __future__ import annotations

from typing import Optional, Tuple

import torch
from torch import nn

from . import autodiff as ad
from .autodiff import DTYPE
from .black_scholes import bs_operator
from .exceptions import ShapeError

N_INPUTS = 4  # columns: spot, tau, moneyness, rate


def _mlp(hidden_units: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(N_INPUTS, hidden_units, dtype=DTYPE),
        nn.Softplus(),
        nn.Linear(hidden_units, 1, dtype=DTYPE),
    )


class PinnNets(nn.Module):
    """Two single-hidden-layer softplus networks.

    Spot enters divided by ``spot_scale`` (the first training day's spot); tau,
    moneyness and rate enter raw. The price network therefore predicts the call
    price in units of ``spot_scale``. The vol head ends in a softplus.
    """

    def __init__(self, hidden_units: int = 10000, spot_scale: float = 1.0):
        super().__init__()
        self.hidden_units = hidden_units
        self.register_buffer("spot_scale", torch.tensor(float(spot_scale), dtype=DTYPE))
        self.c_net = _mlp(hidden_units)
        self.sigma_net = _mlp(hidden_units)

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        ad.uniform_init_(self, generator)

    def normalize(self, batch: torch.Tensor) -> torch.Tensor:
        if batch.dim() != 2 or batch.shape[1] != N_INPUTS:
            raise ShapeError(f"PINN input must be (B, {N_INPUTS}) rows of (S, tau, m, r), got {tuple(batch.shape)}")
        return torch.cat([batch[:, :1] / self.spot_scale, batch[:, 1:]], dim=1)

    def forward_normalized(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        c = self.c_net(z).squeeze(-1)
        sigma = ad.softplus(self.sigma_net(z).squeeze(-1))
        return c, sigma

    def forward(self, batch: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.forward_normalized(self.normalize(batch))


def pinn_forward(nets: PinnNets, batch: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return nets(batch)


def pinn_residual(nets, batch: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(residual, sigma_pred) at each row, in spot-normalised units.

    Input derivatives dC/dtau, dC/dS and d2C/dS2 come from double reverse mode on
    the price network; the residual is linear in C, so working in units of
    ``spot_scale`` only rescales it.
    """
    z = nets.normalize(batch)
    if not z.requires_grad:
        z = z.detach().requires_grad_(True)
    c, sigma = nets.forward_normalized(z)
    (grad_c,) = torch.autograd.grad(c.sum(), z, create_graph=True)
    c_s, c_tau = grad_c[:, 0], grad_c[:, 1]
    (grad_cs,) = torch.autograd.grad(c_s.sum(), z, create_graph=True)
    c_ss = grad_cs[:, 0]
    spot_n, rate = z[:, 0], z[:, 3]
    return bs_operator(c, c_tau, c_s, c_ss, spot_n, rate, sigma), sigma


def pinn_loss(nets, batch: torch.Tensor, sigma_true: torch.Tensor) -> torch.Tensor:
    """Mean |sigma_pred - sigma_true| plus mean |PDE residual|."""
    if batch.shape[0] == 0:
        raise ShapeError("empty PINN batch")
    residual, sigma = pinn_residual(nets, batch)
    return (sigma - sigma_true).abs().mean() + residual.abs().mean()
