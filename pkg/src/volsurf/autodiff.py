"""Float64 tensor primitives and a finite-difference gradient checker.

Reverse-mode differentiation is provided by torch's autograd tape; this module
pins the dtype, validates shapes with package errors, and exposes the handful of
differentiable primitives the forecasting models are assembled from.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ShapeError

DTYPE = torch.float64
LEAKY_SLOPE = 0.01

# Parameters are plain torch parameters: tensor + .grad slot, named by their module.
ParamTensor = torch.nn.Parameter


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    """Convert array-like input to a float64 tensor (no copy when already one)."""
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def conv2d(
    input: torch.Tensor,
    kernel: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    padding: int = 0,
) -> torch.Tensor:
    """2-D cross-correlation with zero padding.

    Accepts ``(C, H, W)`` or ``(B, C, H, W)`` input and an ``(O, C, kh, kw)``
    kernel. ``padding`` must be 0 or ``kh // 2`` ("same").
    """
    if kernel.dim() != 4:
        raise ShapeError(f"kernel must be 4-D (out, in, kh, kw), got shape {tuple(kernel.shape)}")
    unbatched = input.dim() == 3
    if input.dim() not in (3, 4):
        raise ShapeError(f"input must be (C,H,W) or (B,C,H,W), got shape {tuple(input.shape)}")
    x = input.unsqueeze(0) if unbatched else input
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}"
        )
    if padding not in (0, kernel.shape[2] // 2):
        raise ShapeError(f"padding must be 0 or {kernel.shape[2] // 2}, got {padding}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {tuple(bias.shape)} != ({kernel.shape[0]},)")
    out = F.conv2d(x, kernel, bias, padding=padding)
    return out.squeeze(0) if unbatched else out


def softmax(input: torch.Tensor, axis: int) -> torch.Tensor:
    if input.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    # torch subtracts the running max internally, so |x| ~ 1e3 does not overflow
    return torch.softmax(input, dim=axis)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def leaky_relu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def __bool__(self) -> bool:
        return self.passed


def grad_check(
    function: Callable[[torch.Tensor], torch.Tensor],
    point,
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare the reverse-mode gradient of a scalar function with central differences.

    The error is ``max |g_ad - g_fd|`` divided by the larger infinity norm of the
    two gradients, so near-zero components are judged against the gradient's scale
    rather than against themselves.
    """
    x = as_tensor(point).detach().clone()
    xr = x.clone().requires_grad_(True)
    out = function(xr)
    if out.numel() != 1:
        raise ShapeError(f"grad_check needs a scalar function, got output shape {tuple(out.shape)}")
    (analytic,) = torch.autograd.grad(out.reshape(()), xr, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().numpy().reshape(-1)

    # no torch.no_grad here: some functions differentiate internally (PDE residuals)
    numeric = np.empty(x.numel())
    for i in range(x.numel()):
        plus, minus = x.clone(), x.clone()
        plus.view(-1)[i] += step
        minus.view(-1)[i] -= step
        numeric[i] = (function(plus).item() - function(minus).item()) / (2.0 * step)

    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        err = 0.0
    else:
        err = float(np.max(np.abs(analytic - numeric)) / scale)
    return GradCheckReport(err, tolerance, analytic, numeric)


def uniform_init_(module: torch.nn.Module, generator: Optional[torch.Generator] = None,
                  gain: float = 1.0) -> None:
    """Re-draw every conv/linear weight and bias uniformly in +-gain/sqrt(fan_in)."""
    for sub in module.modules():
        if isinstance(sub, (torch.nn.Conv2d, torch.nn.Linear)):
            w = sub.weight
            fan_in = w[0].numel()
            bound = gain / np.sqrt(fan_in)
            with torch.no_grad():
                w.uniform_(-bound, bound, generator=generator)
                if sub.bias is not None:
                    sub.bias.uniform_(-bound, bound, generator=generator)
