"""ConvLSTM and SA-ConvLSTM one-step-ahead surface forecasters."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
from torch import nn

from . import autodiff as ad
from .autodiff import DTYPE
from .exceptions import ConfigError, ShapeError


@dataclass
class ConvLstmState:
    hidden: torch.Tensor
    cell: torch.Tensor


class ConvLSTMCell(nn.Module):
    """Gates i, f, g, o from one convolution over the channel concat [X_t; H_{t-1}].

    A single kernel over the concatenation equals the separate ``W_x* X + W_h* H``
    sums of the textbook form.
    """

    def __init__(self, in_channels: int, hidden_channels: int, kernel_size: int = 3, use_bias: bool = True):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd for same padding")
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.kernel_size = kernel_size
        self.gates = nn.Conv2d(
            in_channels + hidden_channels,
            4 * hidden_channels,
            kernel_size,
            padding=kernel_size // 2,
            bias=use_bias,
            dtype=DTYPE,
        )

    def reset_forget_bias(self, value: float = 1.0) -> None:
        if self.gates.bias is not None:
            with torch.no_grad():
                hc = self.hidden_channels
                self.gates.bias.zero_()
                self.gates.bias[hc : 2 * hc] = value

    def initial_state(self, batch: int, height: int, width: int) -> ConvLstmState:
        z = torch.zeros(batch, self.hidden_channels, height, width, dtype=DTYPE)
        return ConvLstmState(z, z.clone())

    def forward(self, x: torch.Tensor, prev: ConvLstmState, return_gates: bool = False):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"cell expects {self.in_channels} input channels, got {x.shape[1]}")
        if prev.hidden.shape[-2:] != x.shape[-2:] or prev.hidden.shape[0] != x.shape[0]:
            raise ShapeError(
                f"state shape {tuple(prev.hidden.shape)} incompatible with input {tuple(x.shape)}"
            )
        z = ad.conv2d(torch.cat([x, prev.hidden], dim=1), self.gates.weight, self.gates.bias,
                      padding=self.kernel_size // 2)
        zi, zf, zg, zo = torch.chunk(z, 4, dim=1)
        i, f, g, o = ad.sigmoid(zi), ad.sigmoid(zf), ad.tanh(zg), ad.sigmoid(zo)
        c = f * prev.cell + i * g
        h = o * ad.tanh(c)
        state = ConvLstmState(h, c)
        if return_gates:
            return state, {"i": i, "f": f, "g": g, "o": o}
        return state


def convlstm_cell_step(x: torch.Tensor, prev: ConvLstmState, cell: ConvLSTMCell) -> ConvLstmState:
    return cell(x, prev)


class SelfAttentionMemory(nn.Module):
    """Self-attention memory module: global spatial attention over H and the memory M.

    All kernels are 1x1. Query/key maps have ``qk_channels`` channels; values keep
    ``hidden_channels``. Attention weights are normalised over key positions.
    """

    def __init__(self, hidden_channels: int, qk_channels: int = 8, use_bias: bool = True):
        super().__init__()
        hc = hidden_channels
        self.hidden_channels = hc
        self.qk_channels = qk_channels

        def conv1x1(cin, cout):
            return nn.Conv2d(cin, cout, 1, bias=use_bias, dtype=DTYPE)

        self.q = conv1x1(hc, qk_channels)
        self.hk = conv1x1(hc, qk_channels)
        self.hv = conv1x1(hc, hc)
        self.mk = conv1x1(hc, qk_channels)
        self.mv = conv1x1(hc, hc)
        self.z = conv1x1(2 * hc, hc)
        # [W_mho|W_mzo; W_mhg|W_mzg; W_mhi|W_mzi] fused over the concat [H_in; Z]
        self.gates = conv1x1(2 * hc, 3 * hc)

    @staticmethod
    def _apply(conv: nn.Conv2d, x: torch.Tensor) -> torch.Tensor:
        return ad.conv2d(x, conv.weight, conv.bias)

    def forward(self, h_in: torch.Tensor, m_prev: torch.Tensor, return_attention: bool = False):
        if h_in.shape != m_prev.shape:
            raise ShapeError(f"hidden {tuple(h_in.shape)} and memory {tuple(m_prev.shape)} differ")
        if h_in.shape[1] != self.hidden_channels:
            raise ShapeError(f"expected {self.hidden_channels} channels, got {h_in.shape[1]}")
        b, c, height, width = h_in.shape
        flat = lambda t: t.reshape(t.shape[0], t.shape[1], height * width)  # noqa: E731

        q = flat(self._apply(self.q, h_in))
        k_h, v_h = flat(self._apply(self.hk, h_in)), flat(self._apply(self.hv, h_in))
        k_m, v_m = flat(self._apply(self.mk, m_prev)), flat(self._apply(self.mv, m_prev))

        # scores[b, n, p] = sum_c Q[b, c, n] K[b, c, p]; softmax over key positions p
        a_h = ad.softmax(torch.einsum("bcn,bcp->bnp", q, k_h), axis=-1)
        a_m = ad.softmax(torch.einsum("bcn,bcp->bnp", q, k_m), axis=-1)
        z_h = torch.einsum("bcp,bnp->bcn", v_h, a_h)
        z_m = torch.einsum("bcp,bnp->bcn", v_m, a_m)
        zz = torch.cat([z_h, z_m], dim=1).reshape(b, 2 * c, height, width)
        z = self._apply(self.z, zz)

        zo, zg, zi = torch.chunk(self._apply(self.gates, torch.cat([h_in, z], dim=1)), 3, dim=1)
        o, g, i = ad.sigmoid(zo), ad.tanh(zg), ad.sigmoid(zi)
        m_next = (1.0 - i) * m_prev + i * g
        h_out = o * m_next
        if return_attention:
            return h_out, m_next, {"A_h": a_h, "A_m": a_m, "Q": q, "K_h": k_h, "V_h": v_h}
        return h_out, m_next


def sa_memory_step(h_in: torch.Tensor, m_prev: torch.Tensor, module: SelfAttentionMemory):
    return module(h_in, m_prev)


class RecurrentForecaster(nn.Module):
    """Stacked ConvLSTM (optionally with self-attention memory) mapping n maps to one.

    Input ``(B, n, C, H, W)``; output ``(B, 1, H, W)`` from a 1x1 projection of the
    last layer's final hidden map.
    """

    def __init__(
        self,
        in_channels: int = 1,
        hidden_channels: int = 64,
        kernel_size: int = 3,
        num_layers: int = 1,
        variant: str = "plain",
        qk_channels: int = 8,
        use_bias: bool = True,
    ):
        super().__init__()
        if num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if variant not in ("plain", "self_attention"):
            raise ConfigError(f"unknown variant {variant!r}")
        self.variant = variant
        self.cells = nn.ModuleList(
            ConvLSTMCell(in_channels if k == 0 else hidden_channels, hidden_channels, kernel_size, use_bias)
            for k in range(num_layers)
        )
        self.memories = nn.ModuleList(
            SelfAttentionMemory(hidden_channels, qk_channels, use_bias) for _ in range(num_layers)
        ) if variant == "self_attention" else None
        self.final = nn.Conv2d(hidden_channels, 1, 1, bias=True, dtype=DTYPE)

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        ad.uniform_init_(self, generator)
        for cell in self.cells:
            cell.reset_forget_bias(1.0)
        if self.memories is not None:
            for mem in self.memories:
                for conv in mem.modules():
                    if isinstance(conv, nn.Conv2d) and conv.bias is not None:
                        with torch.no_grad():
                            conv.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5:
            raise ShapeError(f"expected (B, n, C, H, W) input, got shape {tuple(x.shape)}")
        b, n, _, height, width = x.shape
        seq: List[torch.Tensor] = list(x.unbind(1))
        for layer, cell in enumerate(self.cells):
            state = cell.initial_state(b, height, width)
            memory = torch.zeros_like(state.hidden) if self.memories is not None else None
            outputs = []
            for x_t in seq:
                state = cell(x_t, state)
                if memory is not None:
                    h, memory = self.memories[layer](state.hidden, memory)
                    state = ConvLstmState(h, state.cell)
                outputs.append(state.hidden)
            seq = outputs
        return ad.conv2d(seq[-1], self.final.weight, self.final.bias)


def rollout_predict(window: torch.Tensor, model: RecurrentForecaster) -> torch.Tensor:
    """Predict the next map from a single ``(n, C, H, W)`` window (or a batch)."""
    batched = window.dim() == 5
    out = model(window if batched else window.unsqueeze(0))
    return out if batched else out[0]
