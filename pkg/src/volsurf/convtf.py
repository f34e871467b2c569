"""Convolutional transformer (ConvTF) for one-step-ahead surface prediction.

Feature embedding is four 3x3 convolutions raising channels to ``d``; attention is
computed per pixel across sequence slots by :class:`MultiConvAttn`; the prediction
head is either the 30-layer SFFN or a single 1x1 convolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .autodiff import DTYPE
from .exceptions import ConfigError, ShapeError

SFFN_LAYERS = 30


@dataclass(frozen=True)
class ConvTfConfig:
    window: int = 10
    in_channels: int = 1
    hidden_channels: int = 32
    heads: int = 4
    num_layers: int = 1
    embed_channels: Optional[Tuple[int, ...]] = None
    sffn_peak: int = 128
    head: str = "sffn"
    residual: bool = True

    def __post_init__(self):
        d, h = self.hidden_channels, self.heads
        if h < 1 or d % h != 0:
            raise ConfigError(f"heads ({h}) must divide hidden_channels ({d})")
        if self.num_layers < 1 or self.window < 1:
            raise ConfigError("num_layers and window must be >= 1")
        if self.head not in ("sffn", "conv"):
            raise ConfigError(f"head must be 'sffn' or 'conv', got {self.head!r}")
        sched = self.embedding_schedule
        if len(sched) != 4 or sched[-1] != d:
            raise ConfigError(f"embedding schedule {sched} must have 4 widths ending at d={d}")

    @property
    def embedding_schedule(self) -> Tuple[int, ...]:
        if self.embed_channels is not None:
            return tuple(self.embed_channels)
        d = self.hidden_channels
        if d % 8:
            raise ConfigError(f"default doubling schedule needs d divisible by 8, got {d}")
        return (d // 8, d // 4, d // 2, d)


def positional_encoding(n: int, d: int) -> torch.Tensor:
    """Sinusoidal slot encoding, shape ``(n, d)``; broadcast over pixels by the caller."""
    pos = np.arange(n)[:, None]
    idx = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / d)
    pe = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return torch.as_tensor(pe, dtype=DTYPE)


class FeatureEmbedding(nn.Module):
    def __init__(self, in_channels: int, schedule: Sequence[int]):
        super().__init__()
        widths = [in_channels, *schedule]
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, 3, padding=1, dtype=DTYPE) for a, b in zip(widths, widths[1:])
        )
        self.out_channels = widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, n, C, H, W)`` -> ``(B, n, d, H, W)`` with positional encoding added."""
        b, n, c, height, width = x.shape
        y = x.reshape(b * n, c, height, width)
        for conv in self.convs:
            y = ad.leaky_relu(ad.conv2d(y, conv.weight, conv.bias, padding=1))
        y = y.reshape(b, n, self.out_channels, height, width)
        pe = positional_encoding(n, self.out_channels)
        return y + pe[None, :, :, None, None]


def feature_embed(x: torch.Tensor, module: FeatureEmbedding) -> torch.Tensor:
    return module(x)


class MultiConvAttn(nn.Module):
    """Multi-head convolutional attention across sequence slots.

    Head ``j`` maps every input to ``d/h``-channel query and key/value maps with 3x3
    kernels ``W1``, ``W2``; the score map for slot ``i`` is
    ``leaky_relu(W3 * [Q_k; K_i])`` (one channel), softmax-normalised over slots at
    each pixel. Head outputs are concatenated back to ``d`` channels.

    ``W1``/``W2`` for all heads are stored as one ``d -> d`` convolution whose output
    channels are split head-wise; ``W3`` is a grouped convolution, one group per head.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if heads < 1 or channels % heads:
            raise ConfigError(f"heads ({heads}) must divide channels ({channels})")
        self.channels, self.heads = channels, heads
        self.head_channels = channels // heads
        self.w_query = nn.Conv2d(channels, channels, 3, padding=1, dtype=DTYPE)
        self.w_value = nn.Conv2d(channels, channels, 3, padding=1, dtype=DTYPE)
        # per head: in = [Q_j (d/h); K_j (d/h)] -> 1 score channel
        self.w_score = nn.Parameter(torch.empty(heads, 2 * self.head_channels, 3, 3, dtype=DTYPE))
        self.b_score = nn.Parameter(torch.zeros(heads, dtype=DTYPE))
        bound = 1.0 / math.sqrt(2 * self.head_channels * 9)
        with torch.no_grad():
            self.w_score.uniform_(-bound, bound)

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        ad.uniform_init_(self, generator)
        bound = 1.0 / math.sqrt(2 * self.head_channels * 9)
        with torch.no_grad():
            self.w_score.uniform_(-bound, bound, generator=generator)
            self.b_score.uniform_(-bound, bound, generator=generator)

    def forward(self, queries: torch.Tensor, keys_values: torch.Tensor, return_attention: bool = False):
        """``queries`` (B, nq, d, H, W), ``keys_values`` (B, n, d, H, W) -> (B, nq, d, H, W)."""
        if queries.dim() != 5 or keys_values.dim() != 5:
            raise ShapeError("MultiConvAttn expects 5-D (B, n, d, H, W) tensors")
        if queries.shape[2] != self.channels or keys_values.shape[2] != self.channels:
            raise ShapeError(
                f"expected {self.channels} channels, got {queries.shape[2]} / {keys_values.shape[2]}"
            )
        b, nq, d, height, width = queries.shape
        n = keys_values.shape[1]
        h, dh = self.heads, self.head_channels

        q = ad.conv2d(queries.reshape(b * nq, d, height, width), self.w_query.weight, self.w_query.bias, 1)
        kv = ad.conv2d(keys_values.reshape(b * n, d, height, width), self.w_value.weight, self.w_value.bias, 1)

        # W3 * [Q; K] = W3q * Q + W3k * K, so each (k, i) pair costs one broadcast add
        s_q = torch.nn.functional.conv2d(q, self.w_score[:, :dh], None, padding=1, groups=h)
        s_k = torch.nn.functional.conv2d(kv, self.w_score[:, dh:], self.b_score, padding=1, groups=h)
        s_q = s_q.reshape(b, nq, 1, h, height, width)
        s_k = s_k.reshape(b, 1, n, h, height, width)
        scores = ad.leaky_relu(s_q + s_k)  # (b, nq, n, h, H, W)
        attn = ad.softmax(scores, axis=2)

        v = kv.reshape(b, n, h, dh, height, width)
        out = torch.einsum("bqnhxy,bnhcxy->bqhcxy", attn, v).reshape(b, nq, d, height, width)
        if return_attention:
            return out, attn
        return out


def multi_conv_attn(queries_from: torch.Tensor, keys_values_from: torch.Tensor, module: MultiConvAttn):
    return module(queries_from, keys_values_from)


class EncoderLayer(nn.Module):
    def __init__(self, channels: int, heads: int, residual: bool = True):
        super().__init__()
        self.attn = MultiConvAttn(channels, heads)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, dtype=DTYPE)
        self.residual = residual

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a = self.attn(x, x)
        a = x + a if self.residual else a
        b, n, d, height, width = a.shape
        c = ad.leaky_relu(ad.conv2d(a.reshape(b * n, d, height, width), self.conv.weight, self.conv.bias, 1))
        c = c.reshape(a.shape)
        return a + c if self.residual else c


class DecoderLayer(nn.Module):
    def __init__(self, channels: int, heads: int, residual: bool = True):
        super().__init__()
        self.self_attn = MultiConvAttn(channels, heads)  # MultiConvAttn2
        self.cross_attn = MultiConvAttn(channels, heads)  # MultiConvAttn3
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, dtype=DTYPE)
        self.residual = residual

    def forward(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        """``query`` (B, 1, d, H, W); ``memory`` = encoder outputs (B, n, d, H, W)."""
        a = self.self_attn(query, query)
        a = query + a if self.residual else a
        c = self.cross_attn(a, memory)
        c = a + c if self.residual else c
        out = ad.leaky_relu(ad.conv2d(c[:, 0], self.conv.weight, self.conv.bias, 1)).unsqueeze(1)
        return c + out if self.residual else out


def sffn_schedule(in_channels: int, peak: int = 128, n_layers: int = SFFN_LAYERS) -> List[int]:
    """Channel widths (input first) for the SFFN: geometric rise to ``peak``, fall to 1."""
    if n_layers != SFFN_LAYERS:
        raise ConfigError(f"SFFN must have exactly {SFFN_LAYERS} layers, got {n_layers}")
    if peak < in_channels:
        raise ConfigError(f"SFFN peak width {peak} below input width {in_channels}")
    half = n_layers // 2
    up = np.rint(np.geomspace(in_channels, peak, half + 1)).astype(int).tolist()
    down = np.rint(np.geomspace(peak, 2, n_layers - half)).astype(int).tolist()[1:]
    widths = up + down + [1]
    assert len(widths) == n_layers + 1
    return widths


class SFFN(nn.Module):
    """Thirty convolutions: 3x3 + leaky ReLU, then a final linear 1x1 to one channel."""

    def __init__(self, in_channels: int, peak: int = 128, widths: Optional[Sequence[int]] = None):
        super().__init__()
        widths = list(widths) if widths is not None else sffn_schedule(in_channels, peak)
        if len(widths) - 1 != SFFN_LAYERS:
            raise ConfigError(f"SFFN schedule must define {SFFN_LAYERS} layers, got {len(widths) - 1}")
        if widths[0] != in_channels or widths[-1] != 1:
            raise ConfigError("SFFN schedule must start at the input width and end at 1")
        self.widths = widths
        layers = []
        for k, (a, b) in enumerate(zip(widths, widths[1:])):
            last = k == SFFN_LAYERS - 1
            layers.append(nn.Conv2d(a, b, 1 if last else 3, padding=0 if last else 1, dtype=DTYPE))
        self.layers = nn.ModuleList(layers)

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        # He-uniform bound keeps the activation scale roughly constant through 29 leaky layers
        he_gain = float(np.sqrt(6.0 / (1.0 + ad.LEAKY_SLOPE**2)))
        for k, conv in enumerate(self.layers):
            ad.uniform_init_(conv, generator, gain=1.0 if k == SFFN_LAYERS - 1 else he_gain)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for k, conv in enumerate(self.layers):
            last = k == SFFN_LAYERS - 1
            x = ad.conv2d(x, conv.weight, conv.bias, padding=0 if last else 1)
            if not last:
                x = ad.leaky_relu(x)
        return x


def sffn_forward(x: torch.Tensor, module: SFFN) -> torch.Tensor:
    return module(x)


class ConvTransformer(nn.Module):
    """Embedding -> encoder stack -> decoder stack -> head; ``(B, n, C, H, W) -> (B, 1, H, W)``.

    The decoder is seeded with the embedded map of the most recent slot; every
    decoder layer attends to the same encoder outputs.
    """

    def __init__(self, config: ConvTfConfig = ConvTfConfig()):
        super().__init__()
        self.config = config
        d = config.hidden_channels
        self.embed = FeatureEmbedding(config.in_channels, config.embedding_schedule)
        self.encoders = nn.ModuleList(
            EncoderLayer(d, config.heads, config.residual) for _ in range(config.num_layers)
        )
        self.decoders = nn.ModuleList(
            DecoderLayer(d, config.heads, config.residual) for _ in range(config.num_layers)
        )
        if config.head == "sffn":
            self.head = SFFN(d, config.sffn_peak)
        else:
            self.head = nn.Conv2d(d, 1, 1, dtype=DTYPE)

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        ad.uniform_init_(self, generator)
        for m in self.modules():
            if isinstance(m, (MultiConvAttn, SFFN)):
                m.reset_parameters(generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5:
            raise ShapeError(f"expected (B, n, C, H, W) input, got shape {tuple(x.shape)}")
        if x.shape[2] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {x.shape[2]}")
        e = self.embed(x)
        enc = e
        for layer in self.encoders:
            enc = layer(enc)
        dec = e[:, -1:]
        for layer in self.decoders:
            dec = layer(dec, enc)
        out = dec[:, 0]
        if isinstance(self.head, SFFN):
            return self.head(out)
        return ad.conv2d(out, self.head.weight, self.head.bias)


def convtf_forward(window: torch.Tensor, model: ConvTransformer) -> torch.Tensor:
    batched = window.dim() == 5
    out = model(window if batched else window.unsqueeze(0))
    return out if batched else out[0]
