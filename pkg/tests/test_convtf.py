import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from volsurf import autodiff as ad
from volsurf.convtf import (
    SFFN,
    SFFN_LAYERS,
    ConvTfConfig,
    ConvTransformer,
    FeatureEmbedding,
    MultiConvAttn,
    convtf_forward,
    positional_encoding,
    sffn_schedule,
)
from volsurf.exceptions import ConfigError, ShapeError

import oracles


def _attn(gen, d=4, h=2):
    mod = MultiConvAttn(d, h)
    mod.reset_parameters(gen)
    return mod


def test_multiconvattn_matches_pairwise_oracle(rng, gen):
    mod = _attn(gen)
    q = rng.standard_normal((1, 2, 4, 4, 4))
    kv = rng.standard_normal((1, 3, 4, 4, 4))
    got = mod(ad.as_tensor(q), ad.as_tensor(kv)).detach().numpy()
    p = lambda t: t.detach().numpy()  # noqa: E731
    ref = oracles.multi_conv_attn(
        q, kv, p(mod.w_query.weight), p(mod.w_query.bias), p(mod.w_value.weight), p(mod.w_value.bias),
        p(mod.w_score), p(mod.b_score), heads=2,
    )
    np.testing.assert_allclose(got, ref, atol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.1, 100.0))
def test_attention_normalised_over_slots(seed, scale):
    g = torch.Generator().manual_seed(seed)
    mod = _attn(g, d=8, h=4)
    x = torch.randn(2, 5, 8, 4, 4, generator=g, dtype=ad.DTYPE) * scale
    _, a = mod(x[:, -1:], x, return_attention=True)
    assert a.shape == (2, 1, 5, 4, 4, 4)
    assert (a.sum(2) - 1).abs().max() < 1e-10


def test_multiconvattn_rejects_bad_shapes(gen):
    mod = _attn(gen)
    with pytest.raises(ShapeError):
        mod(torch.zeros(1, 2, 3, 4, 4, dtype=ad.DTYPE), torch.zeros(1, 2, 4, 4, 4, dtype=ad.DTYPE))
    with pytest.raises(ShapeError):
        mod(torch.zeros(2, 4, 4, 4, dtype=ad.DTYPE), torch.zeros(2, 4, 4, 4, dtype=ad.DTYPE))
    with pytest.raises(ConfigError):
        MultiConvAttn(6, 4)


def test_positional_encoding_values():
    pe = positional_encoding(10, 8).numpy()
    assert pe.shape == (10, 8)
    assert pe[3, 0] == pytest.approx(math.sin(3.0))
    assert pe[3, 1] == pytest.approx(math.cos(3.0))
    assert pe[5, 2] == pytest.approx(math.sin(5 / 10000 ** (2 / 8)))
    assert pe[5, 3] == pytest.approx(math.cos(5 / 10000 ** (2 / 8)))


def test_embedding_schedule_and_pe(gen):
    cfg = ConvTfConfig(hidden_channels=32)
    assert cfg.embedding_schedule == (4, 8, 16, 32)
    emb = FeatureEmbedding(1, cfg.embedding_schedule)
    ad.uniform_init_(emb, gen)
    x = torch.zeros(1, 3, 1, 5, 5, dtype=ad.DTYPE)
    out = emb(x)
    assert out.shape == (1, 3, 32, 5, 5)
    # slot-to-slot differences on identical inputs come only from the positional encoding
    pe = positional_encoding(3, 32)
    diff = (out[0, 2] - out[0, 0])[:, 0, 0]
    assert torch.allclose(diff, pe[2] - pe[0], atol=1e-12)


def test_sffn_schedule_shape():
    w = sffn_schedule(32, 128)
    assert len(w) == SFFN_LAYERS + 1
    assert w[0] == 32 and max(w) == 128 and w[-1] == 1
    peak = w.index(128)
    assert all(a <= b for a, b in zip(w[: peak + 1], w[1 : peak + 1]))
    assert all(a >= b for a, b in zip(w[peak:], w[peak + 1 :]))
    with pytest.raises(ConfigError):
        sffn_schedule(32, 128, n_layers=12)
    with pytest.raises(ConfigError):
        sffn_schedule(32, 16)


def test_sffn_layers_and_output(gen):
    sffn = SFFN(4, peak=8)
    sffn.reset_parameters(gen)
    assert len(sffn.layers) == SFFN_LAYERS
    assert sffn.layers[-1].kernel_size == (1, 1)
    assert all(c.kernel_size == (3, 3) for c in sffn.layers[:-1])
    out = sffn(torch.randn(2, 4, 6, 6, generator=gen, dtype=ad.DTYPE))
    assert out.shape == (2, 1, 6, 6) and torch.isfinite(out).all()


def test_sffn_init_keeps_signal_alive(gen):
    sffn = SFFN(8, peak=32)
    sffn.reset_parameters(gen)
    x = torch.randn(4, 8, 10, 10, generator=gen, dtype=ad.DTYPE)
    y = x
    for conv in sffn.layers[:-1]:
        y = ad.leaky_relu(ad.conv2d(y, conv.weight, conv.bias, padding=1))
    assert 1e-2 < y.std().item() < 1e2


@pytest.mark.parametrize("head", ["sffn", "conv"])
@pytest.mark.parametrize("layers", [1, 2])
def test_convtransformer_shape(gen, head, layers):
    cfg = ConvTfConfig(window=4, in_channels=5, hidden_channels=8, heads=2, num_layers=layers, sffn_peak=8, head=head)
    model = ConvTransformer(cfg)
    model.reset_parameters(gen)
    x = torch.randn(2, 4, 5, 6, 6, generator=gen, dtype=ad.DTYPE)
    assert model(x).shape == (2, 1, 6, 6)
    assert convtf_forward(x[0], model).shape == (1, 6, 6)
    with pytest.raises(ShapeError):
        model(x[:, :, :2])


def test_convtransformer_uses_every_slot(gen):
    cfg = ConvTfConfig(window=4, hidden_channels=8, heads=2, head="conv")
    model = ConvTransformer(cfg)
    model.reset_parameters(gen)
    x = torch.randn(1, 4, 1, 5, 5, generator=gen, dtype=ad.DTYPE)
    y = x.clone()
    y[0, 0] += 1.0
    assert not torch.allclose(model(x), model(y))


def test_config_validation():
    with pytest.raises(ConfigError):
        ConvTfConfig(hidden_channels=30, heads=4)
    with pytest.raises(ConfigError):
        ConvTfConfig(head="mlp")
    with pytest.raises(ConfigError):
        ConvTfConfig(hidden_channels=12, heads=4).embedding_schedule


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_checks(seed):
    g = torch.Generator().manual_seed(seed)
    mod = _attn(g, d=4, h=2)
    kv = torch.randn(1, 2, 4, 3, 3, generator=g, dtype=ad.DTYPE)
    assert ad.grad_check(lambda q: mod(q, kv).pow(2).sum(), kv[:, -1:].clone()).passed
    assert ad.grad_check(lambda x: mod(x, x).pow(2).sum(), kv).passed
    # constant toy width: a 2-channel bottleneck can leave every leaky unit on its 0.01 branch
    sffn = SFFN(2, widths=[2] + [6] * (SFFN_LAYERS - 1) + [1])
    sffn.reset_parameters(g)
    x0 = torch.randn(1, 2, 3, 3, generator=g, dtype=ad.DTYPE)
    assert ad.grad_check(lambda x: sffn(x).sum(), x0).passed
