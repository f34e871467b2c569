"""Plain numpy reference implementations used as test oracles."""
import numpy as np


def naive_conv2d(x, k, b=None, pad=0):
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    out = np.zeros((n, o, h - kh + 1, w - kw + 1))
    for bi in range(n):
        for oi in range(o):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    out[bi, oi, i, j] = np.sum(x[bi, :, i : i + kh, j : j + kw] * k[oi])
            if b is not None:
                out[bi, oi] += b[oi]
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lrelu(x):
    return np.where(x > 0, x, 0.01 * x)


def convlstm_step(x, h, c, weight, bias):
    """Separate input and hidden kernels, as in the textbook gate equations."""
    cin = x.shape[1]
    hc = h.shape[1]
    pad = weight.shape[-1] // 2
    wx, wh = weight[:, :cin], weight[:, cin:]
    z = naive_conv2d(x, wx, None, pad) + naive_conv2d(h, wh, None, pad) + bias[None, :, None, None]
    i, f, g, o = (z[:, k * hc : (k + 1) * hc] for k in range(4))
    i, f, g, o = sigmoid(i), sigmoid(f), np.tanh(g), sigmoid(o)
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def sa_memory_step(h, m, p):
    """Per-position loops; ``p`` maps conv names to (weight, bias) numpy pairs."""
    b, c, H, W = h.shape
    n = H * W

    def c1(name, x):
        w, bb = p[name]
        return np.einsum("oc,bchw->bohw", w[:, :, 0, 0], x) + bb[None, :, None, None]

    q = c1("q", h).reshape(b, -1, n)
    kh, vh = c1("hk", h).reshape(b, -1, n), c1("hv", h).reshape(b, -1, n)
    km, vm = c1("mk", m).reshape(b, -1, n), c1("mv", m).reshape(b, -1, n)
    zh = np.zeros((b, c, n))
    zm = np.zeros((b, c, n))
    for bi in range(b):
        for i in range(n):
            e_h = np.array([q[bi, :, i] @ kh[bi, :, j] for j in range(n)])
            e_m = np.array([q[bi, :, i] @ km[bi, :, j] for j in range(n)])
            a_h = np.exp(e_h - e_h.max()); a_h /= a_h.sum()
            a_m = np.exp(e_m - e_m.max()); a_m /= a_m.sum()
            zh[bi, :, i] = vh[bi] @ a_h
            zm[bi, :, i] = vm[bi] @ a_m
    z = c1("z", np.concatenate([zh, zm], 1).reshape(b, 2 * c, H, W))
    gates = c1("gates", np.concatenate([h, z], 1))
    o, g, i = sigmoid(gates[:, :c]), np.tanh(gates[:, c : 2 * c]), sigmoid(gates[:, 2 * c :])
    m_next = (1 - i) * m + i * g
    return o * m_next, m_next


def multi_conv_attn(queries, kv, wq, bq, wv, bv, w_score, b_score, heads):
    """Explicit per-head, per-pair score convolution over the concatenation [Q_k; K_i]."""
    B, nq, d, H, W = queries.shape
    n = kv.shape[1]
    dh = d // heads
    out = np.zeros_like(queries)
    for bi in range(B):
        Q = naive_conv2d(queries[bi], wq, bq, 1)
        V = naive_conv2d(kv[bi], wv, bv, 1)
        for j in range(heads):
            sl = slice(j * dh, (j + 1) * dh)
            for k in range(nq):
                scores = np.stack([
                    lrelu(naive_conv2d(np.concatenate([Q[k, sl], V[i, sl]])[None], w_score[j][None], b_score[j : j + 1], 1)[0, 0])
                    for i in range(n)
                ])
                a = np.exp(scores - scores.max(0))
                a /= a.sum(0)
                out[bi, k, sl] = np.einsum("ixy,icxy->cxy", a, V[:, sl])
    return out
