"""Small numpy layers with explicit reverse passes (parameter gradients only matter).

Every ``*_fwd`` returns ``(output, cache)``; the matching ``*_bwd`` takes the
upstream gradient and the cache and returns the input gradient plus any
parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LN_EPS = 1e-5


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_fwd(x):
    s = sigmoid(x)
    return x * s, (x, s)


def silu_bwd(dy, cache):
    x, s = cache
    return dy * (s * (1.0 + x * (1.0 - s)))


def linear_fwd(x, W, b):
    return x @ W + b, x


def linear_bwd(dy, x, W):
    din, dout = W.shape
    x2 = x.reshape(-1, din)
    dy2 = dy.reshape(-1, dout)
    return dy @ W.T, x2.T @ dy2, dy2.sum(0)


def layernorm_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layernorm_bwd(dy, cache, g):
    xhat, inv = cache
    d = xhat.shape[-1]
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    dg = (dy * xhat).reshape(-1, d).sum(0)
    db = dy.reshape(-1, d).sum(0)
    return dx, dg, db


def mlp2_fwd(x, W1, b1, W2, b2):
    """Linear -> SiLU -> Linear."""
    h, c1 = linear_fwd(x, W1, b1)
    a, c2 = silu_fwd(h)
    y, c3 = linear_fwd(a, W2, b2)
    return y, (c1, c2, c3)


def mlp2_bwd(dy, cache, W1, W2):
    c1, c2, c3 = cache
    da, dW2, db2 = linear_bwd(dy, c3, W2)
    dh = silu_bwd(da, c2)
    dx, dW1, db1 = linear_bwd(dh, c1, W1)
    return dx, dW1, db1, dW2, db2


def gated_attention_fwd(x, Wq, Wk, Wv, Wo, bo, gate, n_heads):
    """Multi-head self-attention whose key weights are multiplied by ``gate`` and
    renormalised per query. ``x``: (B, T, d); ``gate``: (B, T), zero masks a key."""
    B, T, d = x.shape
    dh = d // n_heads
    q = (x @ Wq).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    k = (x @ Wk).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    v = (x @ Wv).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    scale = 1.0 / np.sqrt(dh)
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    g = gate[:, None, None, :]
    live = g > 0
    smax = np.where(live, s, -np.inf).max(-1, keepdims=True)
    e = np.exp(np.where(live, s - smax, -np.inf)) * g
    a = e / e.sum(-1, keepdims=True)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    y = o @ Wo + bo
    return y, (x, q, k, v, a, o, scale)


def gated_attention_bwd(dy, cache, Wq, Wk, Wv, Wo, n_heads):
    x, q, k, v, a, o, scale = cache
    B, T, d = x.shape
    dh = d // n_heads
    do, dWo, dbo = linear_bwd(dy, o, Wo)
    do = do.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (a * da).sum(-1, keepdims=True))
    ds *= scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, T, d)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    x2 = x.reshape(-1, d)
    dWq = x2.T @ dq.reshape(-1, d)
    dWk = x2.T @ dk.reshape(-1, d)
    dWv = x2.T @ dv.reshape(-1, d)
    dx = dq @ Wq.T + dk @ Wk.T + dv @ Wv.T
    return dx, dWq, dWk, dWv, dWo, dbo


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple
    bound: float
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class ParamLayout:
    """Named segments of a flat float64 parameter vector."""

    def __init__(self):
        self.segments: dict[str, Segment] = {}
        self.size = 0

    def add(self, name: str, shape, bound: float):
        if name in self.segments:
            raise ValueError(f"duplicate segment {name}")
        seg = Segment(name, tuple(shape), float(bound), self.size)
        self.segments[name] = seg
        self.size += seg.size

    def linear(self, name: str, din: int, dout: int):
        b = 1.0 / np.sqrt(din)
        self.add(f"{name}.W", (din, dout), b)
        self.add(f"{name}.b", (dout,), b)

    def mlp2(self, name: str, din: int, dhid: int, dout: int):
        self.linear(f"{name}.l1", din, dhid)
        self.linear(f"{name}.l2", dhid, dout)

    def views(self, flat: np.ndarray) -> dict:
        if flat.shape != (self.size,):
            raise ValueError(f"parameter vector has shape {flat.shape}, layout expects ({self.size},)")
        return {n: flat[s.offset:s.offset + s.size].reshape(s.shape) for n, s in self.segments.items()}

    def random_init(self, seed: int) -> np.ndarray:
        """Uniform in +-bound per segment; layer-norm gains start at 1 and shifts at 0."""
        rng = np.random.default_rng(seed)
        flat = np.empty(self.size)
        for name, seg in self.segments.items():
            sl = slice(seg.offset, seg.offset + seg.size)
            if name.endswith(".ln_g"):
                flat[sl] = 1.0
            elif name.endswith(".ln_b"):
                flat[sl] = 0.0
            else:
                flat[sl] = rng.uniform(-seg.bound, seg.bound, seg.size)
        return flat
