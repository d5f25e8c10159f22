"""Differentiable operations.

Element-wise ops broadcast only over leading axes (a bias of shape ``[d]``
against ``[B, T, d]``). The heavier primitives (conv, layer norm, recurrent
cells, attention, loss) are fused: one tape entry each with a hand-written
backward rule, checked against finite differences in the test suite.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import EvenKernel, ShapeMismatch
from .tensor import Param, Tensor, record

PROB_CLAMP = 1e-7


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only leading-axis broadcasting exists, so reducing those axes suffices
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g


def _check_trailing(a: Tensor, b: Tensor) -> None:
    n = min(a.data.ndim, b.data.ndim)
    if n and a.shape[-n:] != b.shape[-n:]:
        raise ShapeMismatch(f"incompatible shapes {a.shape} and {b.shape}")


# --------------------------------------------------------------- element-wise

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_trailing(a, b)
    out = Tensor(a.data + b.data)
    record((a, b), (out,), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_trailing(a, b)
    out = Tensor(a.data - b.data)
    record((a, b), (out,), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_trailing(a, b)
    out = Tensor(a.data * b.data)
    record((a, b), (out,),
           lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    record((a,), (out,), lambda g: (g * c,))
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor(s)
    record((a,), (out,), lambda g: (g * s * (1.0 - s),))
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    record((a,), (out,), lambda g: (g * (1.0 - y * y),))
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(a.data * mask)
    record((a,), (out,), lambda g: (g * mask,))
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum()))
    record((a,), (out,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.asarray(a.data.mean()))
    record((a,), (out,), lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),))
    return out


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not train or rate <= 0.0:
        return a
    if rng is None:
        rng = np.random.default_rng(0)
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep.astype(a.data.dtype)))


# ------------------------------------------------------------- shape plumbing

def take_time(a: Tensor, t: int) -> Tensor:
    """Select timestep ``t`` from a ``[B, T, d]`` tensor."""
    out = Tensor(a.data[:, t])

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, t] = g
        return (full,)

    record((a,), (out,), bw)
    return out


def stack_time(steps: list[Tensor]) -> Tensor:
    """Stack ``[B, d]`` tensors into ``[B, T, d]``."""
    out = Tensor(np.stack([s.data for s in steps], axis=1))
    record(tuple(steps), (out,), lambda g: tuple(g[:, i] for i in range(len(steps))))
    return out


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[..., start:stop])

    def bw(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    record((a,), (out,), bw)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    record((a,), (out,), lambda g: (g.reshape(a.shape),))
    return out


# -------------------------------------------------------------------- layers

def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` with ``x`` of shape ``[..., d_in]`` and ``w`` of shape ``[d_in, d_out]``."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"matmul {x.shape} @ {w.shape}")
    out = Tensor(x.data @ w.data)

    def bw(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        return gx, gw

    record((x, w), (out,), bw)
    return out


def dense_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map applied independently to every leading index."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense {x.shape} with W {w.shape}, b {b.shape}")
    out = Tensor(x.data @ w.data + b.data)

    def bw(g):
        gx = g @ w.data.T
        g2 = g.reshape(-1, w.shape[1])
        gw = x.data.reshape(-1, w.shape[0]).T @ g2
        return gx, gw, g2.sum(axis=0)

    record((x, w, b), (out,), bw)
    return out


def conv1d_forward(x: Tensor, kernels: Tensor, b: Tensor) -> Tensor:
    """Same-padded temporal cross-correlation.

    ``x`` is ``[T, C_in]`` or ``[B, T, C_in]``; ``kernels`` is ``[k, C_in, C_out]``.
    """
    k, c_in, c_out = kernels.shape
    if k % 2 == 0:
        raise EvenKernel(f"kernel size must be odd, got {k}")
    if x.shape[-1] != c_in or b.shape != (c_out,):
        raise ShapeMismatch(f"conv1d input {x.shape} vs kernels {kernels.shape}, bias {b.shape}")
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    bsz, steps, _ = xd.shape
    half = k // 2
    padded = np.pad(xd, ((0, 0), (half, half), (0, 0)))
    # cols[b, t, j, c] = padded[b, t + j, c]
    cols = np.stack([padded[:, j:j + steps] for j in range(k)], axis=2)
    flat_cols = cols.reshape(bsz * steps, k * c_in)
    flat_w = kernels.data.reshape(k * c_in, c_out)
    y = (flat_cols @ flat_w).reshape(bsz, steps, c_out) + b.data
    out = Tensor(y[0] if squeeze else y)

    def bw(g):
        g3 = g[None] if squeeze else g
        g2 = g3.reshape(bsz * steps, c_out)
        gw = (flat_cols.T @ g2).reshape(k, c_in, c_out)
        gcols = (g2 @ flat_w.T).reshape(bsz, steps, k, c_in)
        gpad = np.zeros_like(padded)
        for j in range(k):
            gpad[:, j:j + steps] += gcols[:, :, j]
        gx = gpad[:, half:half + steps]
        return (gx[0] if squeeze else gx), gw, g2.sum(axis=0)

    record((x, kernels, b), (out,), bw)
    return out


def layer_norm_forward(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance), then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm {x.shape} with gamma {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    record((x, gamma, beta), (out,), bw)
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign keeps exp from overflowing
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gru_cell_forward(x_t: Tensor, h_prev: Tensor, w: Tensor, u: Tensor, b: Tensor) -> Tensor:
    """One GRU step.

    ``w`` is ``[d_in, 3h]``, ``u`` is ``[h, 3h]`` and ``b`` is ``[3h]`` with gate
    blocks ordered (update z, reset r, candidate).
    """
    hdim = h_prev.shape[-1]
    if (w.shape != (x_t.shape[-1], 3 * hdim) or u.shape != (hdim, 3 * hdim)
            or b.shape != (3 * hdim,) or x_t.shape[:-1] != h_prev.shape[:-1]):
        raise ShapeMismatch(f"gru cell x {x_t.shape}, h {h_prev.shape}, W {w.shape}, U {u.shape}")
    x, h = x_t.data, h_prev.data
    gx = x @ w.data + b.data
    uz, ur, un = u.data[:, :hdim], u.data[:, hdim:2 * hdim], u.data[:, 2 * hdim:]
    z = _sigmoid(gx[..., :hdim] + h @ uz)
    r = _sigmoid(gx[..., hdim:2 * hdim] + h @ ur)
    rh = r * h
    n = np.tanh(gx[..., 2 * hdim:] + rh @ un)
    h_new = (1.0 - z) * h + z * n
    out = Tensor(h_new)

    def bw(g):
        dz = g * (n - h)
        dn = g * z
        dh = g * (1.0 - z)
        dan = dn * (1.0 - n * n)
        drh = dan @ un.T
        dar = drh * h * r * (1.0 - r)
        dh = dh + drh * r
        daz = dz * z * (1.0 - z)
        dh = dh + daz @ uz.T + dar @ ur.T
        da = np.concatenate([daz, dar, dan], axis=-1)
        da2 = da.reshape(-1, 3 * hdim)
        h2 = h.reshape(-1, hdim)
        gu = np.concatenate([h2.T @ daz.reshape(-1, hdim),
                             h2.T @ dar.reshape(-1, hdim),
                             rh.reshape(-1, hdim).T @ dan.reshape(-1, hdim)], axis=1)
        gw = x.reshape(-1, x.shape[-1]).T @ da2
        return da @ w.data.T, dh, gw, gu, da2.sum(axis=0)

    record((x_t, h_prev, w, u, b), (out,), bw)
    return out


def lstm_cell_forward(x_t: Tensor, h_prev: Tensor, c_prev: Tensor,
                      w: Tensor, u: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step; gate blocks ordered (input i, forget f, cell g, output o)."""
    hdim = h_prev.shape[-1]
    if (w.shape != (x_t.shape[-1], 4 * hdim) or u.shape != (hdim, 4 * hdim)
            or b.shape != (4 * hdim,) or c_prev.shape != h_prev.shape
            or x_t.shape[:-1] != h_prev.shape[:-1]):
        raise ShapeMismatch(f"lstm cell x {x_t.shape}, h {h_prev.shape}, W {w.shape}, U {u.shape}")
    x, h, c = x_t.data, h_prev.data, c_prev.data
    a = x @ w.data + h @ u.data + b.data
    i = _sigmoid(a[..., :hdim])
    f = _sigmoid(a[..., hdim:2 * hdim])
    gg = np.tanh(a[..., 2 * hdim:3 * hdim])
    o = _sigmoid(a[..., 3 * hdim:])
    c_new = f * c + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    h_out, c_out = Tensor(h_new), Tensor(c_new)

    def bw(gh, gc):
        do = gh * tc
        dc = gc + gh * o * (1.0 - tc * tc)
        di = dc * gg
        df = dc * c
        dg = dc * i
        da = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                             dg * (1.0 - gg * gg), do * o * (1.0 - o)], axis=-1)
        da2 = da.reshape(-1, 4 * hdim)
        gw = x.reshape(-1, x.shape[-1]).T @ da2
        gu = h.reshape(-1, hdim).T @ da2
        return da @ w.data.T, da @ u.data.T, dc * f, gw, gu, da2.sum(axis=0)

    record((x_t, h_prev, c_prev, w, u, b), (h_out, c_out), bw)
    return h_out, c_out


def attention_weights(x: np.ndarray, wq: np.ndarray, wk: np.ndarray) -> np.ndarray:
    """Row-stochastic attention matrix ``softmax(Q K^T / sqrt(d_a))``."""
    q, k = x @ wq, x @ wk
    s = np.einsum("...td,...sd->...ts", q, k) / math.sqrt(wq.shape[1])
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def self_attention_forward(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Single-head scaled dot-product self-attention over the time axis.

    ``x`` is ``[T, d]`` or ``[B, T, d]``; the projections are ``[d, d_a]``.
    """
    d = x.shape[-1]
    for p in (wq, wk, wv):
        if p.data.ndim != 2 or p.shape[0] != d or p.shape != wq.shape:
            raise ShapeMismatch(f"attention input {x.shape} with projection {p.shape}")
    xd = x.data
    da = wq.shape[1]
    sc = 1.0 / math.sqrt(da)
    q, k, v = xd @ wq.data, xd @ wk.data, xd @ wv.data
    s = np.einsum("...td,...sd->...ts", q, k) * sc
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    att = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(att @ v)

    def bw(g):
        datt = g @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(att, -1, -2) @ g
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * sc
        dq = ds @ k
        dk = np.swapaxes(ds, -1, -2) @ q
        x2 = xd.reshape(-1, d)
        gq = x2.T @ dq.reshape(-1, da)
        gk = x2.T @ dk.reshape(-1, da)
        gv = x2.T @ dv.reshape(-1, da)
        gx = dq @ wq.data.T + dk @ wk.data.T + dv @ wv.data.T
        return gx, gq, gk, gv

    record((x, wq, wk, wv), (out,), bw)
    return out


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7]."""
    yd = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=p.data.dtype)
    if yd.shape != p.shape:
        raise ShapeMismatch(f"bce probabilities {p.shape} vs labels {yd.shape}")
    pc = np.clip(p.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = max(pc.size, 1)
    loss = -(yd * np.log(pc) + (1.0 - yd) * np.log(1.0 - pc)).mean()
    out = Tensor(np.asarray(loss))
    inside = (p.data >= PROB_CLAMP) & (p.data <= 1.0 - PROB_CLAMP)

    def bw(g):
        return (g * inside * (pc - yd) / (pc * (1.0 - pc)) / n,)

    record((p,), (out,), bw)
    return out


def binary_cross_entropy(p: np.ndarray, y: np.ndarray) -> float:
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean())


__all__ = [
    "Param", "Tensor", "add", "sub", "mul", "scale", "sigmoid", "tanh", "relu",
    "sum_all", "mean_all", "dropout", "reshape", "take_time", "stack_time", "slice_last",
    "matmul", "dense_forward", "conv1d_forward", "layer_norm_forward",
    "gru_cell_forward", "lstm_cell_forward", "self_attention_forward",
    "attention_weights", "bce_loss", "binary_cross_entropy",
]
