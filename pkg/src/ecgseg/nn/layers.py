"""Layer forward/backward passes on ``[batch, time, features]`` arrays.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes that cache and the upstream gradient and returns the input gradient
plus a dict of parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

PROB_FLOOR = 1e-12


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected [T, C] or [B, T, C] input, got shape {x.shape}")
    return x, False


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


# ----------------------------------------------------------------- Conv1D


def same_padding(kernel_size: int) -> tuple[int, int]:
    """Zeros added (left, right) so output length equals input length."""
    left = (kernel_size - 1) // 2
    return left, kernel_size - 1 - left


@dataclass
class Conv1DLayer:
    kernel: np.ndarray  # [M, in_channels, out_channels]
    bias: np.ndarray  # [out_channels]
    activation: str = "relu"

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[0]


def conv1d_forward(layer: Conv1DLayer, x: np.ndarray):
    """``a[t, i] = act(b[i] + sum_k sum_c w[k, c, i] * x[t + k - left, c])`` with zero padding."""
    xb, squeeze = _as_batch(x)
    m, cin, cout = layer.kernel.shape
    if xb.shape[2] != cin:
        raise ValueError(f"conv1d: input has {xb.shape[2]} channels, kernel expects {cin}")
    bsz, t, _ = xb.shape
    left, right = same_padding(m)
    xp = np.pad(xb, ((0, 0), (left, right), (0, 0)))
    cols = np.stack([xp[:, k : k + t, :] for k in range(m)], axis=2).reshape(bsz * t, m * cin)
    z = cols @ layer.kernel.reshape(m * cin, cout) + layer.bias
    if layer.activation == "relu":
        a = relu(z)
    elif layer.activation in ("linear", "identity"):
        a = z
    elif layer.activation == "tanh":
        a = np.tanh(z)
    else:
        raise ValueError(f"unknown activation {layer.activation!r}")
    a = a.reshape(bsz, t, cout)
    cache = (layer, cols, z, xb.shape)
    return (a[0] if squeeze else a), cache


def conv1d_backward(cache, da: np.ndarray):
    layer, cols, z, in_shape = cache
    m, cin, cout = layer.kernel.shape
    bsz, t, _ = in_shape
    dz = np.asarray(da).reshape(bsz * t, cout)
    if layer.activation == "relu":
        dz = dz * (z > 0)
    elif layer.activation == "tanh":
        dz = dz * (1 - np.tanh(z) ** 2)
    dw = (cols.T @ dz).reshape(m, cin, cout)
    db = dz.sum(axis=0)
    dcols = (dz @ layer.kernel.reshape(m * cin, cout).T).reshape(bsz, t, m, cin)
    left, right = same_padding(m)
    dxp = np.zeros((bsz, t + left + right, cin), dtype=dz.dtype)
    for k in range(m):
        dxp[:, k : k + t, :] += dcols[:, :, k, :]
    dx = dxp[:, left : left + t, :]
    if np.asarray(da).ndim == 2:
        dx = dx[0]
    return dx, {"w": dw, "b": db}


# ------------------------------------------------------------------- LSTM


@dataclass
class LstmCell:
    """Gate blocks are packed along the last axis in the order f, i, c~, o.

    ``U`` multiplies the layer input, ``W`` the previous hidden state.
    """

    U: np.ndarray  # [d, 4n]
    W: np.ndarray  # [n, 4n]
    b: np.ndarray  # [4n]

    @property
    def n_units(self) -> int:
        return self.W.shape[0]


def lstm_step(cell: LstmCell, a_n: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
    n = cell.n_units
    if a_n.shape[-1] != cell.U.shape[0] or h_prev.shape[-1] != n or c_prev.shape[-1] != n:
        raise ValueError("lstm_step: input/state shapes do not match the cell")
    z = a_n @ cell.U + h_prev @ cell.W + cell.b
    f = sigmoid(z[..., :n])
    i = sigmoid(z[..., n : 2 * n])
    g = np.tanh(z[..., 2 * n : 3 * n])
    o = sigmoid(z[..., 3 * n :])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def lstm_forward(cell: LstmCell, x: np.ndarray):
    """Unroll one direction over ``x`` [B, T, d] from zero state."""
    bsz, t, d = x.shape
    if d != cell.U.shape[0]:
        raise ValueError(f"lstm: input has {d} features, cell expects {cell.U.shape[0]}")
    n = cell.n_units
    dtype = np.result_type(x, cell.W)
    zx = (x.reshape(bsz * t, d) @ cell.U + cell.b).reshape(bsz, t, 4 * n)
    gates = np.empty((bsz, t, 4 * n), dtype=dtype)
    cs = np.empty((bsz, t, n), dtype=dtype)
    hs = np.empty((bsz, t, n), dtype=dtype)
    h = np.zeros((bsz, n), dtype=dtype)
    c = np.zeros((bsz, n), dtype=dtype)
    for step in range(t):
        z = zx[:, step] + h @ cell.W
        g = gates[:, step]
        g[:, : 2 * n] = sigmoid(z[:, : 2 * n])
        g[:, 2 * n : 3 * n] = np.tanh(z[:, 2 * n : 3 * n])
        g[:, 3 * n :] = sigmoid(z[:, 3 * n :])
        c = g[:, :n] * c + g[:, n : 2 * n] * g[:, 2 * n : 3 * n]
        h = g[:, 3 * n :] * np.tanh(c)
        cs[:, step] = c
        hs[:, step] = h
    return hs, (cell, x, gates, cs, hs)


def lstm_backward(cache, dh_seq: np.ndarray):
    cell, x, gates, cs, hs = cache
    bsz, t, d = x.shape
    n = cell.n_units
    dz_all = np.empty_like(gates)
    dh_next = np.zeros((bsz, n), dtype=gates.dtype)
    dc_next = np.zeros((bsz, n), dtype=gates.dtype)
    zero = np.zeros((bsz, n), dtype=gates.dtype)
    wt = cell.W.T
    for step in range(t - 1, -1, -1):
        g = gates[:, step]
        f, i, cand, o = g[:, :n], g[:, n : 2 * n], g[:, 2 * n : 3 * n], g[:, 3 * n :]
        c = cs[:, step]
        c_prev = cs[:, step - 1] if step > 0 else zero
        tc = np.tanh(c)
        dh = dh_seq[:, step] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dz_all[:, step]
        dz[:, :n] = dc * c_prev * f * (1.0 - f)
        dz[:, n : 2 * n] = dc * cand * i * (1.0 - i)
        dz[:, 2 * n : 3 * n] = dc * i * (1.0 - cand * cand)
        dz[:, 3 * n :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ wt
    dz_flat = dz_all.reshape(bsz * t, 4 * n)
    h_prev = np.concatenate([np.zeros((bsz, 1, n), dtype=hs.dtype), hs[:, :-1]], axis=1)
    grads = {
        "U": x.reshape(bsz * t, d).T @ dz_flat,
        "W": h_prev.reshape(bsz * t, n).T @ dz_flat,
        "b": dz_flat.sum(axis=0),
    }
    dx = (dz_flat @ cell.U.T).reshape(bsz, t, d)
    return dx, grads


@dataclass
class BiLstmLayer:
    forward_cell: LstmCell
    backward_cell: LstmCell


def bilstm_forward(layer: BiLstmLayer, x: np.ndarray):
    """Concatenate a forward-time and a backward-time pass: ``[h_fwd ; h_bwd]``."""
    xb, squeeze = _as_batch(x)
    if xb.shape[1] < 1:
        raise ValueError("bilstm: empty sequence")
    hf, cf = lstm_forward(layer.forward_cell, xb)
    hb, cb = lstm_forward(layer.backward_cell, xb[:, ::-1])
    out = np.concatenate([hf, hb[:, ::-1]], axis=2)
    return (out[0] if squeeze else out), (cf, cb, squeeze)


def bilstm_backward(cache, dout: np.ndarray):
    cf, cb, squeeze = cache
    dout = dout[None] if squeeze else dout
    n = cf[0].n_units
    dxf, gf = lstm_backward(cf, dout[:, :, :n])
    dxb, gb = lstm_backward(cb, np.ascontiguousarray(dout[:, ::-1, n:]))
    dx = dxf + dxb[:, ::-1]
    return (dx[0] if squeeze else dx), {"fwd": gf, "bwd": gb}


# ---------------------------------------------------------------- dropout


def dropout(x: np.ndarray, p: float, training: bool, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(output, mask)``; ``mask`` is None at inference."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * mask, mask


def dropout_backward(mask, dout: np.ndarray) -> np.ndarray:
    return dout if mask is None else dout * mask


# ---------------------------------------------------------- dense + softmax


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dense_forward(weights: np.ndarray, bias: np.ndarray, h: np.ndarray):
    if h.shape[-1] != weights.shape[0]:
        raise ValueError(f"dense: input has {h.shape[-1]} features, weights expect {weights.shape[0]}")
    return h @ weights + bias, (weights, h)


def dense_backward(cache, dlogits: np.ndarray):
    weights, h = cache
    d = h.shape[-1]
    flat_h = h.reshape(-1, d)
    flat_g = dlogits.reshape(-1, weights.shape[1])
    return dlogits @ weights.T, {"w": flat_h.T @ flat_g, "b": flat_g.sum(axis=0)}


def dense_softmax_forward(weights: np.ndarray, bias: np.ndarray, h: np.ndarray) -> np.ndarray:
    logits, _ = dense_forward(weights, bias, h)
    return softmax(logits)


def ccel_loss(probs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy over all timesteps.

    Returns ``(loss, dloss/dlogits)``, where the gradient assumes ``probs`` came
    from a softmax over those logits.
    """
    if probs.shape != targets.shape:
        raise ValueError(f"probs {probs.shape} and targets {targets.shape} differ")
    n_steps = int(np.prod(probs.shape[:-1]))
    p_true = np.sum(probs * targets, axis=-1)
    loss = float(-np.mean(np.log(np.maximum(p_true, PROB_FLOOR))))
    return loss, (probs - targets) / n_steps
