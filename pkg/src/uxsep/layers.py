"""Causal neural building blocks.

All layers operate on [channel, time, feature] tensors. The time axis is only
ever padded on the left, so output frame t never sees input frames > t; the
feature axis is padded symmetrically. Convolutions and recurrent cells are
fused ops with hand-derived adjoints (validated against finite differences in
the test suite); normalizations are built compositionally from tensor
primitives so their gradients come for free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, custom_op


@dataclass
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)          # (k_t, k_f)
    stride: tuple[int, int] = (1, 1)          # (s_t, s_f); s_t must stay 1
    depthwise: bool = False

    def __post_init__(self):
        k_t, k_f = self.kernel
        if k_t < 1 or k_f < 1:
            raise ValueError("kernel extents must be >= 1")
        if self.stride[0] != 1:
            raise ValueError("time-axis striding is not supported (breaks frame alignment)")
        if self.depthwise and self.in_channels != self.out_channels:
            raise ValueError("depthwise conv requires in_channels == out_channels")


@dataclass
class RnnSpec:
    kind: str                                  # "LSTM" | "GRU"
    input_size: int
    hidden_size: int

    def __post_init__(self):
        if self.kind not in ("LSTM", "GRU"):
            raise ValueError(f"unknown rnn kind {self.kind!r}")

    @property
    def gates(self) -> int:
        return 4 if self.kind == "LSTM" else 3

    @property
    def param_count(self) -> int:
        h, i = self.hidden_size, self.input_size
        return self.gates * (h * (i + h) + h)


@dataclass
class NormState:
    """Per-stream cumulative statistics over all (channel, feature) elements."""
    running_sum: float = 0.0
    running_sq_sum: float = 0.0
    count: int = 0


# -- feed-forward ---------------------------------------------------------

def feed_forward(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply w (and optional bias) independently at every leading index."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"feed_forward shape mismatch: {x.shape} vs {w.shape}")
    lead = x.shape[:-1]
    flat = T.reshape(x, (-1, w.shape[0]))
    y = T.matmul(flat, w)
    if bias is not None:
        y = y + T.broadcast_to(T.reshape(bias, (1, w.shape[1])), y.shape)
    return T.reshape(y, lead + (w.shape[1],))


# -- causal 2D convolution ------------------------------------------------

def _feature_padding(k_f: int, s_f: int) -> tuple[int, int]:
    total = k_f - s_f
    if total < 0:
        raise ValueError(f"feature stride {s_f} larger than kernel {k_f}")
    left = total // 2
    return left, total - left


def _conv_gather_indices(K: int, F: int, k_t: int, k_f: int, s_f: int, pf: int):
    f_out = (F + pf - k_f) // s_f + 1
    ti = np.arange(K)[:, None, None, None] + np.arange(k_t)[None, None, :, None]
    fi = np.arange(f_out)[None, :, None, None] * s_f + np.arange(k_f)[None, None, None, :]
    flat = ti * (F + pf) + fi                     # [K, f_out, k_t, k_f]
    return f_out, flat


def conv2d_causal(x: Tensor, spec: ConvSpec, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """2D convolution over (time, feature), left-padded in time.

    x: [Cin, K, F]; w: [Cout, Cin, k_t, k_f] (or [C, k_t, k_f] depthwise).
    """
    if spec.depthwise:
        return depthwise_conv_causal(x, w, bias, stride_f=spec.stride[1],
                                     kernel=spec.kernel)
    c_in, K, F = x.shape
    k_t, k_f = spec.kernel
    s_f = spec.stride[1]
    if w.shape != (spec.out_channels, c_in, k_t, k_f):
        raise ValueError(f"weight shape {w.shape} does not match spec")
    pl, pr = _feature_padding(k_f, s_f)
    xp = np.pad(x.data, ((0, 0), (k_t - 1, 0), (pl, pr)))
    f_out, flat = _conv_gather_indices(K, F, k_t, k_f, s_f, pl + pr)
    cols = xp.reshape(c_in, -1)[:, flat]          # [Cin, K, f_out, k_t, k_f]
    cols2 = cols.transpose(1, 2, 0, 3, 4).reshape(K * f_out, c_in * k_t * k_f)
    wmat = w.data.reshape(spec.out_channels, -1).T
    out = (cols2 @ wmat).reshape(K, f_out, spec.out_channels).transpose(2, 0, 1)
    if bias is not None:
        out = out + bias.data[:, None, None]
    pad_shape = xp.shape

    def pull_x(g):
        g2 = g.transpose(1, 2, 0).reshape(K * f_out, spec.out_channels)
        gcol = (g2 @ wmat.T).reshape(K, f_out, c_in, k_t, k_f).transpose(2, 0, 1, 3, 4)
        gp = np.zeros(pad_shape, dtype=g.dtype).reshape(c_in, -1)
        np.add.at(gp, (np.arange(c_in)[:, None, None, None, None], flat[None]), gcol)
        gp = gp.reshape(pad_shape)
        return gp[:, k_t - 1:, pl:pad_shape[2] - pr]

    def pull_w(g):
        g2 = g.transpose(1, 2, 0).reshape(K * f_out, spec.out_channels)
        return (cols2.T @ g2).T.reshape(w.shape)

    pulls = [(x, pull_x), (w, pull_w)]
    if bias is not None:
        pulls.append((bias, lambda g: g.sum(axis=(1, 2))))
    return custom_op(out.astype(x.dtype, copy=False), pulls)


def depthwise_conv_causal(x: Tensor, w: Tensor, bias: Tensor | None = None,
                          stride_f: int = 1, kernel: tuple[int, int] | None = None) -> Tensor:
    """Per-channel causal convolution; channel c of the output depends only
    on channel c of the input. x: [C, K, F]; w: [C, k_t, k_f]."""
    C, K, F = x.shape
    if w.shape[0] != C:
        raise ValueError(f"need one kernel per channel: {w.shape[0]} != {C}")
    k_t, k_f = w.shape[1], w.shape[2]
    if kernel is not None and kernel != (k_t, k_f):
        raise ValueError("kernel spec does not match weights")
    pl, pr = _feature_padding(k_f, stride_f)
    xp = np.pad(x.data, ((0, 0), (k_t - 1, 0), (pl, pr)))
    f_out, flat = _conv_gather_indices(K, F, k_t, k_f, stride_f, pl + pr)
    cols = xp.reshape(C, -1)[:, flat]             # [C, K, f_out, k_t, k_f]
    cols2 = cols.reshape(C, K * f_out, k_t * k_f)
    out = (cols2 @ w.data.reshape(C, k_t * k_f, 1)).reshape(C, K, f_out)
    if bias is not None:
        out = out + bias.data[:, None, None]
    pad_shape = xp.shape

    def pull_x(g):
        gcol = g.reshape(C, K * f_out, 1) @ w.data.reshape(C, 1, k_t * k_f)
        gcol = gcol.reshape(C, K, f_out, k_t, k_f)
        gp = np.zeros(pad_shape, dtype=g.dtype).reshape(C, -1)
        np.add.at(gp, (np.arange(C)[:, None, None, None, None], flat[None]), gcol)
        gp = gp.reshape(pad_shape)
        return gp[:, k_t - 1:, pl:pad_shape[2] - pr]

    def pull_w(g):
        return (cols2.transpose(0, 2, 1) @ g.reshape(C, K * f_out, 1)).reshape(w.shape)

    pulls = [(x, pull_x), (w, pull_w)]
    if bias is not None:
        pulls.append((bias, lambda g: g.sum(axis=(1, 2))))
    return custom_op(out.astype(x.dtype, copy=False), pulls)


# -- feature-axis resampling ----------------------------------------------

RESAMPLE_TAPS = 4


def feature_downsample(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Halve the feature extent: trainable per-channel conv, kernel 1x4,
    feature stride 2. Per-frame, hence trivially causal."""
    if x.shape[2] % 2 != 0:
        raise ValueError(f"feature extent must be even, got {x.shape[2]}")
    return depthwise_conv_causal(x, T.reshape(w, (w.shape[0], 1, RESAMPLE_TAPS)),
                                 bias, stride_f=2)


def feature_upsample(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Double the feature extent: transposed counterpart of the downsampler
    (per-channel, stride-2 zero insertion, kernel 1x4). x: [C, K, F] -> [C, K, 2F]."""
    C, K, F = x.shape
    if w.shape != (C, RESAMPLE_TAPS):
        raise ValueError(f"upsampler weights must be [C, {RESAMPLE_TAPS}], got {w.shape}")
    F2 = 2 * F
    # output tap positions in padded coordinates [0, F2 + 2); crop one each side
    idx = 2 * np.arange(F)[:, None] + np.arange(RESAMPLE_TAPS)[None, :]   # [F, 4]
    contrib = x.data[:, :, :, None] * w.data[:, None, None, :]            # [C, K, F, 4]
    out_pad = np.zeros((C, K, F2 + 2), dtype=x.dtype)
    np.add.at(out_pad, (slice(None), slice(None), idx.reshape(-1)),
              contrib.reshape(C, K, -1))
    out = out_pad[:, :, 1:1 + F2]
    if bias is not None:
        out = out + bias.data[:, None, None]

    def pull_x(g):
        gp = np.pad(g, ((0, 0), (0, 0), (1, 1)))
        taps = gp[:, :, idx]                                              # [C, K, F, 4]
        return np.einsum("ckft,ct->ckf", taps, w.data)

    def pull_w(g):
        gp = np.pad(g, ((0, 0), (0, 0), (1, 1)))
        taps = gp[:, :, idx]
        return np.einsum("ckft,ckf->ct", taps, x.data)

    pulls = [(x, pull_x), (w, pull_w)]
    if bias is not None:
        pulls.append((bias, lambda g: g.sum(axis=(1, 2))))
    return custom_op(out.astype(x.dtype, copy=False), pulls)


# -- recurrent cells ------------------------------------------------------

def lstm_step(x_t: np.ndarray, h: np.ndarray, c: np.ndarray,
              wx: np.ndarray, wh: np.ndarray, b: np.ndarray):
    """One LSTM step on raw arrays (streaming path). Gate order: i, f, g, o."""
    H = h.shape[-1]
    z = (x_t @ wx + b) + h @ wh
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def gru_step(x_t: np.ndarray, h: np.ndarray,
              wx: np.ndarray, wh: np.ndarray, b: np.ndarray):
    """One GRU step on raw arrays. Gate order: r, z, n."""
    H = h.shape[-1]
    zx = x_t @ wx + b
    zh = h @ wh
    r = _sigmoid(zx[..., :H] + zh[..., :H])
    z = _sigmoid(zx[..., H:2 * H] + zh[..., H:2 * H])
    n = np.tanh(zx[..., 2 * H:] + r * zh[..., 2 * H:])
    h_new = (1.0 - z) * n + z * h
    return h_new


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_seq(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor,
             h0: np.ndarray | None = None, c0: np.ndarray | None = None) -> Tensor:
    """Run an LSTM over x: [B, K, I] -> [B, K, H], fused with analytic BPTT.

    B indexes independent streams sharing the same weights (the per-channel
    parallel application of the separation units)."""
    B, K, I = x.shape
    H = wh.shape[0]
    if wx.shape != (I, 4 * H) or wh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ValueError("lstm weight shapes inconsistent")
    dt = x.dtype
    h = np.zeros((B, H), dtype=dt) if h0 is None else h0.astype(dt)
    c = np.zeros((B, H), dtype=dt) if c0 is None else c0.astype(dt)
    zx = x.data @ wx.data + b.data                       # [B, K, 4H]
    gates = np.empty((K, B, 4 * H), dtype=dt)
    cs = np.empty((K, B, H), dtype=dt)
    tanh_cs = np.empty((K, B, H), dtype=dt)
    out = np.empty((B, K, H), dtype=dt)
    c_prevs = np.empty((K, B, H), dtype=dt)
    for k in range(K):
        z = zx[:, k, :] + h @ wh.data
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c_prevs[k] = c
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[k, :, :H] = i
        gates[k, :, H:2 * H] = f
        gates[k, :, 2 * H:3 * H] = g
        gates[k, :, 3 * H:] = o
        cs[k] = c
        tanh_cs[k] = tc
        out[:, k, :] = h

    def backward(gy):
        gx = np.zeros_like(x.data)
        gwx = np.zeros_like(wx.data)
        gwh = np.zeros_like(wh.data)
        gb = np.zeros_like(b.data)
        dh = np.zeros((B, H), dtype=np.float64 if dt == np.float64 else dt)
        dc = np.zeros_like(dh)
        for k in range(K - 1, -1, -1):
            dh = dh + gy[:, k, :]
            i = gates[k, :, :H]
            f = gates[k, :, H:2 * H]
            g = gates[k, :, 2 * H:3 * H]
            o = gates[k, :, 3 * H:]
            tc = tanh_cs[k]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            di = dc * g
            df = dc * c_prevs[k]
            dg = dc * i
            dz = np.concatenate([
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ], axis=1)
            h_prev = out[:, k - 1, :] if k > 0 else (np.zeros((B, H), dtype=dt) if h0 is None else h0)
            gx[:, k, :] = dz @ wx.data.T
            gwx += x.data[:, k, :].T @ dz
            gwh += h_prev.T @ dz
            gb += dz.sum(axis=0)
            dh = dz @ wh.data.T
            dc = dc * f
        return gx, gwx, gwh, gb

    cache = {}

    def _run_backward(gy):
        if "grads" not in cache:
            cache["grads"] = backward(gy)
            cache["gy_id"] = id(gy)
        elif cache["gy_id"] != id(gy):
            cache["grads"] = backward(gy)
            cache["gy_id"] = id(gy)
        return cache["grads"]

    return custom_op(out, [
        (x, lambda g: _run_backward(g)[0]),
        (wx, lambda g: _run_backward(g)[1]),
        (wh, lambda g: _run_backward(g)[2]),
        (b, lambda g: _run_backward(g)[3]),
    ])


def gru_seq(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor,
            h0: np.ndarray | None = None) -> Tensor:
    """Run a GRU over x: [B, K, I] -> [B, K, H], fused with analytic BPTT."""
    B, K, I = x.shape
    H = wh.shape[0]
    if wx.shape != (I, 3 * H) or wh.shape != (H, 3 * H) or b.shape != (3 * H,):
        raise ValueError("gru weight shapes inconsistent")
    dt = x.dtype
    h = np.zeros((B, H), dtype=dt) if h0 is None else h0.astype(dt)
    zx = x.data @ wx.data + b.data
    rs = np.empty((K, B, H), dtype=dt)
    zs = np.empty((K, B, H), dtype=dt)
    ns = np.empty((K, B, H), dtype=dt)
    zh_ns = np.empty((K, B, H), dtype=dt)
    out = np.empty((B, K, H), dtype=dt)
    h_prevs = np.empty((K, B, H), dtype=dt)
    for k in range(K):
        zh = h @ wh.data
        r = _sigmoid(zx[:, k, :H] + zh[:, :H])
        z = _sigmoid(zx[:, k, H:2 * H] + zh[:, H:2 * H])
        n = np.tanh(zx[:, k, 2 * H:] + r * zh[:, 2 * H:])
        h_prevs[k] = h
        h = (1.0 - z) * n + z * h
        rs[k], zs[k], ns[k] = r, z, n
        zh_ns[k] = zh[:, 2 * H:]
        out[:, k, :] = h

    def backward(gy):
        gx = np.zeros_like(x.data)
        gwx = np.zeros_like(wx.data)
        gwh = np.zeros_like(wh.data)
        gb = np.zeros_like(b.data)
        dh = np.zeros((B, H), dtype=dt)
        for k in range(K - 1, -1, -1):
            dh = dh + gy[:, k, :]
            r, z, n = rs[k], zs[k], ns[k]
            h_prev = h_prevs[k]
            dz_gate = dh * (h_prev - n) * z * (1.0 - z)
            dn = dh * (1.0 - z) * (1.0 - n * n)
            dr = dn * zh_ns[k] * r * (1.0 - r)
            dzx = np.concatenate([dr, dz_gate, dn], axis=1)
            dzh = np.concatenate([dr, dz_gate, dn * r], axis=1)
            gx[:, k, :] = dzx @ wx.data.T
            gwx += x.data[:, k, :].T @ dzx
            gwh += h_prev.T @ dzh
            gb += dzx.sum(axis=0)
            dh = dh * z + dzh @ wh.data.T
        return gx, gwx, gwh, gb

    cache = {}

    def _run_backward(gy):
        if cache.get("gy_id") != id(gy):
            cache["grads"] = backward(gy)
            cache["gy_id"] = id(gy)
        return cache["grads"]

    return custom_op(out, [
        (x, lambda g: _run_backward(g)[0]),
        (wx, lambda g: _run_backward(g)[1]),
        (wh, lambda g: _run_backward(g)[2]),
        (b, lambda g: _run_backward(g)[3]),
    ])


# -- activations ----------------------------------------------------------

def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """PReLU with one trainable slope per channel (axis 0 of x)."""
    a = slope.data.reshape((-1,) + (1,) * (x.data.ndim - 1))
    mask = x.data >= 0
    out = np.where(mask, x.data, a * x.data)

    def pull_x(g):
        return np.where(mask, g, a * g)

    def pull_a(g):
        ga = np.where(mask, 0.0, g * x.data)
        return ga.sum(axis=tuple(range(1, x.data.ndim))).reshape(slope.shape)

    return custom_op(out, [(x, pull_x), (slope, pull_a)])


def activation(kind: str, x: Tensor, slope: Tensor | None = None) -> Tensor:
    if kind == "ReLU":
        return T.relu(x)
    if kind == "Sigmoid":
        return T.sigmoid(x)
    if kind == "PReLU":
        return prelu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")


# -- normalization --------------------------------------------------------

CLN_EPS = 1e-8


def cln(x: Tensor, gamma: Tensor, beta: Tensor, state: NormState | None = None) -> Tensor:
    """Cumulative layer norm: frame t is normalized by the mean/variance of
    every (channel, feature) element of frames <= t, then scaled and shifted
    per feature. If a NormState is given its running sums seed the statistics
    and are updated, so streaming calls continue where the last one stopped.
    """
    C, K, F = x.shape
    per_frame = C * F
    prior_sum = state.running_sum if state else 0.0
    prior_sq = state.running_sq_sum if state else 0.0
    prior_n = state.count if state else 0

    # reduce each frame as one contiguous row: numpy's multi-axis reduction
    # order differs between sliced and whole arrays, this keeps streaming and
    # offline statistics bit-identical
    rows = T.reshape(T.transpose(x, (1, 0, 2)), (K, per_frame))
    s = T.sum_(rows, axis=1)                         # [K]
    sq = T.sum_(rows * rows, axis=1)
    # seed the prior before the cumulative sum so the accumulation order is
    # identical frame-by-frame and whole-sequence (streaming bit-equivalence)
    seed_s = np.zeros(K, dtype=x.dtype)
    seed_s[0] = prior_sum
    seed_sq = np.zeros(K, dtype=x.dtype)
    seed_sq[0] = prior_sq
    cs = T.cumsum(s + Tensor(seed_s), 0)
    csq = T.cumsum(sq + Tensor(seed_sq), 0)
    n = Tensor((prior_n + per_frame * (np.arange(K) + 1)).astype(x.dtype))
    mu = cs / n
    var = T.relu(csq / n - mu * mu)                  # clamp tiny negatives
    denom = T.sqrt(var + CLN_EPS)
    mu_b = T.broadcast_to(T.reshape(mu, (1, K, 1)), (C, K, F))
    denom_b = T.broadcast_to(T.reshape(denom, (1, K, 1)), (C, K, F))
    g_b = T.broadcast_to(T.reshape(gamma, (1, 1, F)), (C, K, F))
    b_b = T.broadcast_to(T.reshape(beta, (1, 1, F)), (C, K, F))
    y = (x - mu_b) / denom_b * g_b + b_b

    if state is not None:
        state.running_sum = float(cs.data[-1])
        state.running_sq_sum = float(csq.data[-1])
        state.count = prior_n + per_frame * K
    return y


def framewise_ln(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Each frame normalized independently by its own (channel x feature)
    statistics; the non-cumulative ablation counterpart of cln."""
    C, K, F = x.shape
    n = float(C * F)
    mu = T.sum_(x, axis=(0, 2)) * (1.0 / n)
    var = T.relu(T.sum_(x * x, axis=(0, 2)) * (1.0 / n) - mu * mu)
    denom = T.sqrt(var + CLN_EPS)
    mu_b = T.broadcast_to(T.reshape(mu, (1, K, 1)), (C, K, F))
    denom_b = T.broadcast_to(T.reshape(denom, (1, K, 1)), (C, K, F))
    g_b = T.broadcast_to(T.reshape(gamma, (1, 1, F)), (C, K, F))
    b_b = T.broadcast_to(T.reshape(beta, (1, 1, F)), (C, K, F))
    return (x - mu_b) / denom_b * g_b + b_b
