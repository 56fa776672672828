"""Segmentation into overlapping frames and overlap-add reconstruction.

Analysis uses a rectangular window; synthesis divides every output sample by
its coverage count, so frame -> overlap_add is the identity on unmodified
frames. Frame contributions are accumulated in ascending frame order in both
the offline and the streaming path, which makes the two bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, custom_op


@dataclass(frozen=True)
class FrameSpec:
    frame_len: int = 16        # 2 ms at 8 kHz
    hop: int = 8               # 1 ms (50% overlap)
    sample_rate: int = 8000

    def __post_init__(self):
        if not (0 < self.hop <= self.frame_len):
            raise ValueError(f"need 0 < hop <= frame_len, got {self}")

    def num_frames(self, n_samples: int) -> int:
        n = max(n_samples, self.frame_len)
        return (n - self.frame_len) // self.hop + 1

    def output_length(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.frame_len


def frame_signal(x: np.ndarray, spec: FrameSpec) -> np.ndarray:
    """Split waveform [T] into frames [K, L]; frame k covers samples
    [k*hop, k*hop + L). Inputs shorter than one frame are right-zero-padded;
    a trailing remainder shorter than a hop is discarded."""
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot frame an empty signal")
    L, hop = spec.frame_len, spec.hop
    if x.shape[-1] < L:
        x = np.pad(x, (0, L - x.shape[-1]))
    K = (x.shape[-1] - L) // hop + 1
    idx = np.arange(K)[:, None] * hop + np.arange(L)[None, :]
    return x[idx]


def _coverage(K: int, spec: FrameSpec) -> np.ndarray:
    L, hop = spec.frame_len, spec.hop
    cov = np.zeros(spec.output_length(K))
    for k in range(K):
        cov[k * hop:k * hop + L] += 1.0
    return cov


def overlap_add(frames: Tensor, spec: FrameSpec) -> Tensor:
    """Reconstruct C waveforms from frames [C, K, L]; differentiable."""
    C, K, L = frames.shape
    if L != spec.frame_len:
        raise ValueError(f"frame length {L} != spec {spec.frame_len}")
    hop = spec.hop
    T_out = spec.output_length(K)
    cov = _coverage(K, spec).astype(frames.dtype)
    acc = np.zeros((C, T_out), dtype=frames.dtype)
    for k in range(K):
        acc[:, k * hop:k * hop + L] += frames.data[:, k, :]
    out = acc / cov

    def pull(g):
        gs = g / cov
        gf = np.empty((C, K, L), dtype=g.dtype)
        for k in range(K):
            gf[:, k, :] = gs[:, k * hop:k * hop + L]
        return gf

    return custom_op(out, [(frames, pull)])


@dataclass
class OverlapAddState:
    """Streaming synthesis tail: pending accumulator and coverage counts."""
    spec: FrameSpec
    acc: np.ndarray = None
    cov: np.ndarray = None
    channels: int = 1

    def __post_init__(self):
        L = self.spec.frame_len
        if self.acc is None:
            self.acc = np.zeros((self.channels, L), dtype=np.float32)
        if self.cov is None:
            self.cov = np.zeros(L, dtype=np.float32)


def streaming_overlap_add(frame: np.ndarray, state: OverlapAddState) -> np.ndarray:
    """Feed one frame [C, L]; emit hop fully-covered samples [C, hop]."""
    spec = state.spec
    L, hop = spec.frame_len, spec.hop
    state.acc[:, :] += frame
    state.cov[:] += 1.0
    emitted = state.acc[:, :hop] / state.cov[:hop]
    state.acc[:, :-hop] = state.acc[:, hop:]
    state.acc[:, -hop:] = 0.0
    state.cov[:-hop] = state.cov[hop:]
    state.cov[-hop:] = 0.0
    return emitted


def flush_overlap_add(state: OverlapAddState) -> np.ndarray:
    """Emit the remaining L - hop tail samples so that the concatenated
    streaming output matches the offline reconstruction exactly."""
    spec = state.spec
    L, hop = spec.frame_len, spec.hop
    n = L - hop
    if n == 0:
        return np.zeros((state.acc.shape[0], 0), dtype=state.acc.dtype)
    tail = state.acc[:, :n] / np.maximum(state.cov[:n], 1.0)
    state.acc[:] = 0.0
    state.cov[:] = 0.0
    return tail
