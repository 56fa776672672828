"""Separation objective and optimization.

The training loss is the negative scale-invariant SNR averaged over sources,
made permutation-invariant by solving an assignment problem between estimates
and references with the Hungarian algorithm. The chosen permutation is held
constant through the backward pass. Optimization is bias-corrected Adam with
elementwise gradient clipping and a stepwise-decaying learning rate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .framing import frame_signal
from .model import UXNetParams, forward_offline
from .tensor import Tape, Tensor

SI_SNR_CAP_DB = 60.0
_LN10 = math.log(10.0)


# -- metric ----------------------------------------------------------------

def si_snr(est: np.ndarray, ref: np.ndarray, zero_mean: bool = False,
           cap_db: float = SI_SNR_CAP_DB) -> float:
    """Scale-invariant SNR in dB of an estimate against a reference.

    The reference is rescaled by its least-squares projection coefficient, so
    the value is invariant to positive rescaling of the estimate. Returns
    +cap_db for (numerically) exact matches and -cap_db when the estimate is
    (numerically) orthogonal to the reference.
    """
    est = np.asarray(est, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    if zero_mean:
        est = est - est.mean()
        ref = ref - ref.mean()
    ref_sq = float(ref @ ref)
    est_sq = float(est @ est)
    if ref_sq == 0.0 or est_sq == 0.0:
        raise ValueError("si_snr is undefined for zero-norm signals")
    alpha = float(est @ ref) / ref_sq
    target = alpha * ref
    t_sq = float(target @ target)
    resid = est - target
    r_sq = float(resid @ resid)
    if r_sq < 1e-12 * t_sq:
        return cap_db
    if t_sq < 1e-12 * r_sq:
        return -cap_db
    return 10.0 * math.log10(t_sq / r_sq)


def si_snri(est: np.ndarray, ref: np.ndarray, mixture: np.ndarray,
            zero_mean: bool = False) -> float:
    """Improvement of the estimate over the unprocessed mixture, in dB."""
    return si_snr(est, ref, zero_mean) - si_snr(mixture, ref, zero_mean)


def _si_snr_tensor(est: Tensor, ref: np.ndarray, zero_mean: bool,
                   cap_db: float) -> Tensor:
    """Differentiable SI-SNR of a 1-D estimate tensor (dB, scalar tensor)."""
    ref = np.asarray(ref, dtype=est.dtype).ravel()
    if zero_mean:
        est = est - T.mean(est)
        ref = ref - ref.mean()
    ref_sq = float(ref @ ref)
    if ref_sq == 0.0:
        raise ValueError("si_snr is undefined for zero-norm references")
    r = Tensor(ref)
    alpha = T.sum_(est * r) * (1.0 / ref_sq)
    target = alpha * r
    t_sq = T.sum_(target * target)
    resid = est - target
    r_sq = T.sum_(resid * resid)
    if float(r_sq.data) < 1e-12 * float(t_sq.data):
        return Tensor(np.asarray(cap_db, dtype=est.dtype))      # saturated
    if float(t_sq.data) < 1e-12 * float(r_sq.data):
        return Tensor(np.asarray(-cap_db, dtype=est.dtype))
    return (T.log(t_sq) - T.log(r_sq)) * (10.0 / _LN10)


# -- assignment ------------------------------------------------------------

def _assignment_cost(cost: np.ndarray) -> float:
    """Minimal total cost of a perfect assignment on a square matrix
    (shortest-augmenting-path Hungarian method, O(n^3))."""
    n = cost.shape[0]
    if n == 0:
        return 0.0
    INF = float("inf")
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = cost
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)      # p[j]: row matched to column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0, delta, j1 = p[j0], INF, 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = a[i0, j] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return float(sum(a[p[j], j] for j in range(1, n + 1)))


def hungarian_assign(cost: np.ndarray) -> tuple[int, ...]:
    """Minimum-cost assignment of rows to columns; perm[i] is the column
    given to row i. Among cost-minimizing assignments, returns the
    lexicographically smallest permutation."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    n = cost.shape[0]
    perm: list[int] = []
    free = list(range(n))
    for i in range(n):
        # greedily fix the smallest column that still admits an optimal
        # completion of the remaining rows
        best_j, best_total = free[0], None
        for j in free:
            rest_rows = np.arange(i + 1, n)
            rest_cols = [c for c in free if c != j]
            rem = _assignment_cost(cost[np.ix_(rest_rows, rest_cols)])
            total = cost[i, j] + rem
            if best_total is None or total < best_total - 1e-12:
                best_total = total
                best_j = j
        perm.append(best_j)
        free.remove(best_j)
    return tuple(perm)


def pit_loss(est: Tensor, ref: np.ndarray, zero_mean: bool = False,
             cap_db: float = SI_SNR_CAP_DB) -> tuple[Tensor, tuple[int, ...]]:
    """Permutation-invariant loss over C estimated and C reference waveforms.

    cost[i][j] = -si_snr(est_i, ref_j); the returned loss is the mean of the
    costs selected by the optimal assignment, differentiable with the
    assignment treated as a constant.
    """
    ref = np.asarray(ref)
    C = est.shape[0]
    if ref.shape[0] != C or est.shape[1] != ref.shape[1]:
        raise ValueError(f"shape mismatch: est {est.shape} vs ref {ref.shape}")
    cost = np.empty((C, C))
    for i in range(C):
        for j in range(C):
            cost[i, j] = -si_snr(est.data[i], ref[j], zero_mean, cap_db)
    perm = hungarian_assign(cost)
    terms = [_si_snr_tensor(est[i], ref[perm[i]], zero_mean, cap_db) * (-1.0 / C)
             for i in range(C)]
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss, perm


# -- optimizer -------------------------------------------------------------

def clip_gradients(params: UXNetParams, bound: float = 5.0):
    """Elementwise clamp of every populated gradient to [-bound, bound]."""
    if bound <= 0:
        raise ValueError("clip bound must be positive")
    for t in params.tensors.values():
        if t.grad is not None:
            np.clip(t.grad, -bound, bound, out=t.grad)


@dataclass
class OptimState:
    """Adam accumulators, one pair per named parameter."""
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: UXNetParams) -> OptimState:
    st = OptimState()
    for name, t in params.tensors.items():
        st.m[name] = np.zeros_like(t.data, dtype=np.float64)
        st.v[name] = np.zeros_like(t.data, dtype=np.float64)
    return st


def adam_update(params: UXNetParams, state: OptimState, lr: float):
    """One bias-corrected Adam step; parameters without a gradient see a
    zero gradient (their moments decay, values stay put on cold moments)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, t in params.tensors.items():
        g = t.grad if t.grad is not None else 0.0
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        t.data -= step.astype(t.data.dtype)


def lr_schedule(epoch: int, base: float = 1e-3, decay: float = 0.98,
                every: int = 2) -> float:
    """Stepwise decay: base * decay^floor(epoch / every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * decay ** (epoch // every)


# -- training loop ---------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr0: float = 1e-3
    lr_decay: float = 0.98
    decay_every: int = 2
    clip: float = 5.0
    zero_mean_si_snr: bool = False
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.decay_every) < 1:
            raise ValueError("epochs, batch_size, decay_every must be >= 1")
        if min(self.lr0, self.lr_decay, self.clip) <= 0:
            raise ValueError("lr0, lr_decay, clip must be positive")


@dataclass
class TrainResult:
    best_params: UXNetParams
    best_epoch: int
    history: list


def _snapshot(params: UXNetParams) -> UXNetParams:
    return UXNetParams(params.config, {
        name: Tensor(t.data.copy(), requires_grad=True)
        for name, t in params.tensors.items()
    })


def example_frames(params: UXNetParams, mixture: np.ndarray) -> np.ndarray:
    """Frame an [M, T] (or [T]) mixture into the model's [M, K, L] input."""
    spec = params.config.frame_spec
    mixture = np.atleast_2d(np.asarray(mixture, dtype=np.float32))
    return np.stack([frame_signal(ch, spec) for ch in mixture])


def example_loss(params: UXNetParams, mixture: np.ndarray, refs: np.ndarray,
                 zero_mean: bool = False) -> tuple[Tensor, tuple[int, ...]]:
    """Forward one example and compute its permutation-invariant loss.

    refs: [C, T]; the references are truncated to the reconstructed length.
    """
    frames = example_frames(params, mixture)
    est = forward_offline(params, Tensor(frames))
    refs = np.asarray(refs)[:, :est.shape[1]]
    return pit_loss(est, refs, zero_mean=zero_mean)


def evaluate(params: UXNetParams, dataset, zero_mean: bool = False) -> float:
    """Mean permutation-invariant loss over a dataset of (mixture, refs)."""
    total = 0.0
    for mixture, refs in dataset:
        loss, _ = example_loss(params, mixture, refs, zero_mean)
        total += float(loss.data)
    return total / len(dataset)


def train(params: UXNetParams, train_set, val_set, config: TrainConfig,
          progress_path: str | None = None, log=None) -> TrainResult:
    """Mini-batch training with per-epoch validation and best-model keeping.

    train_set / val_set: sequences of (mixture [M, T] or [T], refs [C, T]).
    Raises on non-finite loss, naming the offending epoch and batch.
    """
    opt = init_optimizer(params)
    rng = np.random.default_rng(config.seed)
    history = []
    best_val = float("inf")
    best_epoch = -1
    best = _snapshot(params)
    progress = open(progress_path, "w") if progress_path else None
    try:
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config.lr0, config.lr_decay, config.decay_every)
            order = rng.permutation(len(train_set))
            epoch_loss = 0.0
            for b_start in range(0, len(order), config.batch_size):
                batch = order[b_start:b_start + config.batch_size]
                params.zero_grads()
                batch_loss = 0.0
                for idx in batch:
                    mixture, refs = train_set[idx]
                    where = (f"epoch {epoch}, batch {b_start // config.batch_size}, "
                             f"example {idx}")
                    with Tape() as tape:
                        frames = example_frames(params, mixture)
                        est = forward_offline(params, Tensor(frames))
                        if not np.all(np.isfinite(est.data)):
                            raise FloatingPointError(
                                f"non-finite model output at {where}")
                        refs_cut = np.asarray(refs)[:, :est.shape[1]]
                        loss, _ = pit_loss(est, refs_cut,
                                           zero_mean=config.zero_mean_si_snr)
                        scaled = loss * (1.0 / len(batch))
                    if not np.isfinite(loss.data):
                        raise FloatingPointError(f"non-finite loss at {where}")
                    tape.backward(scaled)
                    epoch_loss += float(loss.data)
                clip_gradients(params, config.clip)
                adam_update(params, opt, lr)
            train_loss = epoch_loss / len(train_set)
            val_loss = evaluate(params, val_set, config.zero_mean_si_snr)
            record = {"epoch": epoch, "lr": lr, "train_loss": train_loss,
                      "val_loss": val_loss}
            history.append(record)
            if progress:
                progress.write(json.dumps(record) + "\n")
                progress.flush()
            if log:
                log(record)
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best = _snapshot(params)
    finally:
        if progress:
            progress.close()
    return TrainResult(best_params=best, best_epoch=best_epoch, history=history)
