"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np

from uxsep.tensor import Tape, Tensor


def fd_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued fn at x (64-bit)."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        fp = fn(x)
        flat[i] = saved - h
        fm = fn(x)
        flat[i] = saved
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.abs(analytic) + 1e-8
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grad(build_loss, x0: np.ndarray, tol: float = 1e-4, h: float = 1e-5) -> float:
    """Compare tape gradients of build_loss (Tensor -> scalar Tensor) to FD.

    Returns the relative error so tests can report it.
    """
    x0 = x0.astype(np.float64)
    xt = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = build_loss(xt)
    tape.backward(loss)
    analytic = xt.grad.copy()

    def scalar(x):
        with Tape():
            return build_loss(Tensor(x.copy(), dtype=np.float64)).item()

    numeric = fd_grad(scalar, x0, h=h)
    err = rel_err(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err
